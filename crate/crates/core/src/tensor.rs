//! Dense 4-D tensors of `f64` in (batch, channel, height, width) row-major
//! order, plus the seeded normal generator used for weight initialization.
//!
//! # Binary format
//!
//! Tensors serialize as the 4-byte magic `ICT1`, followed by the four extents
//! as little-endian `u64`, followed by `batch * channel * height * width`
//! little-endian IEEE-754 `f64` values in row-major order.
//!
//! # Random numbers
//!
//! [`Rng`] wraps PCG-XSL-RR 128/64 (`Pcg64`, multiplier
//! `0x2360ed051fc65da44385df649fccf645`, increment
//! `0x5851f42d4c957f2d14057b7ef767814f`) seeded through `rand_core`'s
//! `seed_from_u64`. Normal variates use the Box-Muller transform on two
//! uniforms `u1 = 1 - (a >> 11) * 2^-53` and `u2 = (b >> 11) * 2^-53`,
//! returning `sqrt(-2 ln u1) * cos(2 pi u2)` first and caching
//! `sqrt(-2 ln u1) * sin(2 pi u2)` for the next call.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand_core::{Rng as _, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ICT1";

const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic 64-bit generator with a Box-Muller normal transform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: Pcg64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: Pcg64::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * UNIT
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

fn element_count(shape: [usize; 4]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= isize::MAX as usize))
        .ok_or(Error::Size(shape))
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Result<Self> {
        let len = element_count(shape)?;
        Ok(Tensor {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len = element_count(shape)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// I.i.d. normal entries with mean 0 and the given standard deviation.
    pub fn randn(shape: [usize; 4], rng: &mut Rng, stddev: f64) -> Result<Self> {
        if !(stddev >= 0.0) || !stddev.is_finite() {
            return Err(Error::argument(format!(
                "stddev must be finite and non-negative, got {stddev}"
            )));
        }
        let len = element_count(shape)?;
        let data = (0..len).map(|_| rng.normal() * stddev).collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(b, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `height * width` plane for one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = self.offset(b, c, 0, 0);
        &self.data[start..start + self.shape[2] * self.shape[3]]
    }

    pub fn elementwise_binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise {:?} on mismatched shapes {:?} and {:?}",
                op, self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise_binary(other, BinaryOp::Mul)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        for d in self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("truncated tensor header"))?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::format(format!("bad tensor magic {magic:?}")));
        }
        let mut shape = [0usize; 4];
        let mut word = [0u8; 8];
        for d in shape.iter_mut() {
            r.read_exact(&mut word)
                .map_err(|_| Error::format("truncated tensor header"))?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::format("tensor extent exceeds usize"))?;
        }
        let len = element_count(shape)?;
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("truncated tensor data"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.data.len() * 8);
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let t = Tensor::read_binary(bytes)?;
        if bytes.len() != 36 + t.len() * 8 {
            return Err(Error::format("trailing bytes after tensor data"));
        }
        Ok(t)
    }

    /// One line per (batch, channel) plane, the plane flattened row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let plane = self.shape[2] * self.shape[3];
        if plane == 0 {
            return out;
        }
        for row in self.data.chunks(plane) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}
