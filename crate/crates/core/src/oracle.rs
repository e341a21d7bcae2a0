//! Brute-force reference implementations for checking the fast paths:
//! direct-loop convolution at integer taps, a direct bilinear sampler, and
//! central finite differences.
//!
//! Nothing here calls into `irrconv` or `nn`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A deterministic map from a flat parameter vector to a scalar.
pub trait ScalarFunction {
    fn eval(&self, params: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> ScalarFunction for F {
    fn eval(&self, params: &[f64]) -> f64 {
        self(params)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h` for every `j`.
pub fn finite_diff_grad<F: ScalarFunction + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::argument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f.eval(&probe);
        probe[j] = x[j] - h;
        let minus = f.eval(&probe);
        probe[j] = x[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric { index: j });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Direct valid convolution (cross-correlation) with integer taps spaced by
/// `dilation`, after zero-padding the input by `padding` on every side.
///
/// `weights` has shape `(c_out, c_in, kh, kw)`.
pub fn naive_conv(
    input: &Tensor,
    weights: &Tensor,
    dilation: usize,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    if dilation == 0 {
        return Err(Error::argument("dilation must be at least 1"));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::argument("stride must be positive"));
    }
    let [batch, c_in, h, w] = input.shape();
    let [c_out, wc_in, kh, kw] = weights.shape();
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    let span_h = dilation * (kh.max(1) - 1) + 1;
    let span_w = dilation * (kw.max(1) - 1) + 1;
    let (ph, pw) = (h + 2 * padding.0, w + 2 * padding.1);
    if kh == 0 || kw == 0 || ph < span_h || pw < span_w {
        return Err(Error::shape("output extent would be below 1"));
    }
    let out_h = (ph - span_h) / stride.0 + 1;
    let out_w = (pw - span_w) / stride.1 + 1;
    let mut out = Tensor::zeros([batch, c_out, out_h, out_w])?;
    for b in 0..batch {
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let r = (oy * stride.0 + ky * dilation) as i64 - padding.0 as i64;
                                let c = (ox * stride.1 + kx * dilation) as i64 - padding.1 as i64;
                                if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                                    continue;
                                }
                                acc += weights.get(co, ci, ky, kx)
                                    * input.get(b, ci, r as usize, c as usize);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Direct bilinear sample at absolute `(row, col)` in nested-lerp form;
/// out-of-range pixels read as zero.
pub fn naive_bilinear(input: &Tensor, b: usize, c: usize, row: f64, col: f64) -> f64 {
    let r0 = row.floor();
    let c0 = col.floor();
    let (tr, tc) = (row - r0, col - c0);
    let px = |r: f64, cc: f64| {
        if r < 0.0 || cc < 0.0 || r >= input.height() as f64 || cc >= input.width() as f64 {
            0.0
        } else {
            input.get(b, c, r as usize, cc as usize)
        }
    };
    let (v00, v01) = (px(r0, c0), px(r0, c0 + 1.0));
    let (v10, v11) = (px(r0 + 1.0, c0), px(r0 + 1.0, c0 + 1.0));
    let top = v00 + tc * (v01 - v00);
    let bottom = v10 + tc * (v11 - v10);
    top + tr * (bottom - top)
}

/// Direct irregular convolution: for every output location, sum
/// `w * bilinear(center + offset)` over channels and taps. `offsets` is
/// indexed `[c_in][tap]` as `(row, col)` pairs; `weights` is `[c_out][c_in][tap]`.
pub fn naive_irregular_conv(
    input: &Tensor,
    weights: &[f64],
    offsets: &[(f64, f64)],
    c_out: usize,
    grid: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor> {
    let [batch, c_in, h, w] = input.shape();
    let taps = grid.0 * grid.1;
    if offsets.len() != c_in * taps || weights.len() != c_out * c_in * taps {
        return Err(Error::shape("offset or weight count mismatch"));
    }
    if h < grid.0 || w < grid.1 {
        return Err(Error::shape("output extent would be below 1"));
    }
    let out_h = (h - grid.0) / stride.0 + 1;
    let out_w = (w - grid.1) / stride.1 + 1;
    let center = ((grid.0 - 1) / 2, (grid.1 - 1) / 2);
    let mut out = Tensor::zeros([batch, c_out, out_h, out_w])?;
    for b in 0..batch {
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for t in 0..taps {
                            let (px, py) = offsets[ci * taps + t];
                            let row = (oy * stride.0 + center.0) as f64 + px;
                            let col = (ox * stride.1 + center.1) as f64 + py;
                            acc += weights[(co * c_in + ci) * taps + t]
                                * naive_bilinear(input, b, ci, row, col);
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}
