//! Synthetic stroke segmentation data: straight strokes of a fixed length
//! and orientation on a dark background, with additive Gaussian noise.
//! Stroke pixels are class 1, everything else class 0. Optional distractors
//! are shorter segments with the same orientation and intensity, labeled 0,
//! so that telling the classes apart needs context along the stroke.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::LabelMap;
use crate::tensor::{Rng, Tensor};

pub const IMAGES_FILE: &str = "images.ict";
pub const LABELS_FILE: &str = "labels.ict";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Square image side in pixels.
    pub size: usize,
    /// Number of images.
    pub count: usize,
    /// Strokes per image.
    pub strokes: usize,
    /// Stroke length in pixels.
    pub length: usize,
    /// Orientation in degrees; 0 is horizontal, counter-clockwise positive.
    pub angle_deg: f64,
    pub thickness: usize,
    pub noise: f64,
    pub seed: u64,
    /// Background-labeled segments per image.
    pub distractors: usize,
    pub distractor_length: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 32,
            count: 16,
            strokes: 4,
            length: 7,
            angle_deg: 0.0,
            thickness: 1,
            noise: 0.0,
            seed: 0,
            distractors: 0,
            distractor_length: 3,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.count == 0 || self.length == 0 || self.thickness == 0 {
            return Err(Error::argument("size, count, length and thickness must be positive"));
        }
        if self.distractors > 0 && self.distractor_length == 0 {
            return Err(Error::argument("distractor length must be positive"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::argument(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !self.angle_deg.is_finite() {
            return Err(Error::argument("angle must be finite"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        writeln!(s, "size = {}", self.size).unwrap();
        writeln!(s, "count = {}", self.count).unwrap();
        writeln!(s, "strokes = {}", self.strokes).unwrap();
        writeln!(s, "length = {}", self.length).unwrap();
        writeln!(s, "angle = {}", self.angle_deg).unwrap();
        writeln!(s, "thickness = {}", self.thickness).unwrap();
        writeln!(s, "noise = {}", self.noise).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "distractors = {}", self.distractors).unwrap();
        writeln!(s, "distractor_length = {}", self.distractor_length).unwrap();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub images: Tensor,
    pub labels: LabelMap,
    pub params: Option<SynthParams>,
}

/// Pixels covered by one stroke of `length` centered at `(r, c)`, clipped to
/// the image.
fn segment_pixels(r: f64, c: f64, length: usize, p: &SynthParams) -> Vec<(usize, usize)> {
    let a = p.angle_deg.to_radians();
    // rows grow downwards, so a counter-clockwise angle moves up
    let (dr, dc) = (-a.sin(), a.cos());
    let (nr, nc) = (dc, -dr);
    let half = (length as f64 - 1.0) / 2.0;
    let mut out = Vec::new();
    for t in 0..length {
        let s = t as f64 - half;
        for k in 0..p.thickness {
            let q = k as f64 - (p.thickness as f64 - 1.0) / 2.0;
            let rr = (r + s * dr + q * nr).round();
            let cc = (c + s * dc + q * nc).round();
            if rr >= 0.0 && cc >= 0.0 && (rr as usize) < p.size && (cc as usize) < p.size {
                out.push((rr as usize, cc as usize));
            }
        }
    }
    out
}

fn stroke_pixels(r: f64, c: f64, p: &SynthParams) -> Vec<(usize, usize)> {
    segment_pixels(r, c, p.length, p)
}

pub fn generate(params: &SynthParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let mut rng = Rng::new(params.seed);
    let n = params.size;
    let mut images = Tensor::zeros([params.count, 1, n, n])?;
    let mut classes = vec![0usize; params.count * n * n];
    for b in 0..params.count {
        // distractors first so that strokes drawn over them keep class 1
        for _ in 0..params.distractors {
            let r = rng.uniform() * n as f64;
            let c = rng.uniform() * n as f64;
            for (rr, cc) in segment_pixels(r, c, params.distractor_length, params) {
                images.set(b, 0, rr, cc, 1.0);
            }
        }
        for _ in 0..params.strokes {
            let r = rng.uniform() * n as f64;
            let c = rng.uniform() * n as f64;
            for (rr, cc) in stroke_pixels(r, c, params) {
                images.set(b, 0, rr, cc, 1.0);
                classes[(b * n + rr) * n + cc] = 1;
            }
        }
        if params.noise > 0.0 {
            for v in &mut images.data_mut()[b * n * n..(b + 1) * n * n] {
                *v += params.noise * rng.normal();
            }
        }
    }
    Ok(SyntheticDataset {
        images,
        labels: LabelMap::new(params.count, n, n, classes)?,
        params: Some(params.clone()),
    })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.labels.classes().iter().copied().max().unwrap_or(0).max(1) + 1
    }

    /// Labels stored as a `(count, 1, h, w)` tensor of class indices.
    pub fn labels_tensor(&self) -> Tensor {
        let (b, h, w) = self.labels.shape();
        Tensor::from_vec([b, 1, h, w], self.labels.classes().iter().map(|&c| c as f64).collect())
            .expect("label extents")
    }

    /// Images and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelMap)> {
        let [_, c, h, w] = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut classes = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::argument(format!("image index {i} out of range")));
            }
            for ch in 0..c {
                data.extend_from_slice(self.images.plane(i, ch));
            }
            classes.extend_from_slice(&self.labels.classes()[i * h * w..(i + 1) * h * w]);
        }
        Ok((
            Tensor::from_vec([indices.len(), c, h, w], data)?,
            LabelMap::new(indices.len(), h, w, classes)?,
        ))
    }

    /// Cyclic minibatch for training step `iteration`.
    pub fn minibatch(&self, iteration: usize, batch_size: usize) -> Result<(Tensor, LabelMap)> {
        let indices: Vec<usize> = (0..batch_size)
            .map(|j| (iteration * batch_size + j) % self.len())
            .collect();
        self.batch(&indices)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(IMAGES_FILE), self.images.to_bytes())?;
        fs::write(dir.join(LABELS_FILE), self.labels_tensor().to_bytes())?;
        if let Some(p) = &self.params {
            fs::write(dir.join(MANIFEST_FILE), p.manifest())?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let images = Tensor::from_bytes(&fs::read(dir.join(IMAGES_FILE))?)?;
        let labels = Tensor::from_bytes(&fs::read(dir.join(LABELS_FILE))?)?;
        let [b, c, h, w] = labels.shape();
        if c != 1 || [b, h, w] != [images.batch(), images.height(), images.width()] {
            return Err(Error::format("label tensor does not match the images"));
        }
        let classes = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(format!("label value {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticDataset {
            images,
            labels: LabelMap::new(b, h, w, classes)?,
            params: None,
        })
    }
}
