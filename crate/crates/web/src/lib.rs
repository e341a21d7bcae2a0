//! Browser bindings: train a small irregular network on stroke images and
//! inspect its kernel shapes and single-pixel input-gradient maps.

use wasm_bindgen::prelude::*;

use icnn::cli::heatmap::heatmap;
use icnn::cli::synth::{generate, SynthParams, SyntheticDataset};
use icnn::cli::train::{evaluate, toy_network};
use icnn::irrconv::{init_positions, interpolate};
use icnn::{Arch, Error, Network, Tensor, TrainConfig, Trainer};

const SIZE: usize = 24;

fn js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Plain-Rust state behind [`ShapeDemo`].
pub struct Demo {
    data: SyntheticDataset,
    trainer: Trainer,
}

impl Demo {
    pub fn new(seed: u64, angle_deg: f64, noise: f64) -> icnn::Result<Self> {
        let data = generate(&SynthParams {
            size: SIZE,
            count: 8,
            strokes: 10,
            length: 9,
            angle_deg,
            noise,
            seed,
            ..SynthParams::default()
        })?;
        let config = TrainConfig {
            lr_weights: 0.05,
            lr_positions: 5.0,
            max_iter: 1_000_000,
            batch_size: 2,
            seed,
            ..TrainConfig::default()
        };
        let net = toy_network(Arch::Irregular, &data, &config)?;
        Ok(Demo {
            data,
            trainer: Trainer::new(net, config)?,
        })
    }

    /// Runs `n` steps; returns the last loss.
    pub fn step(&mut self, n: usize) -> icnn::Result<f64> {
        let mut loss = f64::NAN;
        for _ in 0..n {
            let it = self.trainer.iteration();
            let (x, labels) = self.data.minibatch(it, self.trainer.config().batch_size)?;
            loss = self.trainer.step(&x, &labels)?.loss;
        }
        Ok(loss)
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    fn network(&self) -> Network {
        self.trainer.network().clone()
    }

    pub fn accuracy(&self) -> icnn::Result<f64> {
        evaluate(&mut self.network(), &self.data)
    }

    /// `[x0, y0, x1, y1, ...]` over all channels and taps of the `which`-th
    /// irregular layer.
    pub fn positions(&self, which: usize) -> Vec<f64> {
        self.trainer
            .network()
            .irregular_layers()
            .nth(which)
            .map(|(_, k)| k.positions().offsets().iter().flat_map(|o| [o.x, o.y]).collect())
            .unwrap_or_default()
    }

    pub fn image(&self, index: usize) -> Vec<f64> {
        self.data.images.plane(index % self.data.len(), 0).to_vec()
    }

    /// Input-gradient magnitude of the stroke-class score at output pixel
    /// `(row, col)` of image `index`.
    pub fn heatmap(&self, index: usize, row: usize, col: usize) -> icnn::Result<Vec<f64>> {
        let img = Tensor::from_vec([1, 1, SIZE, SIZE], self.image(index))?;
        Ok(heatmap(&mut self.network(), &img, (row, col), 1)?.into_vec())
    }
}

#[wasm_bindgen]
pub struct ShapeDemo(Demo);

#[wasm_bindgen]
impl ShapeDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, angle_deg: f64, noise: f64) -> Result<ShapeDemo, JsValue> {
        Demo::new(seed.into(), angle_deg, noise).map(ShapeDemo).map_err(js)
    }

    pub fn step(&mut self, n: u32) -> Result<f64, JsValue> {
        self.0.step(n as usize).map_err(js)
    }

    pub fn iteration(&self) -> u32 {
        self.0.iteration() as u32
    }

    pub fn accuracy(&self) -> Result<f64, JsValue> {
        self.0.accuracy().map_err(js)
    }

    pub fn positions(&self, which: u32) -> Vec<f64> {
        self.0.positions(which as usize)
    }

    pub fn image(&self, index: u32) -> Vec<f64> {
        self.0.image(index as usize)
    }

    pub fn heatmap(&self, index: u32, row: u32, col: u32) -> Result<Vec<f64>, JsValue> {
        self.0.heatmap(index as usize, row as usize, col as usize).map_err(js)
    }

    pub fn size(&self) -> u32 {
        SIZE as u32
    }

    /// Offset from input to output coordinates of the toy network.
    pub fn margin(&self) -> u32 {
        self.0.trainer.network().output_alignment().0 .0 as u32
    }
}

/// Bilinear resampling of a `size x size` image with every sample shifted by
/// `(dx, dy)`; out-of-range neighbors read as zero.
pub fn shifted(image: &[f64], size: usize, dx: f64, dy: f64) -> icnn::Result<Vec<f64>> {
    let t = Tensor::from_vec([1, 1, size, size], image.to_vec())?;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(interpolate(&t, r as f64 + dx, c as f64 + dy, 0, 0)?);
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn resample(image: &[f64], size: u32, dx: f64, dy: f64) -> Result<Vec<f64>, JsValue> {
    shifted(image, size as usize, dx, dy).map_err(js)
}

/// Initial `[x, y]` pairs of a `rows x cols` kernel shifted by `epsilon`.
#[wasm_bindgen]
pub fn initial_positions(rows: u32, cols: u32, epsilon: f64) -> Result<Vec<f64>, JsValue> {
    init_positions(rows as usize, cols as usize, 1, epsilon)
        .map(|p| p.offsets().iter().flat_map(|o| [o.x, o.y]).collect())
        .map_err(js)
}
