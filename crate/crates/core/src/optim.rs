//! SGD with separate learning rates for weights and tap positions, a poly
//! decay schedule, and the clamp that keeps each position update near the
//! interpolation cell it was computed from.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irrconv::{Offset, PositionSet};
use crate::nn::{pixel_softmax_xent, Gradients, LabelMap, Layer, LayerGradient, Network};
use crate::tensor::Tensor;

/// Slack subtracted from both clamp bounds so the bounds hold strictly.
pub const CLAMP_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_weights: f64,
    pub lr_positions: f64,
    pub poly_power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub epsilon_init: f64,
    pub epsilon_clamp: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_weights: 0.001,
            lr_positions: 50.0,
            poly_power: 0.9,
            max_iter: 500,
            batch_size: 4,
            epsilon_init: 0.05,
            epsilon_clamp: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_weights >= 0.0) || !self.lr_weights.is_finite() {
            return bad(format!("lr_weights must be >= 0, got {}", self.lr_weights));
        }
        if !(self.lr_positions >= 0.0) || !self.lr_positions.is_finite() {
            return bad(format!("lr_positions must be >= 0, got {}", self.lr_positions));
        }
        if !(self.poly_power > 0.0) || !self.poly_power.is_finite() {
            return bad(format!("poly_power must be > 0, got {}", self.poly_power));
        }
        if !(self.epsilon_clamp > 0.0) || !self.epsilon_clamp.is_finite() {
            return bad(format!("epsilon_clamp must be > 0, got {}", self.epsilon_clamp));
        }
        if !(self.epsilon_init.abs() < 0.5) {
            return bad(format!("|epsilon_init| must be < 0.5, got {}", self.epsilon_init));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are ignored;
    /// missing keys keep their defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: {key} expects a number", n + 1)))
            };
            let int = || {
                value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("line {}: {key} expects an integer", n + 1)))
            };
            match key {
                "lr_weights" => cfg.lr_weights = real()?,
                "lr_positions" => cfg.lr_positions = real()?,
                "poly_power" => cfg.poly_power = real()?,
                "max_iter" => cfg.max_iter = int()? as usize,
                "batch_size" => cfg.batch_size = int()? as usize,
                "epsilon_init" => cfg.epsilon_init = real()?,
                "epsilon_clamp" => cfg.epsilon_clamp = real()?,
                "seed" => cfg.seed = int()?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "lr_weights = {}", self.lr_weights).unwrap();
        writeln!(s, "lr_positions = {}", self.lr_positions).unwrap();
        writeln!(s, "poly_power = {}", self.poly_power).unwrap();
        writeln!(s, "max_iter = {}", self.max_iter).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "epsilon_init = {}", self.epsilon_init).unwrap();
        writeln!(s, "epsilon_clamp = {}", self.epsilon_clamp).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }
}

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, config: &TrainConfig) -> Result<f64> {
    if iter > config.max_iter {
        return Err(Error::argument(format!(
            "iteration {iter} beyond max_iter {}",
            config.max_iter
        )));
    }
    let remaining = 1.0 - iter as f64 / config.max_iter as f64;
    Ok(base * remaining.powf(config.poly_power))
}

fn clamp_coordinate(last: f64, candidate: f64, epsilon: f64) -> f64 {
    let lo = last.floor() - epsilon + CLAMP_MARGIN;
    let hi = last.ceil() + epsilon - CLAMP_MARGIN;
    candidate.clamp(lo, hi)
}

/// Clips every coordinate of `candidate` into
/// `(floor(last) - epsilon, ceil(last) + epsilon)`.
pub fn clamp_positions(last: &PositionSet, candidate: &PositionSet, epsilon_clamp: f64) -> Result<PositionSet> {
    if last.grid() != candidate.grid() || last.channels() != candidate.channels() {
        return Err(Error::shape("clamp on position sets of different layouts"));
    }
    let offsets = last
        .offsets()
        .iter()
        .zip(candidate.offsets())
        .map(|(l, c)| {
            Offset::new(
                clamp_coordinate(l.x, c.x, epsilon_clamp),
                clamp_coordinate(l.y, c.y, epsilon_clamp),
            )
        })
        .collect();
    PositionSet::new(last.grid(), last.channels(), offsets)
}

/// `true` when `after` lies strictly inside the clamp window of `before`.
pub fn within_clamp(before: f64, after: f64, epsilon_clamp: f64) -> bool {
    before.floor() - epsilon_clamp < after && after < before.ceil() + epsilon_clamp
}

/// One plain SGD update: `W -= lr_w * dW`, then `P -= lr_p * dP` clamped
/// against the pre-step positions.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    lr_weights: f64,
    lr_positions: f64,
    epsilon_clamp: f64,
) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(Error::shape("gradient set does not match the network"));
    }
    for (i, (layer, grad)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        match (layer, grad) {
            (Layer::Irregular(k), LayerGradient::Irregular { weights, positions }) => {
                update_weights(k.weights_mut(), weights, lr_weights, i)?;
                if positions.len() != k.positions().offsets().len() {
                    return Err(Error::shape(format!("layer {i}: position gradient size mismatch")));
                }
                if lr_positions == 0.0 {
                    continue;
                }
                let last = k.positions().clone();
                let mut candidate = last.clone();
                for (p, g) in candidate.offsets_mut().iter_mut().zip(positions) {
                    p.x -= lr_positions * g.x;
                    p.y -= lr_positions * g.y;
                }
                k.set_positions(clamp_positions(&last, &candidate, epsilon_clamp)?)?;
            }
            (Layer::Regular(k), LayerGradient::Regular { weights }) => {
                update_weights(k.weights_mut(), weights, lr_weights, i)?;
            }
            (Layer::Relu { .. }, LayerGradient::None) => {}
            _ => return Err(Error::shape(format!("layer {i}: gradient kind does not match layer"))),
        }
    }
    Ok(())
}

fn update_weights(weights: &mut [f64], grad: &[f64], lr: f64, layer: usize) -> Result<()> {
    if weights.len() != grad.len() {
        return Err(Error::shape(format!("layer {layer}: weight gradient size mismatch")));
    }
    for (w, g) in weights.iter_mut().zip(grad) {
        *w -= lr * g;
    }
    Ok(())
}

/// Copy of one irregular layer's positions at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SnapshotRecord", into = "SnapshotRecord")]
pub struct ShapeSnapshot {
    pub layer: usize,
    pub iteration: usize,
    pub positions: PositionSet,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    layer: usize,
    iteration: usize,
    grid: [usize; 2],
    /// `[channel][tap] = [x, y]`
    positions: Vec<Vec<[f64; 2]>>,
}

impl From<ShapeSnapshot> for SnapshotRecord {
    fn from(s: ShapeSnapshot) -> Self {
        let p = &s.positions;
        SnapshotRecord {
            layer: s.layer,
            iteration: s.iteration,
            grid: [p.grid().0, p.grid().1],
            positions: (0..p.channels())
                .map(|c| p.channel(c).iter().map(|o| [o.x, o.y]).collect())
                .collect(),
        }
    }
}

impl TryFrom<SnapshotRecord> for ShapeSnapshot {
    type Error = Error;

    fn try_from(r: SnapshotRecord) -> Result<Self> {
        let channels = r.positions.len();
        let offsets = r
            .positions
            .into_iter()
            .flatten()
            .map(|[x, y]| Offset::new(x, y))
            .collect();
        Ok(ShapeSnapshot {
            layer: r.layer,
            iteration: r.iteration,
            positions: PositionSet::new((r.grid[0], r.grid[1]), channels, offsets)?,
        })
    }
}

/// Snapshots of every irregular layer when `iter` is a multiple of `every_k`.
pub fn record_snapshot(net: &Network, iter: usize, every_k: usize) -> Result<Vec<ShapeSnapshot>> {
    if every_k == 0 {
        return Err(Error::argument("snapshot interval must be at least 1"));
    }
    if iter % every_k != 0 {
        return Ok(Vec::new());
    }
    Ok(net
        .irregular_layers()
        .map(|(layer, k)| ShapeSnapshot {
            layer,
            iteration: iter,
            positions: k.positions().clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub lr_weights: f64,
    pub lr_positions: f64,
}

/// Drives forward, loss, backward and the clamped SGD update under the poly
/// schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Network,
    config: TrainConfig,
    iteration: usize,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net,
            config,
            iteration: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.config.max_iter
    }

    /// Loss on `labels` aligned to the network's output window.
    pub fn loss_and_grad(&mut self, input: &Tensor, labels: &LabelMap) -> Result<(f64, Tensor)> {
        let scores = self.net.forward(input)?;
        let (offset, scale) = self.net.output_alignment();
        let aligned = labels.aligned(offset, scale, scores.height(), scores.width())?;
        pixel_softmax_xent(&scores, &aligned)
    }

    pub fn step(&mut self, input: &Tensor, labels: &LabelMap) -> Result<StepReport> {
        if self.finished() {
            return Err(Error::State("training already reached max_iter".into()));
        }
        let lr_weights = poly_lr(self.config.lr_weights, self.iteration, &self.config)?;
        let lr_positions = poly_lr(self.config.lr_positions, self.iteration, &self.config)?;
        let (loss, grad) = self.loss_and_grad(input, labels)?;
        let grads = self.net.backward(&grad)?;
        sgd_step(&mut self.net, &grads, lr_weights, lr_positions, self.config.epsilon_clamp)?;
        let report = StepReport {
            iteration: self.iteration,
            loss,
            lr_weights,
            lr_positions,
        };
        self.iteration += 1;
        Ok(report)
    }
}
