//! Toy training runs shared by the `train` command and the tests.

use std::io::Write;

use crate::cli::synth::SyntheticDataset;
use crate::error::{Error, Result};
use crate::irrconv::PositionSet;
use crate::nn::{argmax_classes, pixel_accuracy, toy_plan, Arch, Layer, Network};
use crate::optim::{within_clamp, ShapeSnapshot, StepReport, TrainConfig, Trainer};
use crate::tensor::Rng;

/// Hidden channel count of the toy plan.
pub const HIDDEN_CHANNELS: usize = 8;

pub const LOG_HEADER: &str = "iteration,loss,lr_weights,lr_positions";

pub fn log_line(r: &StepReport) -> String {
    format!("{},{:.17e},{:.17e},{:.17e}", r.iteration, r.loss, r.lr_weights, r.lr_positions)
}

/// The toy network for `dataset`, initialized from `config.seed`.
pub fn toy_network(arch: Arch, dataset: &SyntheticDataset, config: &TrainConfig) -> Result<Network> {
    let plan = toy_plan(arch, dataset.images.channels(), HIDDEN_CHANNELS, dataset.classes());
    Network::from_specs(&plan, &mut Rng::new(config.seed), config.epsilon_init)
}

/// Positions of every multi-tap conv layer. Regular layers report their
/// fixed integer grid.
pub fn shape_snapshots(net: &Network, iteration: usize) -> Result<Vec<ShapeSnapshot>> {
    let mut out = Vec::new();
    for (layer, l) in net.layers().iter().enumerate() {
        let positions = match l {
            Layer::Irregular(k) => k.positions().clone(),
            Layer::Regular(k) if k.grid().0 * k.grid().1 > 1 => {
                PositionSet::init(k.grid().0, k.grid().1, k.c_in(), 0.0)?
            }
            _ => continue,
        };
        out.push(ShapeSnapshot {
            layer,
            iteration,
            positions,
        });
    }
    Ok(out)
}

/// Position coordinates that left the clamp window in one step.
fn clamp_violations(before: &Network, after: &Network, epsilon_clamp: f64) -> usize {
    before
        .irregular_layers()
        .zip(after.irregular_layers())
        .map(|((_, a), (_, b))| {
            a.positions()
                .offsets()
                .iter()
                .zip(b.positions().offsets())
                .map(|(p, q)| {
                    usize::from(!within_clamp(p.x, q.x, epsilon_clamp))
                        + usize::from(!within_clamp(p.y, q.y, epsilon_clamp))
                })
                .sum::<usize>()
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<StepReport>,
    /// Taken every `snapshot_every` completed steps and after the last one.
    pub snapshots: Vec<ShapeSnapshot>,
    pub clamp_violations: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }
}

/// Trains `net` for `config.max_iter` steps on cyclic minibatches of
/// `dataset`, calling `on_step` after every step.
pub fn train_network(
    net: Network,
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    snapshot_every: usize,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    if snapshot_every == 0 {
        return Err(Error::argument("snapshot interval must be at least 1"));
    }
    let mut trainer = Trainer::new(net, config.clone())?;
    let mut log = Vec::with_capacity(config.max_iter);
    let mut snapshots = shape_snapshots(trainer.network(), 0)?;
    let mut violations = 0;
    while !trainer.finished() {
        let (x, labels) = dataset.minibatch(trainer.iteration(), config.batch_size)?;
        let before = trainer.network().clone();
        let report = trainer.step(&x, &labels)?;
        violations += clamp_violations(&before, trainer.network(), config.epsilon_clamp);
        on_step(&report);
        log.push(report);
        let done = trainer.iteration();
        if done % snapshot_every == 0 || trainer.finished() {
            snapshots.extend(shape_snapshots(trainer.network(), done)?);
        }
    }
    Ok(TrainOutcome {
        network: trainer.into_network(),
        log,
        snapshots,
        clamp_violations: violations,
    })
}

/// [`toy_network`] followed by [`train_network`].
pub fn train_toy(
    arch: Arch,
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    snapshot_every: usize,
    on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    let net = toy_network(arch, dataset, config)?;
    train_network(net, config, dataset, snapshot_every, on_step)
}

/// Writes the CSV log of a run to `out` while training.
pub fn train_logged(
    arch: Arch,
    config: &TrainConfig,
    dataset: &SyntheticDataset,
    snapshot_every: usize,
    out: &mut impl Write,
) -> Result<TrainOutcome> {
    writeln!(out, "{LOG_HEADER}")?;
    let mut io_err = None;
    let outcome = train_toy(arch, config, dataset, snapshot_every, |r| {
        if io_err.is_none() {
            io_err = writeln!(out, "{}", log_line(r)).err();
        }
    })?;
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(outcome),
    }
}

/// Pixel accuracy over the whole dataset, labels aligned to the output window.
pub fn evaluate(net: &mut Network, dataset: &SyntheticDataset) -> Result<f64> {
    let scores = net.forward(&dataset.images)?;
    let (offset, scale) = net.output_alignment();
    let truth = dataset.labels.aligned(offset, scale, scores.height(), scores.width())?;
    Ok(pixel_accuracy(&argmax_classes(&scores), &truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::synth::{generate, SynthParams};

    fn tiny() -> SyntheticDataset {
        generate(&SynthParams {
            size: 12,
            count: 4,
            strokes: 2,
            length: 5,
            noise: 0.1,
            seed: 4,
            ..SynthParams::default()
        })
        .unwrap()
    }

    fn config(max_iter: usize) -> TrainConfig {
        TrainConfig {
            max_iter,
            batch_size: 2,
            lr_weights: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn log_has_one_line_per_step() {
        let mut buf = Vec::new();
        let out = train_logged(Arch::Irregular, &config(3), &tiny(), 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
        assert_eq!(out.log.len(), 3);
        // iterations 0, 2 and the final 3, two conv layers each
        let iters: Vec<usize> = out.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![0, 0, 2, 2, 3, 3]);
        assert_eq!(out.clamp_violations, 0);
    }

    #[test]
    fn regular_snapshots_stay_on_the_grid() {
        let out = train_toy(Arch::Regular, &config(2), &tiny(), 1, |_| {}).unwrap();
        let grid = PositionSet::init(3, 3, 1, 0.0).unwrap();
        assert_eq!(out.snapshots[0].positions, grid);
        for pair in out.snapshots.chunks(2) {
            assert_eq!(pair[0].positions, out.snapshots[0].positions);
            assert_eq!(pair[1].positions, out.snapshots[1].positions);
        }
    }

    #[test]
    fn accuracy_is_a_fraction() {
        let d = tiny();
        let mut net = toy_network(Arch::Irregular, &d, &config(1)).unwrap();
        let acc = evaluate(&mut net, &d).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn zero_snapshot_interval_is_rejected() {
        assert!(matches!(
            train_toy(Arch::Irregular, &config(1), &tiny(), 0, |_| {}),
            Err(Error::Argument(_))
        ));
    }
}
