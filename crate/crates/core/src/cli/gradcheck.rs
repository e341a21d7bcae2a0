//! Randomized comparison of the analytic irregular-convolution gradients
//! against central finite differences of the brute-force reference.

use std::fmt;

use crate::error::{Error, Result};
use crate::irrconv::{self, init_positions, IrregularKernel, Offset, PositionSet};
use crate::oracle::{self, finite_diff_grad, naive_irregular_conv};
use crate::tensor::{Rng, Tensor};

/// Minimum distance of every tap coordinate from the nearest integer.
pub const MIN_INTEGER_DISTANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    /// Flat input image, with the loss restricted to fully in-bounds taps.
    pub constant_image: bool,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            trials: 50,
            constant_image: false,
            step: oracle::FD_STEP,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub components: usize,
    /// Largest absolute value seen on the analytic path.
    pub max_abs_analytic: f64,
    /// Largest absolute value seen on the finite-difference path.
    pub max_abs_numeric: f64,
}

impl ClassResult {
    fn new(name: &'static str) -> Self {
        ClassResult {
            name,
            max_rel_error: 0.0,
            components: 0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        }
    }

    fn absorb(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.max_rel_error = self.max_rel_error.max(oracle::max_relative_error(analytic, numeric));
        self.components += analytic.len();
        let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        self.max_abs_analytic = self.max_abs_analytic.max(amax(analytic));
        self.max_abs_numeric = self.max_abs_numeric.max(amax(numeric));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    pub tolerance: f64,
    pub weights: ClassResult,
    pub input: ClassResult,
    pub positions: ClassResult,
}

impl GradcheckReport {
    pub fn classes(&self) -> [&ClassResult; 3] {
        [&self.weights, &self.input, &self.positions]
    }

    pub fn passed(&self) -> bool {
        self.classes().iter().all(|c| c.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.classes() {
            writeln!(
                f,
                "{:<9} {} max_rel_err={:.3e} components={} (tolerance {:.0e}, {} trials)",
                c.name,
                if c.max_rel_error < self.tolerance { "PASS" } else { "FAIL" },
                c.max_rel_error,
                c.components,
                self.tolerance,
                self.trials
            )?;
        }
        Ok(())
    }
}

fn far_from_integer(v: f64) -> bool {
    (v - v.round()).abs() >= MIN_INTEGER_DISTANCE
}

/// Uniform in `[-spread, spread)`, redrawn until at least
/// [`MIN_INTEGER_DISTANCE`] from an integer once added to `base`.
fn jitter(rng: &mut Rng, base: f64, spread: f64) -> f64 {
    loop {
        let v = base + (2.0 * rng.uniform() - 1.0) * spread;
        if far_from_integer(v) {
            return v;
        }
    }
}

struct Trial {
    input: Tensor,
    kernel: IrregularKernel,
    loss_weights: Tensor,
}

fn random_trial(rng: &mut Rng, constant_image: bool) -> Result<Trial> {
    let batch = 1 + rng.below(2);
    let c_in = 1 + rng.below(3);
    let c_out = 1 + rng.below(3);
    let grid = (1 + rng.below(3), 1 + rng.below(3));
    let stride = (1 + rng.below(2), 1 + rng.below(2));
    let (h, w, spread) = if constant_image {
        (8, 8, 0.45)
    } else {
        (grid.0 + rng.below(9 - grid.0), grid.1 + rng.below(9 - grid.1), 1.5)
    };
    let base = init_positions(grid.0, grid.1, c_in, 0.0)?;
    let offsets = base
        .offsets()
        .iter()
        .map(|o| Offset::new(jitter(rng, o.x, spread), jitter(rng, o.y, spread)))
        .collect();
    let positions = PositionSet::new(grid, c_in, offsets)?;
    let weights = Tensor::randn([c_out, c_in, 1, grid.0 * grid.1], rng, 1.0)?.into_vec();
    let kernel = IrregularKernel::new(c_out, weights, positions, stride)?;
    let input = if constant_image {
        Tensor::from_vec([batch, c_in, h, w], vec![1.5; batch * c_in * h * w])?
    } else {
        Tensor::randn([batch, c_in, h, w], rng, 1.0)?
    };
    let out_shape = irrconv::forward(&input, &kernel)?.shape();
    let mut loss_weights = Tensor::randn(out_shape, rng, 1.0)?;
    if constant_image {
        mask_border_locations(&mut loss_weights, &kernel, h, w);
    }
    Ok(Trial {
        input,
        kernel,
        loss_weights,
    })
}

/// Zeroes loss weights at output locations where any tap touches padding.
fn mask_border_locations(g: &mut Tensor, kernel: &IrregularKernel, h: usize, w: usize) {
    let [batch, c_out, out_h, out_w] = g.shape();
    let center = irrconv::grid_center(kernel.positions().grid());
    let (sr, sc) = kernel.stride();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let inside = kernel.positions().offsets().iter().all(|o| {
                let r = (oy * sr + center.0) as f64 + o.x;
                let c = (ox * sc + center.1) as f64 + o.y;
                r.floor() >= 0.0 && r.floor() + 1.0 < h as f64 && c.floor() >= 0.0 && c.floor() + 1.0 < w as f64
            });
            if !inside {
                for b in 0..batch {
                    for co in 0..c_out {
                        g.set(b, co, oy, ox, 0.0);
                    }
                }
            }
        }
    }
}

fn weighted_sum(out: &Tensor, g: &Tensor) -> f64 {
    out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

fn pairs(offsets: &[f64]) -> Vec<(f64, f64)> {
    offsets.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Gradients of `sum(g * conv(I; W, P))` from the analytic backward pass and
/// from finite differences of the reference convolution, as
/// `[(analytic, numeric); 3]` for weights, input and positions.
fn compare(trial: &Trial, step: f64) -> Result<[(Vec<f64>, Vec<f64>); 3]> {
    let Trial {
        input,
        kernel,
        loss_weights: g,
    } = trial;
    let (_, patches) = irrconv::forward_with_patches(input, kernel)?;
    let analytic = irrconv::backward(g, kernel, input, &patches)?;

    let c_out = kernel.c_out();
    let grid = kernel.positions().grid();
    let stride = kernel.stride();
    let flat_positions: Vec<f64> = kernel.positions().offsets().iter().flat_map(|o| [o.x, o.y]).collect();
    let offsets = pairs(&flat_positions);
    let reference = |inp: &Tensor, w: &[f64], p: &[(f64, f64)]| {
        naive_irregular_conv(inp, w, p, c_out, grid, stride)
            .map(|out| weighted_sum(&out, g))
            .unwrap_or(f64::NAN)
    };

    let fd_w = finite_diff_grad(&|w: &[f64]| reference(input, w, &offsets), kernel.weights(), step)?;
    let fd_i = finite_diff_grad(
        &|x: &[f64]| {
            let t = Tensor::from_vec(input.shape(), x.to_vec()).expect("same shape");
            reference(&t, kernel.weights(), &offsets)
        },
        input.data(),
        step,
    )?;
    let fd_p = finite_diff_grad(
        &|p: &[f64]| reference(input, kernel.weights(), &pairs(p)),
        &flat_positions,
        step,
    )?;
    let analytic_p = analytic.positions.iter().flat_map(|o| [o.x, o.y]).collect();
    Ok([
        (analytic.weights, fd_w),
        (analytic.input.into_vec(), fd_i),
        (analytic_p, fd_p),
    ])
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(Error::argument("trials must be at least 1"));
    }
    let mut rng = Rng::new(opts.seed);
    let mut report = GradcheckReport {
        trials: opts.trials,
        tolerance: opts.tolerance,
        weights: ClassResult::new("weights"),
        input: ClassResult::new("input"),
        positions: ClassResult::new("positions"),
    };
    for _ in 0..opts.trials {
        let trial = random_trial(&mut rng, opts.constant_image)?;
        let [w, i, p] = compare(&trial, opts.step)?;
        report.weights.absorb(&w.0, &w.1);
        report.input.absorb(&i.0, &i.1);
        report.positions.absorb(&p.0, &p.1);
    }
    Ok(report)
}
