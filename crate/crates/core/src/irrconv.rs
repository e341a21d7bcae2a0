//! Irregular convolution: kernels whose taps sit at continuous, learnable
//! offsets from the kernel center and read the input through bilinear
//! interpolation.
//!
//! Coordinates follow the (row, column) convention: an offset's `x` is the
//! row (vertical) displacement and `y` the column (horizontal) displacement.
//! Each input channel owns one set of tap offsets, shared by every output
//! channel and every output location.
//!
//! The forward pass materializes an [`InterpolatedPatchMatrix`] (an
//! interpolated im2col) and multiplies it with the weight matrix. The patch
//! matrix keeps the interpolation cell of every tap so the three backward
//! passes use exactly the neighbors the forward pass read.
//!
//! Sampling outside the input contributes zero to both values and gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tap offset relative to the kernel center, in fractional pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offset {
    /// Row displacement.
    pub x: f64,
    /// Column displacement.
    pub y: f64,
}

impl Offset {
    pub fn new(x: f64, y: f64) -> Self {
        Offset { x, y }
    }
}

/// Tap offsets indexed `[channel][tap]`, laid out for a nominal grid of
/// `rows x cols` taps per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSet {
    grid: (usize, usize),
    channels: usize,
    offsets: Vec<Offset>,
}

/// Integer index of the kernel center inside a nominal grid.
pub fn grid_center(grid: (usize, usize)) -> (usize, usize) {
    ((grid.0 - 1) / 2, (grid.1 - 1) / 2)
}

impl PositionSet {
    pub fn new(grid: (usize, usize), channels: usize, offsets: Vec<Offset>) -> Result<Self> {
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::argument(format!("grid {grid:?} must be at least 1x1")));
        }
        if offsets.len() != channels * grid.0 * grid.1 {
            return Err(Error::shape(format!(
                "{} offsets for {} channels of a {}x{} grid",
                offsets.len(),
                channels,
                grid.0,
                grid.1
            )));
        }
        if offsets.iter().any(|o| !o.x.is_finite() || !o.y.is_finite()) {
            return Err(Error::argument("tap offsets must be finite"));
        }
        Ok(PositionSet {
            grid,
            channels,
            offsets,
        })
    }

    /// Centered integer grid shifted by `epsilon` on both axes, identical for
    /// every channel.
    pub fn init(grid_rows: usize, grid_cols: usize, channels: usize, epsilon: f64) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 {
            return Err(Error::argument("grid extents must be at least 1"));
        }
        if !(epsilon.abs() < 0.5) {
            return Err(Error::argument(format!(
                "|epsilon_init| must be below 0.5, got {epsilon}"
            )));
        }
        let (cr, cc) = grid_center((grid_rows, grid_cols));
        let one_channel: Vec<Offset> = (0..grid_rows)
            .flat_map(|r| {
                (0..grid_cols).map(move |c| {
                    Offset::new(
                        r as f64 - cr as f64 + epsilon,
                        c as f64 - cc as f64 + epsilon,
                    )
                })
            })
            .collect();
        let offsets = (0..channels).flat_map(|_| one_channel.iter().copied()).collect();
        PositionSet::new((grid_rows, grid_cols), channels, offsets)
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Taps per channel.
    pub fn taps(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn offsets_mut(&mut self) -> &mut [Offset] {
        &mut self.offsets
    }

    pub fn get(&self, channel: usize, tap: usize) -> Offset {
        self.offsets[channel * self.taps() + tap]
    }

    pub fn channel(&self, channel: usize) -> &[Offset] {
        let n = self.taps();
        &self.offsets[channel * n..(channel + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> PositionSet {
        PositionSet {
            grid: self.grid,
            channels: self.channels,
            offsets: self
                .offsets
                .iter()
                .map(|o| Offset::new(o.x * factor, o.y * factor))
                .collect(),
        }
    }
}

/// Shorthand for [`PositionSet::init`].
pub fn init_positions(
    grid_rows: usize,
    grid_cols: usize,
    channels: usize,
    epsilon_init: f64,
) -> Result<PositionSet> {
    PositionSet::init(grid_rows, grid_cols, channels, epsilon_init)
}

/// Weights `[c_out][c_in][tap]` plus one shared [`PositionSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularKernel {
    c_out: usize,
    weights: Vec<f64>,
    positions: PositionSet,
    stride: (usize, usize),
}

impl IrregularKernel {
    pub fn new(
        c_out: usize,
        weights: Vec<f64>,
        positions: PositionSet,
        stride: (usize, usize),
    ) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::argument(format!("stride {stride:?} must be positive")));
        }
        let expected = c_out * positions.channels() * positions.taps();
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "{} weights, expected c_out {} x c_in {} x taps {} = {}",
                weights.len(),
                c_out,
                positions.channels(),
                positions.taps(),
                expected
            )));
        }
        Ok(IrregularKernel {
            c_out,
            weights,
            positions,
            stride,
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.positions.channels()
    }

    pub fn taps(&self) -> usize {
        self.positions.taps()
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn positions(&self) -> &PositionSet {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut PositionSet {
        &mut self.positions
    }

    pub fn set_positions(&mut self, positions: PositionSet) -> Result<()> {
        if positions.channels() != self.positions.channels()
            || positions.grid() != self.positions.grid()
        {
            return Err(Error::shape("replacement positions have a different layout"));
        }
        self.positions = positions;
        Ok(())
    }

    pub fn weight(&self, co: usize, ci: usize, tap: usize) -> f64 {
        self.weights[(co * self.c_in() + ci) * self.taps() + tap]
    }
}

/// Valid-convolution output extent along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input < kernel || stride == 0 {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// Interpolation cell of one tap, relative to the output location's origin.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    row: i64,
    col: i64,
    frac_r: f64,
    frac_c: f64,
}

impl Cell {
    fn new(center: (usize, usize), offset: Offset) -> Self {
        let fr = offset.x.floor();
        let fc = offset.y.floor();
        Cell {
            row: center.0 as i64 + fr as i64,
            col: center.1 as i64 + fc as i64,
            frac_r: offset.x - fr,
            frac_c: offset.y - fc,
        }
    }
}

/// One of the four bilinear neighbors of a sampling coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: i64,
    pub col: i64,
    /// Row-axis factor `1 - |r - r_I|`.
    pub weight_r: f64,
    /// Column-axis factor `1 - |c - c_I|`.
    pub weight_c: f64,
    /// Signed distance `r - r_I` along the row axis.
    pub delta_r: f64,
    /// Signed distance `c - c_I` along the column axis.
    pub delta_c: f64,
}

impl Neighbor {
    pub fn weight(&self) -> f64 {
        self.weight_r * self.weight_c
    }
}

/// Neighbors `(floor, floor + 1)` on each axis of an interpolation cell.
fn cell_neighbors(base_r: i64, base_c: i64, frac_r: f64, frac_c: f64) -> [Neighbor; 4] {
    let make = |dr: i64, dc: i64| {
        let delta_r = frac_r - dr as f64;
        let delta_c = frac_c - dc as f64;
        Neighbor {
            row: base_r + dr,
            col: base_c + dc,
            weight_r: 1.0 - delta_r.abs(),
            weight_c: 1.0 - delta_c.abs(),
            delta_r,
            delta_c,
        }
    };
    [make(0, 0), make(0, 1), make(1, 0), make(1, 1)]
}

#[inline]
fn in_bounds(row: i64, col: i64, height: usize, width: usize) -> bool {
    row >= 0 && col >= 0 && (row as usize) < height && (col as usize) < width
}

/// Derivative of `1 - |u|` with respect to the sampling coordinate, where
/// `u` is the signed distance from the neighbor. Zero at `u == 0`.
#[inline]
fn slope(delta: f64) -> f64 {
    if delta > 0.0 {
        -1.0
    } else if delta < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Bilinear sample of one plane at absolute coordinates `(x, y)` (row,
/// column). Neighbors outside the plane contribute zero.
pub fn interpolate(input: &Tensor, x: f64, y: f64, batch: usize, channel: usize) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::argument(format!("non-finite sampling coordinate ({x}, {y})")));
    }
    if batch >= input.batch() || channel >= input.channels() {
        return Err(Error::argument(format!(
            "batch {batch} / channel {channel} outside tensor shape {:?}",
            input.shape()
        )));
    }
    let (fx, fy) = (x.floor(), y.floor());
    let plane = input.plane(batch, channel);
    Ok(sample_plane(
        plane,
        input.height(),
        input.width(),
        fx as i64,
        fy as i64,
        x - fx,
        y - fy,
    ))
}

#[inline]
fn sample_plane(
    plane: &[f64],
    height: usize,
    width: usize,
    base_r: i64,
    base_c: i64,
    frac_r: f64,
    frac_c: f64,
) -> f64 {
    cell_neighbors(base_r, base_c, frac_r, frac_c)
        .iter()
        .filter(|n| in_bounds(n.row, n.col, height, width))
        .map(|n| n.weight() * plane[n.row as usize * width + n.col as usize])
        .sum()
}

/// Interpolated im2col: one row per (batch, output row, output column), one
/// column per (input channel, tap).
#[derive(Debug, Clone)]
pub struct InterpolatedPatchMatrix {
    input_shape: [usize; 4],
    out_h: usize,
    out_w: usize,
    taps: usize,
    stride: (usize, usize),
    cells: Vec<Cell>,
    values: Vec<f64>,
}

impl InterpolatedPatchMatrix {
    pub fn rows(&self) -> usize {
        self.input_shape[0] * self.out_h * self.out_w
    }

    pub fn cols(&self) -> usize {
        self.cells.len()
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.cols();
        &self.values[row * n..(row + 1) * n]
    }

    /// Splits a row index into (batch, output row, output column).
    pub fn row_location(&self, row: usize) -> (usize, usize, usize) {
        let per_item = self.out_h * self.out_w;
        (row / per_item, (row % per_item) / self.out_w, row % self.out_w)
    }

    /// The four cached neighbors (absolute input coordinates) of the sample
    /// at `(row, col)`, including out-of-bounds ones.
    pub fn neighbors(&self, row: usize, col: usize) -> [Neighbor; 4] {
        let (_, oh, ow) = self.row_location(row);
        let cell = self.cells[col];
        cell_neighbors(
            (oh * self.stride.0) as i64 + cell.row,
            (ow * self.stride.1) as i64 + cell.col,
            cell.frac_r,
            cell.frac_c,
        )
    }
}

pub fn im2col_irregular(
    input: &Tensor,
    positions: &PositionSet,
    stride: (usize, usize),
) -> Result<InterpolatedPatchMatrix> {
    let [batch, channels, height, width] = input.shape();
    if height == 0 || width == 0 {
        return Err(Error::shape("input spatial extents must be at least 1"));
    }
    if channels != positions.channels() {
        return Err(Error::shape(format!(
            "input has {channels} channels, positions have {}",
            positions.channels()
        )));
    }
    let grid = positions.grid();
    let (out_h, out_w) = match (
        output_extent(height, grid.0, stride.0),
        output_extent(width, grid.1, stride.1),
    ) {
        (Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Error::shape(format!(
                "{height}x{width} input too small for a {}x{} grid with stride {stride:?}",
                grid.0, grid.1
            )))
        }
    };
    let center = grid_center(grid);
    let cells: Vec<Cell> = positions
        .offsets()
        .iter()
        .map(|&o| Cell::new(center, o))
        .collect();
    let taps = positions.taps();
    let cols = cells.len();
    let rows = batch * out_h * out_w;
    let mut values = vec![0.0; rows * cols];
    for b in 0..batch {
        for oh in 0..out_h {
            for ow in 0..out_w {
                let row = (b * out_h + oh) * out_w + ow;
                let origin = ((oh * stride.0) as i64, (ow * stride.1) as i64);
                let dst = &mut values[row * cols..(row + 1) * cols];
                for (col, cell) in cells.iter().enumerate() {
                    let plane = input.plane(b, col / taps);
                    dst[col] = sample_plane(
                        plane,
                        height,
                        width,
                        origin.0 + cell.row,
                        origin.1 + cell.col,
                        cell.frac_r,
                        cell.frac_c,
                    );
                }
            }
        }
    }
    Ok(InterpolatedPatchMatrix {
        input_shape: input.shape(),
        out_h,
        out_w,
        taps,
        stride,
        cells,
        values,
    })
}

/// Multiplies a patch matrix with a `[c_out][cols]` weight matrix, producing
/// a `(batch, c_out, out_h, out_w)` tensor.
pub fn patches_times_weights(
    values: &[f64],
    cols: usize,
    weights: &[f64],
    c_out: usize,
    out_shape: [usize; 4],
) -> Tensor {
    let [batch, _, out_h, out_w] = out_shape;
    let per_item = out_h * out_w;
    let mut out = vec![0.0; batch * c_out * per_item];
    for b in 0..batch {
        for loc in 0..per_item {
            let row = b * per_item + loc;
            let patch = &values[row * cols..(row + 1) * cols];
            for co in 0..c_out {
                let w = &weights[co * cols..(co + 1) * cols];
                out[(b * c_out + co) * per_item + loc] = dot(patch, w);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("shape computed from extents")
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass that also returns the patch matrix for reuse in backward.
pub fn forward_with_patches(
    input: &Tensor,
    kernel: &IrregularKernel,
) -> Result<(Tensor, InterpolatedPatchMatrix)> {
    if input.channels() != kernel.c_in() {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.c_in()
        )));
    }
    let patches = im2col_irregular(input, kernel.positions(), kernel.stride())?;
    let (out_h, out_w) = patches.output_hw();
    let out = patches_times_weights(
        &patches.values,
        patches.cols(),
        kernel.weights(),
        kernel.c_out(),
        [input.batch(), kernel.c_out(), out_h, out_w],
    );
    Ok((out, patches))
}

pub fn forward(input: &Tensor, kernel: &IrregularKernel) -> Result<Tensor> {
    forward_with_patches(input, kernel).map(|(out, _)| out)
}

fn check_grad_out(grad_out: &Tensor, patches: &InterpolatedPatchMatrix) -> Result<usize> {
    let (out_h, out_w) = patches.output_hw();
    let [b, c, h, w] = grad_out.shape();
    if b != patches.input_shape[0] || h != out_h || w != out_w {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match forward output ({}, _, {}, {})",
            grad_out.shape(),
            patches.input_shape[0],
            out_h,
            out_w
        )));
    }
    Ok(c)
}

fn check_kernel(kernel: &IrregularKernel, patches: &InterpolatedPatchMatrix, c_out: usize) -> Result<()> {
    if kernel.c_out() != c_out
        || kernel.c_in() != patches.input_shape[1]
        || kernel.taps() != patches.taps
    {
        return Err(Error::shape(
            "kernel layout does not match the forward pass that produced the patches",
        ));
    }
    Ok(())
}

/// `dW[co][col] = sum over rows of grad_out[row, co] * patch[row, col]`.
pub fn backward_weights(grad_out: &Tensor, patches: &InterpolatedPatchMatrix) -> Result<Vec<f64>> {
    let c_out = check_grad_out(grad_out, patches)?;
    let (out_h, out_w) = patches.output_hw();
    Ok(weight_gradient(
        grad_out.data(),
        patches.input_shape[0],
        c_out,
        out_h * out_w,
        patches.values(),
        patches.cols(),
    ))
}

/// Shared by irregular and regular layers, which both store weights as
/// `[c_out][cols]` against a `(batch * locations) x cols` patch matrix.
pub(crate) fn weight_gradient(
    grad_out: &[f64],
    batch: usize,
    c_out: usize,
    locations: usize,
    values: &[f64],
    cols: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; c_out * cols];
    for b in 0..batch {
        for loc in 0..locations {
            let row = b * locations + loc;
            let patch = &values[row * cols..(row + 1) * cols];
            for co in 0..c_out {
                let g = grad_out[(b * c_out + co) * locations + loc];
                if g == 0.0 {
                    continue;
                }
                for (d, v) in dw[co * cols..(co + 1) * cols].iter_mut().zip(patch) {
                    *d += g * v;
                }
            }
        }
    }
    dw
}

/// Gradient with respect to the patch matrix:
/// `dPatch[row][col] = sum over co of grad_out[row, co] * W[co][col]`.
pub(crate) fn patch_gradient(
    grad_out: &[f64],
    batch: usize,
    c_out: usize,
    locations: usize,
    weights: &[f64],
    cols: usize,
) -> Vec<f64> {
    let mut dp = vec![0.0; batch * locations * cols];
    for b in 0..batch {
        for loc in 0..locations {
            let row = b * locations + loc;
            let dst = &mut dp[row * cols..(row + 1) * cols];
            for co in 0..c_out {
                let g = grad_out[(b * c_out + co) * locations + loc];
                if g == 0.0 {
                    continue;
                }
                for (d, w) in dst.iter_mut().zip(&weights[co * cols..(co + 1) * cols]) {
                    *d += g * w;
                }
            }
        }
    }
    dp
}

fn interpolated_gradient(
    grad_out: &Tensor,
    kernel: &IrregularKernel,
    patches: &InterpolatedPatchMatrix,
) -> Result<Vec<f64>> {
    let c_out = check_grad_out(grad_out, patches)?;
    check_kernel(kernel, patches, c_out)?;
    let (out_h, out_w) = patches.output_hw();
    Ok(patch_gradient(
        grad_out.data(),
        patches.input_shape[0],
        c_out,
        out_h * out_w,
        kernel.weights(),
        patches.cols(),
    ))
}

/// Scatters the interpolated-input gradient back onto the input through the
/// cached bilinear weights.
pub fn backward_input(
    grad_out: &Tensor,
    kernel: &IrregularKernel,
    patches: &InterpolatedPatchMatrix,
) -> Result<Tensor> {
    let d_patch = interpolated_gradient(grad_out, kernel, patches)?;
    Ok(scatter_input(&d_patch, patches))
}

fn scatter_input(d_patch: &[f64], patches: &InterpolatedPatchMatrix) -> Tensor {
    let [_, _, height, width] = patches.input_shape;
    let mut grad = Tensor::zeros(patches.input_shape).expect("shape of an existing tensor");
    let cols = patches.cols();
    for row in 0..patches.rows() {
        let (b, _, _) = patches.row_location(row);
        for col in 0..cols {
            let g = d_patch[row * cols + col];
            if g == 0.0 {
                continue;
            }
            let channel = col / patches.taps;
            for n in patches.neighbors(row, col) {
                if in_bounds(n.row, n.col, height, width) {
                    let i = grad.offset(b, channel, n.row as usize, n.col as usize);
                    grad.data_mut()[i] += n.weight() * g;
                }
            }
        }
    }
    grad
}

/// Position gradient per `[channel][tap]`, summed over the batch, every
/// output location and every output channel.
pub fn backward_positions(
    grad_out: &Tensor,
    kernel: &IrregularKernel,
    input: &Tensor,
    patches: &InterpolatedPatchMatrix,
) -> Result<Vec<Offset>> {
    if input.shape() != patches.input_shape {
        return Err(Error::shape(format!(
            "input shape {:?} differs from the forward input {:?}",
            input.shape(),
            patches.input_shape
        )));
    }
    let d_patch = interpolated_gradient(grad_out, kernel, patches)?;
    Ok(position_gradient(&d_patch, input, patches))
}

fn position_gradient(d_patch: &[f64], input: &Tensor, patches: &InterpolatedPatchMatrix) -> Vec<Offset> {
    let [_, _, height, width] = patches.input_shape;
    let cols = patches.cols();
    let mut grad = vec![Offset::default(); cols];
    for row in 0..patches.rows() {
        let (b, _, _) = patches.row_location(row);
        for (col, acc) in grad.iter_mut().enumerate() {
            let g = d_patch[row * cols + col];
            if g == 0.0 {
                continue;
            }
            let plane = input.plane(b, col / patches.taps);
            let n = patches.neighbors(row, col);
            let v = n.map(|n| {
                if in_bounds(n.row, n.col, height, width) {
                    plane[n.row as usize * width + n.col as usize]
                } else {
                    0.0
                }
            });
            // neighbors are ordered (r0,c0), (r0,c1), (r1,c0), (r1,c1); grouping
            // by pairs along the differentiated axis makes a flat image cancel
            // exactly
            let dx = n[0].weight_c * (slope(n[0].delta_r) * v[0] + slope(n[2].delta_r) * v[2])
                + n[1].weight_c * (slope(n[1].delta_r) * v[1] + slope(n[3].delta_r) * v[3]);
            let dy = n[0].weight_r * (slope(n[0].delta_c) * v[0] + slope(n[1].delta_c) * v[1])
                + n[2].weight_r * (slope(n[2].delta_c) * v[2] + slope(n[3].delta_c) * v[3]);
            acc.x += g * dx;
            acc.y += g * dy;
        }
    }
    grad
}

/// All three gradients of one irregular layer.
#[derive(Debug, Clone)]
pub struct KernelGradients {
    pub weights: Vec<f64>,
    pub positions: Vec<Offset>,
    pub input: Tensor,
}

/// Computes the weight, position and input gradients, sharing the
/// interpolated-input gradient between the latter two.
pub fn backward(
    grad_out: &Tensor,
    kernel: &IrregularKernel,
    input: &Tensor,
    patches: &InterpolatedPatchMatrix,
) -> Result<KernelGradients> {
    if input.shape() != patches.input_shape {
        return Err(Error::shape("input differs from the forward input"));
    }
    let weights = backward_weights(grad_out, patches)?;
    let d_patch = interpolated_gradient(grad_out, kernel, patches)?;
    Ok(KernelGradients {
        weights,
        positions: position_gradient(&d_patch, input, patches),
        input: scatter_input(&d_patch, patches),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn identity_kernel() -> IrregularKernel {
        let p = PositionSet::new((1, 1), 1, vec![Offset::new(0.0, 0.0)]).unwrap();
        IrregularKernel::new(1, vec![1.0], p, (1, 1)).unwrap()
    }

    #[test]
    fn init_three_by_three() {
        let eps = 0.05;
        let p = init_positions(3, 3, 2, eps).unwrap();
        assert_eq!(p.taps(), 9);
        let expected: Vec<Offset> = [-1.0, 0.0, 1.0]
            .iter()
            .flat_map(|&r| [-1.0, 0.0, 1.0].map(|c| Offset::new(r + eps, c + eps)))
            .collect();
        assert_eq!(p.channel(0), &expected[..]);
        assert_eq!(p.channel(1), &expected[..]);
    }

    #[test]
    fn init_single_tap_and_errors() {
        let p = init_positions(1, 1, 1, 0.05).unwrap();
        assert_eq!(p.offsets(), &[Offset::new(0.05, 0.05)]);
        let exact = init_positions(3, 3, 1, 0.0).unwrap();
        assert!(exact.offsets().iter().all(|o| o.x.fract() == 0.0 && o.y.fract() == 0.0));
        assert!(matches!(init_positions(3, 3, 1, 0.5), Err(Error::Argument(_))));
        assert!(matches!(init_positions(3, 3, 1, -0.7), Err(Error::Argument(_))));
        assert!(matches!(init_positions(0, 3, 1, 0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn interpolate_examples() {
        let input = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(interpolate(&input, 0.5, 0.5, 0, 0).unwrap(), 2.5);
        assert_eq!(interpolate(&input, 0.0, 0.0, 0, 0).unwrap(), 1.0);
        assert_eq!(interpolate(&input, 1.0, 1.0, 0, 0).unwrap(), 4.0);
        assert_eq!(interpolate(&input, -0.5, -0.5, 0, 0).unwrap(), 0.25);
        assert!(matches!(
            interpolate(&input, f64::NAN, 0.0, 0, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            interpolate(&input, 0.0, f64::INFINITY, 0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn bilinear_weights_partition_unity() {
        for &(fr, fc) in &[(0.0, 0.0), (0.3, 0.9), (0.999, 0.001), (0.5, 0.5)] {
            let s: f64 = cell_neighbors(0, 0, fr, fc).iter().map(Neighbor::weight).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn im2col_integer_grid_is_raw_patch() {
        let input = Tensor::randn([2, 2, 3, 3], &mut Rng::new(5), 1.0).unwrap();
        let p = init_positions(3, 3, 2, 0.0).unwrap();
        let m = im2col_irregular(&input, &p, (1, 1)).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 18));
        for b in 0..2 {
            let mut raw = Vec::new();
            for c in 0..2 {
                raw.extend_from_slice(input.plane(b, c));
            }
            assert_eq!(m.row(b), &raw[..]);
        }
    }

    #[test]
    fn im2col_near_center_copies_center_pixel() {
        let input = Tensor::randn([1, 2, 5, 6], &mut Rng::new(9), 1.0).unwrap();
        let tiny = 1e-12;
        let p = PositionSet::new((3, 3), 2, vec![Offset::new(tiny, tiny); 18]).unwrap();
        let m = im2col_irregular(&input, &p, (1, 1)).unwrap();
        let (oh, ow) = m.output_hw();
        for r in 0..oh {
            for c in 0..ow {
                let row = m.row(r * ow + c);
                for ch in 0..2 {
                    let center = input.get(0, ch, r + 1, c + 1);
                    for v in &row[ch * 9..(ch + 1) * 9] {
                        assert!((v - center).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn im2col_too_small_input() {
        let input = Tensor::zeros([1, 1, 2, 5]).unwrap();
        let p = init_positions(3, 3, 1, 0.05).unwrap();
        assert!(matches!(im2col_irregular(&input, &p, (1, 1)), Err(Error::Shape(_))));
        let empty = Tensor::zeros([1, 1, 0, 5]).unwrap();
        assert!(matches!(im2col_irregular(&empty, &p, (1, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn output_extent_honours_stride() {
        assert_eq!(output_extent(8, 3, 1), Some(6));
        assert_eq!(output_extent(8, 3, 2), Some(3));
        assert_eq!(output_extent(3, 3, 5), Some(1));
        assert_eq!(output_extent(2, 3, 1), None);
    }

    #[test]
    fn identity_kernel_forward_and_backward() {
        let input = Tensor::randn([2, 1, 4, 5], &mut Rng::new(1), 1.0).unwrap();
        let k = identity_kernel();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        assert_eq!(out, input);
        let g = Tensor::randn(out.shape(), &mut Rng::new(2), 1.0).unwrap();
        assert_eq!(backward_input(&g, &k, &patches).unwrap(), g);
    }

    #[test]
    fn zero_weights_and_zero_grads() {
        let mut rng = Rng::new(4);
        let input = Tensor::randn([1, 2, 6, 6], &mut rng, 1.0).unwrap();
        let p = init_positions(3, 3, 2, 0.1).unwrap();
        let k = IrregularKernel::new(3, vec![0.0; 54], p.clone(), (1, 1)).unwrap();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let w = Tensor::randn([1, 1, 1, 54], &mut rng, 1.0).unwrap().into_vec();
        let k = IrregularKernel::new(3, w, p, (1, 1)).unwrap();
        let zero = Tensor::zeros(out.shape()).unwrap();
        let grads = backward(&zero, &k, &input, &patches).unwrap();
        assert!(grads.weights.iter().all(|&v| v == 0.0));
        assert!(grads.positions.iter().all(|o| o.x == 0.0 && o.y == 0.0));
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_location_weight_gradient_is_patch_row() {
        let input = Tensor::randn([1, 2, 3, 3], &mut Rng::new(8), 1.0).unwrap();
        let p = init_positions(3, 3, 2, 0.2).unwrap();
        let k = IrregularKernel::new(1, vec![0.5; 18], p, (1, 1)).unwrap();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        let g = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(backward_weights(&g, &patches).unwrap(), patches.row(0));
    }

    #[test]
    fn constant_image_has_zero_position_gradient() {
        let input = Tensor::from_vec([1, 1, 7, 7], vec![3.0; 49]).unwrap();
        let p = init_positions(3, 3, 1, 0.17).unwrap();
        let k = IrregularKernel::new(2, (0..18).map(|i| i as f64 * 0.1).collect(), p, (1, 1)).unwrap();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        // only locations whose taps stay inside the image see a flat function
        let mut g = Tensor::zeros(out.shape()).unwrap();
        for co in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    g.set(0, co, r, c, 1.0 + r as f64);
                }
            }
        }
        let dp = backward_positions(&g, &k, &input, &patches).unwrap();
        assert!(dp.iter().all(|o| o.x == 0.0 && o.y == 0.0), "{dp:?}");
    }

    #[test]
    fn column_ramp_position_gradient() {
        // I(r, c) = c, one tap at a fractional offset, one output location
        let input = Tensor::from_vec([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = PositionSet::new((1, 1), 1, vec![Offset::new(0.0, 1.3)]).unwrap();
        let k = IrregularKernel::new(1, vec![1.0], p, (1, 3)).unwrap();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 2]);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let dp = backward_positions(&g, &k, &input, &patches).unwrap();
        assert!((dp[0].y - 1.0).abs() < 1e-15);
        assert_eq!(dp[0].x, 0.0);
    }

    #[test]
    fn integer_position_uses_zero_subgradient() {
        // at an integer row offset only the floor + 1 neighbor has a slope
        let input = Tensor::from_vec([1, 1, 3, 1], vec![1.0, 5.0, 2.0]).unwrap();
        let p = PositionSet::new((1, 1), 1, vec![Offset::new(1.0, 0.0)]).unwrap();
        let k = IrregularKernel::new(1, vec![1.0], p, (1, 1)).unwrap();
        let (out, patches) = forward_with_patches(&input, &k).unwrap();
        let g = Tensor::from_vec(out.shape(), vec![1.0, 0.0, 0.0]).unwrap();
        let dp = backward_positions(&g, &k, &input, &patches).unwrap();
        assert_eq!(dp[0].x, 2.0);
    }

    #[test]
    fn shape_errors() {
        let input = Tensor::zeros([1, 2, 5, 5]).unwrap();
        let k = identity_kernel();
        assert!(matches!(forward(&input, &k), Err(Error::Shape(_))));
        let input = Tensor::zeros([1, 1, 5, 5]).unwrap();
        let (_, patches) = forward_with_patches(&input, &k).unwrap();
        let bad = Tensor::zeros([1, 1, 4, 5]).unwrap();
        assert!(matches!(backward_weights(&bad, &patches), Err(Error::Shape(_))));
        assert!(matches!(backward_input(&bad, &k, &patches), Err(Error::Shape(_))));
        let g = Tensor::zeros([1, 1, 5, 5]).unwrap();
        assert!(matches!(
            backward_positions(&g, &k, &bad, &patches),
            Err(Error::Shape(_))
        ));
        assert!(IrregularKernel::new(2, vec![1.0], init_positions(1, 1, 1, 0.0).unwrap(), (1, 1)).is_err());
        assert!(IrregularKernel::new(1, vec![1.0], init_positions(1, 1, 1, 0.0).unwrap(), (0, 1)).is_err());
    }

    #[test]
    fn forward_is_linear() {
        let mut rng = Rng::new(11);
        let input = Tensor::randn([2, 2, 6, 7], &mut rng, 1.0).unwrap();
        let w = Tensor::randn([1, 1, 1, 3 * 18], &mut rng, 1.0).unwrap().into_vec();
        let p = init_positions(3, 3, 2, 0.23).unwrap();
        let k = IrregularKernel::new(3, w.clone(), p.clone(), (1, 2)).unwrap();
        let out = forward(&input, &k).unwrap();
        let k2 = IrregularKernel::new(3, w.iter().map(|v| 2.0 * v).collect(), p, (1, 2)).unwrap();
        assert_eq!(forward(&input, &k2).unwrap(), out.scale(2.0));
        assert_eq!(forward(&input.scale(2.0), &k).unwrap(), out.scale(2.0));
    }
}
