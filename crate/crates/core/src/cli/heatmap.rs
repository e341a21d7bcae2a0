//! Single-pixel input-gradient maps: backpropagate a one-hot output gradient
//! and take the channel-summed magnitude at every input pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

/// `|d out[class, row, col] / d input|` summed over channels, one
/// `(height, width)` map per image.
pub fn heatmap(net: &mut Network, image: &Tensor, pixel: (usize, usize), class: usize) -> Result<Tensor> {
    let scores = net.forward(image)?;
    let [batch, classes, h, w] = scores.shape();
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::argument(format!(
            "pixel ({}, {}) outside the {h}x{w} output",
            pixel.0, pixel.1
        )));
    }
    if class >= classes {
        return Err(Error::argument(format!("class {class} outside [0, {classes})")));
    }
    let mut grad_out = Tensor::zeros(scores.shape())?;
    for b in 0..batch {
        grad_out.set(b, class, pixel.0, pixel.1, 1.0);
    }
    let grad_in = net.backward(&grad_out)?.input;
    let [_, channels, ih, iw] = grad_in.shape();
    let mut map = Tensor::zeros([batch, 1, ih, iw])?;
    for b in 0..batch {
        for c in 0..channels {
            for (m, g) in map.data_mut()[b * ih * iw..(b + 1) * ih * iw]
                .iter_mut()
                .zip(grad_in.plane(b, c))
            {
                *m += g.abs();
            }
        }
    }
    Ok(map)
}

/// One row of comma-separated raw values per image row.
pub fn map_csv(map: &[f64], width: usize) -> String {
    let mut s = String::new();
    for row in map.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Binary PGM scaled so the map maximum is 255; an all-zero map stays black.
pub fn map_pgm(map: &[f64], width: usize, height: usize) -> Vec<u8> {
    let max = map.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Writes `PREFIX.csv` and `PREFIX.pgm` for the first image of `map`.
pub fn write_heatmap(map: &Tensor, prefix: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let (h, w) = (map.height(), map.width());
    let first = &map.data()[..h * w];
    let prefix = prefix.as_ref().as_os_str().to_owned();
    let with = |ext: &str| {
        let mut p = prefix.clone();
        p.push(ext);
        PathBuf::from(p)
    };
    let (csv, pgm) = (with(".csv"), with(".pgm"));
    fs::write(&csv, map_csv(first, w))?;
    fs::write(&pgm, map_pgm(first, w, h))?;
    Ok((csv, pgm))
}
