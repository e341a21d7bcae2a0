//! Per-tap position trajectories from model files or snapshot streams.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::model_file::{ModelFile, MODEL_MAGIC};
use crate::cli::train::shape_snapshots;
use crate::error::{Error, Result};
use crate::optim::ShapeSnapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapTrajectory {
    pub tap: usize,
    /// `[iteration, p_x, p_y]` in iteration order.
    pub trajectory: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelShapes {
    pub channel: usize,
    pub taps: Vec<TapTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShapes {
    pub layer: usize,
    pub grid: [usize; 2],
    pub channels: Vec<ChannelShapes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDump {
    pub layers: Vec<LayerShapes>,
}

impl ShapeDump {
    /// Groups snapshots by layer; each tap's trajectory is sorted by iteration.
    pub fn from_snapshots(snapshots: &[ShapeSnapshot]) -> Result<Self> {
        let mut by_layer: BTreeMap<usize, Vec<&ShapeSnapshot>> = BTreeMap::new();
        for s in snapshots {
            by_layer.entry(s.layer).or_default().push(s);
        }
        let mut layers = Vec::with_capacity(by_layer.len());
        for (layer, mut snaps) in by_layer {
            snaps.sort_by_key(|s| s.iteration);
            let first = &snaps[0].positions;
            if snaps
                .iter()
                .any(|s| s.positions.grid() != first.grid() || s.positions.channels() != first.channels())
            {
                return Err(Error::format(format!("layer {layer}: snapshots disagree on layout")));
            }
            let channels = (0..first.channels())
                .map(|c| ChannelShapes {
                    channel: c,
                    taps: (0..first.taps())
                        .map(|t| TapTrajectory {
                            tap: t,
                            trajectory: snaps
                                .iter()
                                .map(|s| {
                                    let o = s.positions.get(c, t);
                                    [s.iteration as f64, o.x, o.y]
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect();
            layers.push(LayerShapes {
                layer,
                grid: [first.grid().0, first.grid().1],
                channels,
            });
        }
        Ok(ShapeDump { layers })
    }

    pub fn from_model(model: &ModelFile) -> Result<Self> {
        ShapeDump::from_snapshots(&shape_snapshots(&model.network, model.iteration as usize)?)
    }

    /// Reads a model file (detected by its magic) or a snapshot JSON array.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(MODEL_MAGIC) {
            return ShapeDump::from_model(&ModelFile::from_bytes(&bytes)?);
        }
        let snapshots: Vec<ShapeSnapshot> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(format!("neither a model file nor snapshot JSON: {e}")))?;
        ShapeDump::from_snapshots(&snapshots)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}
