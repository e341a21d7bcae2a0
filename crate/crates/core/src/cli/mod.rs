//! Building blocks of the `icnn` command-line tool.

pub mod gradcheck;
pub mod heatmap;
pub mod model_file;
pub mod shapes;
pub mod synth;
pub mod train;
