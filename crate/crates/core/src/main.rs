use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use icnn::cli::gradcheck::{run_gradcheck, GradcheckOptions};
use icnn::cli::heatmap::{heatmap, write_heatmap};
use icnn::cli::model_file::ModelFile;
use icnn::cli::shapes::ShapeDump;
use icnn::cli::synth::{generate, SynthParams, SyntheticDataset};
use icnn::cli::train::train_logged;
use icnn::{Arch, Error, Result, Tensor, TrainConfig};

#[derive(Parser)]
#[command(name = "icnn", version, about = "Convolutions with learnable tap positions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with finite differences on random layers.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Use a flat input image (position gradients must vanish).
        #[arg(long)]
        constant_image: bool,
    },
    /// Generate a stroke segmentation dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        strokes: usize,
        #[arg(long = "len", default_value_t = 7)]
        length: usize,
        /// Degrees, 0 is horizontal.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        angle: f64,
        #[arg(long, default_value_t = 1)]
        thickness: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shorter background-labeled segments per image.
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long = "distractor-len", default_value_t = 3)]
        distractor_length: usize,
    },
    /// Train the toy network; the CSV log goes to stdout.
    Train {
        /// key = value file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "irregular")]
        arch: Arch,
        /// Model file; snapshots go to MODEL.shapes.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        snapshot_every: usize,
    },
    /// Per-tap position trajectories from a model or snapshot file.
    DumpShapes {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input-gradient map of one output pixel.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        /// Image tensor file, or a dataset directory.
        #[arg(long)]
        image: PathBuf,
        /// Image index within the tensor or dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output pixel as ROW,COL.
        #[arg(long, value_parser = parse_pixel)]
        pixel: (usize, usize),
        #[arg(long = "class")]
        class: usize,
        /// Writes PREFIX.csv and PREFIX.pgm.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn snapshot_path(model: &PathBuf) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".shapes.json");
    PathBuf::from(s)
}

fn load_image(path: &PathBuf, index: usize) -> Result<Tensor> {
    let all = if path.is_dir() {
        SyntheticDataset::read(path)?.images
    } else {
        Tensor::from_bytes(&fs::read(path)?)?
    };
    let [batch, c, h, w] = all.shape();
    if index >= batch {
        return Err(Error::Argument(format!("image index {index} outside [0, {batch})")));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        data.extend_from_slice(all.plane(index, ch));
    }
    Tensor::from_vec([1, c, h, w], data)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck {
            seed,
            trials,
            constant_image,
        } => {
            let report = run_gradcheck(&GradcheckOptions {
                seed,
                trials,
                constant_image,
                ..GradcheckOptions::default()
            })?;
            print!("{report}");
            return Ok(report.passed());
        }
        Command::Synth {
            out,
            size,
            count,
            strokes,
            length,
            angle,
            thickness,
            noise,
            seed,
            distractors,
            distractor_length,
        } => {
            let params = SynthParams {
                size,
                count,
                strokes,
                length,
                angle_deg: angle,
                thickness,
                noise,
                seed,
                distractors,
                distractor_length,
            };
            generate(&params)?.write(&out)?;
        }
        Command::Train {
            config,
            data,
            arch,
            out,
            snapshot_every,
        } => {
            let config = match config {
                Some(p) => TrainConfig::from_file(p)?,
                None => TrainConfig::default(),
            };
            config.validate()?;
            let dataset = SyntheticDataset::read(&data)?;
            let stdout = io::stdout();
            let outcome = train_logged(arch, &config, &dataset, snapshot_every, &mut stdout.lock())?;
            ModelFile::new(outcome.network, config.max_iter as u64).save(&out)?;
            let json = serde_json::to_string_pretty(&outcome.snapshots).expect("plain data serializes");
            fs::write(snapshot_path(&out), json)?;
        }
        Command::DumpShapes { input, out } => {
            fs::write(out, ShapeDump::load(input)?.to_json())?;
        }
        Command::Heatmap {
            model,
            image,
            index,
            pixel,
            class,
            out,
        } => {
            let mut net = ModelFile::load(model)?.network;
            let img = load_image(&image, index)?;
            write_heatmap(&heatmap(&mut net, &img, pixel, class)?, out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e}");
            ExitCode::from(2)
        }
    }
}
