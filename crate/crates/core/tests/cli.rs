use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use icnn::cli::model_file::ModelFile;
use icnn::cli::shapes::ShapeDump;
use icnn::nn::{Layer, RegularKernel};
use icnn::optim::ShapeSnapshot;
use icnn::{Network, PositionSet};

fn icnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icnn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = icnn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    ok(&["synth", "--out", s(dir), "--size", "14", "--count", "4", "--strokes", "2", "--len", "9", "--noise", "0.2", "--seed", seed]);
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("train.cfg");
    fs::write(&p, body).unwrap();
    s(&p).to_owned()
}

#[test]
fn gradcheck_passes_and_rejects_zero_trials() {
    let out = ok(&["gradcheck", "--seed", "4", "--trials", "10"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.matches("PASS").count(), 3, "{text}");
    let bad = icnn(&["gradcheck", "--trials", "0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("argument"));
}

#[test]
fn synth_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    synth(&a, "7");
    synth(&b, "7");
    synth(&c, "8");
    for f in ["images.ict", "labels.ict", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("images.ict")).unwrap(), fs::read(c.join("images.ict")).unwrap());
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("length = 9") && manifest.contains("seed = 7"));
}

#[test]
fn synth_into_unwritable_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, b"x").unwrap();
    let out = icnn(&["synth", "--out", s(&file.join("sub"))]);
    assert!(!out.status.success());
}

#[test]
fn train_logs_csv_and_writes_model_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");
    let cfg = write_config(dir.path(), "max_iter = 6\nbatch_size = 2\nlr_weights = 0.05\nlr_positions = 5\n");
    let model = dir.path().join("m.icnm");
    let out = ok(&["train", "--config", &cfg, "--data", s(&data), "--arch", "irregular", "--out", s(&model), "--snapshot-every", "3"]);
    let log = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iteration,loss,lr_weights,lr_positions");
    assert_eq!(lines.len(), 7);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert_eq!(first[2], 0.05);
    assert_eq!(first[3], 5.0);

    let m = ModelFile::load(&model).unwrap();
    assert_eq!(m.iteration, 6);
    let snaps: Vec<ShapeSnapshot> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.icnm.shapes.json")).unwrap()).unwrap();
    let iters: Vec<usize> = snaps.iter().map(|s| s.iteration).collect();
    assert_eq!(iters, vec![0, 0, 3, 3, 6, 6]);
    let init = PositionSet::init(3, 3, 1, 0.05).unwrap();
    assert_eq!(snaps[0].positions, init);

    // same flags, same bytes
    let model2 = dir.path().join("m2.icnm");
    let out2 = ok(&["train", "--config", &cfg, "--data", s(&data), "--arch", "irregular", "--out", s(&model2), "--snapshot-every", "3"]);
    assert_eq!(out2.stdout, log.as_bytes());
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model2).unwrap());
}

#[test]
fn train_with_zero_rates_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2");
    let frozen = write_config(dir.path(), "max_iter = 3\nlr_weights = 0\nlr_positions = 0\n");
    let a = dir.path().join("a.icnm");
    ok(&["train", "--config", &frozen, "--data", s(&data), "--out", s(&a), "--snapshot-every", "1"]);
    let zero_iter = write_config(dir.path(), "max_iter = 1\nlr_weights = 0\nlr_positions = 0\n");
    let b = dir.path().join("b.icnm");
    ok(&["train", "--config", &zero_iter, "--data", s(&data), "--out", s(&b), "--snapshot-every", "1"]);
    let (ma, mb) = (ModelFile::load(&a).unwrap(), ModelFile::load(&b).unwrap());
    assert_eq!(ma.network.layers(), mb.network.layers());
}

#[test]
fn train_rejects_bad_config_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "3");
    let cfg = write_config(dir.path(), "poly_power = -1\n");
    let out = icnn(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&dir.path().join("m"))]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn regular_training_keeps_the_grid_in_every_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "4");
    let cfg = write_config(dir.path(), "max_iter = 4\nlr_weights = 0.05\n");
    let model = dir.path().join("r.icnm");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--arch", "regular", "--out", s(&model), "--snapshot-every", "1"]);
    let json = dir.path().join("r.json");
    ok(&["dump-shapes", "--in", s(&dir.path().join("r.icnm.shapes.json")), "--out", s(&json)]);
    let dump: ShapeDump = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(dump.layers.len(), 2);
    for layer in &dump.layers {
        for ch in &layer.channels {
            for tap in &ch.taps {
                assert_eq!(tap.trajectory.len(), 5);
                let (x, y) = (tap.trajectory[0][1], tap.trajectory[0][2]);
                assert_eq!((x.fract(), y.fract()), (0.0, 0.0));
                assert!(tap.trajectory.iter().all(|p| p[1] == x && p[2] == y));
            }
        }
    }
}

#[test]
fn dump_shapes_of_fresh_and_trained_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "5");
    let cfg = write_config(dir.path(), "max_iter = 1\nlr_weights = 0\nlr_positions = 0\n");
    let fresh = dir.path().join("f.icnm");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&fresh)]);
    let json = dir.path().join("f.json");
    ok(&["dump-shapes", "--in", s(&fresh), "--out", s(&json)]);
    let dump: ShapeDump = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let init = PositionSet::init(3, 3, 1, 0.05).unwrap();
    let taps = &dump.layers[0].channels[0].taps;
    assert_eq!(taps.len(), 9);
    for (t, o) in taps.iter().zip(init.offsets()) {
        assert_eq!(t.trajectory, vec![[1.0, o.x, o.y]]);
    }

    let cfg = write_config(dir.path(), "max_iter = 5\nlr_weights = 0.05\nlr_positions = 50\n");
    let trained = dir.path().join("t.icnm");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&trained), "--snapshot-every", "5"]);
    let json = dir.path().join("t.json");
    ok(&["dump-shapes", "--in", s(&dir.path().join("t.icnm.shapes.json")), "--out", s(&json)]);
    let dump: ShapeDump = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let moved = dump.layers.iter().flat_map(|l| &l.channels).flat_map(|c| &c.taps).any(|t| {
        let (a, b) = (t.trajectory[0], t.trajectory[t.trajectory.len() - 1]);
        a[1] != b[1] || a[2] != b[2]
    });
    assert!(moved);

    let bad = dir.path().join("bad");
    fs::write(&bad, b"ICNM\x01\x00").unwrap();
    let out = icnn(&["dump-shapes", "--in", s(&bad), "--out", s(&json)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}

#[test]
fn heatmap_of_identity_model_marks_only_the_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "6");
    let net = Network::new(vec![Layer::Regular(RegularKernel::new(1, 1, (1, 1), (1, 1), vec![1.0]).unwrap())]).unwrap();
    let model = dir.path().join("id.icnm");
    ModelFile::new(net, 0).save(&model).unwrap();
    let prefix = dir.path().join("hm");
    ok(&["heatmap", "--model", s(&model), "--image", s(&data), "--pixel", "3,5", "--class", "0", "--out", s(&prefix)]);
    let csv = fs::read_to_string(dir.path().join("hm.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!((rows.len(), rows[0].len()), (14, 14));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert_eq!(v, if (r, c) == (3, 5) { 1.0 } else { 0.0 });
        }
    }
    let pgm = fs::read(dir.path().join("hm.pgm")).unwrap();
    let header = b"P5\n14 14\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 14 * 14);
    assert_eq!(pgm[header.len() + 3 * 14 + 5], 255);
    assert_eq!(pgm.iter().skip(header.len()).filter(|&&b| b != 0).count(), 1);

    let out = icnn(&["heatmap", "--model", s(&model), "--image", s(&data), "--pixel", "14,0", "--class", "0", "--out", s(&prefix)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("argument"));
}

#[test]
fn heatmap_of_zero_weight_model_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "6");
    let cfg = write_config(dir.path(), "max_iter = 1\n");
    let model = dir.path().join("z.icnm");
    ok(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&model)]);
    let mut m = ModelFile::load(&model).unwrap();
    for layer in m.network.layers_mut() {
        if let Some(w) = layer.weights_mut() {
            w.fill(0.0);
        }
    }
    m.save(&model).unwrap();
    let prefix = dir.path().join("z");
    ok(&["heatmap", "--model", s(&model), "--image", s(&data.join("images.ict")), "--index", "1", "--pixel", "4,4", "--class", "1", "--out", s(&prefix)]);
    let csv = fs::read_to_string(dir.path().join("z.csv")).unwrap();
    assert!(csv.split([',', '\n']).filter(|v| !v.is_empty()).all(|v| v.parse::<f64>().unwrap() == 0.0));
}
