use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgan::checkpoint::load_checkpoint;
use lgan::geometry::orthonormality_penalty;

fn lgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgan")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const GAN_CONFIG: &str = "\
# tiny circle run
dataset = circle
n = 60
epochs = 3
batch_size = 16
generator_hidden = 8
discriminator_hidden = 8
coord_dim = 1
";

const SSL_CONFIG: &str = "\
dataset = moons
n = 30
noise = 0.1
epochs = 2
batch_size = 16
labels_per_class = 2
validation_size = 10
generator_hidden = 8
discriminator_hidden = 8
";

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Run { _dir: dir, root }
    }

    fn file(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.root.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train_gan(&self) -> PathBuf {
        let cfg = self.file("gan.cfg", GAN_CONFIG);
        let ckpt = self.path("gan.lgan");
        let o = lgan(&["train-gan", "--config", s(&cfg), "--out", s(&ckpt)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        ckpt
    }
}

#[test]
fn no_arguments_prints_usage() {
    let o = lgan(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(lgan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lgan(&["plot", "--in", "a", "--out", "b", "--bogus"]).status.code(), Some(1));
    assert_eq!(lgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_runtime_error() {
    let run = Run::new();
    let missing = run.path("nope.cfg");
    let o = lgan(&["train-gan", "--config", s(&missing), "--out", s(&run.path("x.lgan"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.cfg"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_reported_with_its_line() {
    let run = Run::new();
    let cfg = run.file("bad.cfg", "epochs = 1\nlearning_rate = 3\n");
    let o = lgan(&["train-gan", "--config", s(&cfg), "--out", s(&run.path("x.lgan"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn identical_runs_give_identical_logs_and_checkpoints() {
    let run = Run::new();
    let cfg = run.file("gan.cfg", GAN_CONFIG);
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let ckpt = run.path(&format!("{tag}.lgan"));
        let log = run.path(&format!("{tag}.csv"));
        let o = lgan(&["train-gan", "--config", s(&cfg), "--out", s(&ckpt), "--log", s(&log)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        outputs.push((std::fs::read(&log).unwrap(), std::fs::read(&ckpt).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let log = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn generate_walks_one_coordinate() {
    let run = Run::new();
    let ckpt = run.train_gan();
    let out = run.path("walk.csv");
    let o = lgan(&["generate", "--ckpt", s(&ckpt), "--point-index", "4", "--coord", "0", "--steps", "5", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,z,x0,x1");
    assert_eq!(lines.len(), 6);
    // The middle step is z = 0, which must reproduce the base point exactly.
    let points = load_checkpoint(&ckpt).unwrap().points.unwrap();
    let mid: Vec<f64> = lines[3].split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert_eq!(lines[3].split(',').nth(1), Some("0"));
    assert_eq!(mid, points.row(4));
}

#[test]
fn generate_rejects_out_of_range_coordinate() {
    let run = Run::new();
    let ckpt = run.train_gan();
    let o = lgan(&["generate", "--ckpt", s(&ckpt), "--point-index", "0", "--coord", "3", "--steps", "5", "--out", s(&run.path("w.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("0..=0"), "{}", stderr(&o));
    let o = lgan(&["generate", "--ckpt", s(&ckpt), "--point-index", "60", "--coord", "0", "--steps", "5", "--out", s(&run.path("w.csv"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("0..=59"), "{}", stderr(&o));
}

#[test]
fn tangents_gram_column_matches_recomputed_penalty() {
    let run = Run::new();
    let ckpt = run.train_gan();
    let out = run.path("tangents.csv");
    let o = lgan(&["tangents", "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bundle = load_checkpoint(&ckpt).unwrap();
    let g = bundle.generator.unwrap();
    let jacobians = g.jacobians(bundle.points.as_ref().unwrap()).unwrap();
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,gram_deviation,local_dimension,sv0"));
    let mut count = 0;
    for (line, j) in lines.zip(&jacobians) {
        let cells: Vec<&str> = line.split(',').collect();
        let gd: f64 = cells[1].parse().unwrap();
        assert!((gd * gd - orthonormality_penalty(j)).abs() < 1e-9);
        let dim: usize = cells[2].parse().unwrap();
        assert!(dim <= 1);
        count += 1;
    }
    assert_eq!(count, 60);
}

#[test]
fn eval_and_plot() {
    let run = Run::new();
    let ckpt = run.train_gan();
    let data = run.file("pts.csv", "0.6,0.8\n1,0\n0,-1\n");
    let out = run.path("eval.csv");
    let o = lgan(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("metric,value\npoints,3\nmean_locality,0\n"), "{text}");
    assert!(text.contains("mean_gram_deviation,"));

    let walk = run.path("walk.csv");
    lgan(&["generate", "--ckpt", s(&ckpt), "--point-index", "0", "--coord", "0", "--steps", "7", "--out", s(&walk)]);
    let svg = run.path("walk.svg");
    let o = lgan(&["plot", "--in", s(&walk), "--out", s(&svg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(svg.matches("<circle").count(), 7);
    assert!(svg.contains("width=\"800\""));

    let o = lgan(&["plot", "--in", s(&run.path("missing.csv")), "--out", s(&run.path("m.svg"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn semisupervised_run_and_labeled_eval() {
    let run = Run::new();
    let cfg = run.file("ssl.cfg", SSL_CONFIG);
    let ckpt = run.path("ssl.lgan");
    let log = run.path("ssl.csv");
    let o = lgan(&["train-ssl", "--config", s(&cfg), "--out", s(&ckpt), "--log", s(&log)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("epoch,labeled,unlabeled,fake,penalty,"));
    assert_eq!(log.lines().count(), 3);

    let data = run.file("test.csv", "-1,0.2,0\n2,0.2,1\n0.5,-0.3,1\n0,1,0\n");
    let out = run.path("eval.csv");
    let o = lgan(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--has-labels", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let err: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("classification_error,"))
        .expect("error row")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&err));
}
