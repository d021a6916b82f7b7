//! Flat `key = value` run configuration.
//!
//! ```text
//! # circle run
//! dataset = circle
//! n = 1000
//! epochs = 300
//! anneal_start_epoch = none
//! generator_hidden = 64,64
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_csv, load_idx, make_circle, make_two_moons, split_labeled, Dataset, IdxData};
use crate::error::{Error, Result};
use crate::geometry::{LocalGenerator, Parameterization};
use crate::nets::{Activation, Mlp, MlpSpec};
use crate::semisup::ClassifierModel;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Circle,
    Moons,
    Csv,
    Idx,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(DatasetKind::Circle),
            "moons" => Ok(DatasetKind::Moons),
            "csv" => Ok(DatasetKind::Csv),
            "idx" => Ok(DatasetKind::Idx),
            other => Err(Error::invalid(format!("unknown dataset {other:?}"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Circle => "circle",
            DatasetKind::Moons => "moons",
            DatasetKind::Csv => "csv",
            DatasetKind::Idx => "idx",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub coord_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub generator_activation: Activation,
    pub parameterization: Parameterization,
    /// Shared by the discriminator and the classifier trunk.
    pub discriminator_hidden: Vec<usize>,
    pub discriminator_activation: Activation,
    pub dataset: DatasetKind,
    /// Point count for `circle`, points per class for `moons`.
    pub n: usize,
    pub noise: f64,
    pub radius: f64,
    pub data_seed: u64,
    pub path: Option<PathBuf>,
    /// IDX label file accompanying an IDX image file.
    pub labels_path: Option<PathBuf>,
    /// Whether a CSV file carries an integer label in its last column.
    pub csv_labels: bool,
    pub labels_per_class: usize,
    pub validation_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            coord_dim: 1,
            generator_hidden: vec![64, 64],
            generator_activation: Activation::Tanh,
            parameterization: Parameterization::Residual,
            discriminator_hidden: vec![128, 128],
            discriminator_activation: Activation::LeakyRelu,
            dataset: DatasetKind::Circle,
            n: 1000,
            noise: 0.02,
            radius: 1.0,
            data_seed: 0,
            path: None,
            labels_path: None,
            csv_labels: false,
            labels_per_class: 3,
            validation_size: 100,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn display_err<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "lr_discriminator" => t.lr_discriminator = parse(value)?,
            "lr_generator" => t.lr_generator = parse(value)?,
            "mu" => t.mu = parse(value)?,
            "eta" => t.eta = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "coord_sample_size" => t.coord_sample_size = parse(value)?,
            "zero_weight" => t.zero_weight = parse(value)?,
            "anneal_start_epoch" => {
                t.anneal_start_epoch = if value == "none" { None } else { Some(parse(value)?) }
            }
            "early_stop_patience" => t.early_stop_patience = parse(value)?,
            "early_stop_min_epoch" => t.early_stop_min_epoch = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "adam_beta1" => t.adam_beta1 = parse(value)?,
            "adam_beta2" => t.adam_beta2 = parse(value)?,
            "adam_epsilon" => t.adam_epsilon = parse(value)?,
            "manifold_penalty" => t.manifold_penalty = parse_bool(value)?,
            "penalty_on_labeled" => t.penalty_on_labeled = parse_bool(value)?,
            "coord_dim" => self.coord_dim = parse(value)?,
            "generator_hidden" => self.generator_hidden = parse_list(value)?,
            "generator_activation" => self.generator_activation = display_err(value.parse())?,
            "parameterization" => self.parameterization = display_err(value.parse())?,
            "discriminator_hidden" => self.discriminator_hidden = parse_list(value)?,
            "discriminator_activation" => self.discriminator_activation = display_err(value.parse())?,
            "dataset" => self.dataset = display_err(value.parse())?,
            "n" => self.n = parse(value)?,
            "noise" => self.noise = parse(value)?,
            "radius" => self.radius = parse(value)?,
            "data_seed" => self.data_seed = parse(value)?,
            "path" => self.path = Some(PathBuf::from(value)),
            "labels_path" => self.labels_path = Some(PathBuf::from(value)),
            "csv_labels" => self.csv_labels = parse_bool(value)?,
            "labels_per_class" => self.labels_per_class = parse(value)?,
            "validation_size" => self.validation_size = parse(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key:?}"),
                });
            }
            cfg.set(key, value).map_err(|message| Error::Config { line, message })?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.path, &mut cfg.labels_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("lr_discriminator", t.lr_discriminator.to_string());
        kv("lr_generator", t.lr_generator.to_string());
        kv("mu", t.mu.to_string());
        kv("eta", t.eta.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("coord_sample_size", t.coord_sample_size.to_string());
        kv("zero_weight", t.zero_weight.to_string());
        kv("anneal_start_epoch", t.anneal_start_epoch.map_or("none".into(), |e| e.to_string()));
        kv("early_stop_patience", t.early_stop_patience.to_string());
        kv("early_stop_min_epoch", t.early_stop_min_epoch.to_string());
        kv("seed", t.seed.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_epsilon", t.adam_epsilon.to_string());
        kv("manifold_penalty", t.manifold_penalty.to_string());
        kv("penalty_on_labeled", t.penalty_on_labeled.to_string());
        kv("coord_dim", self.coord_dim.to_string());
        kv("generator_hidden", list(&self.generator_hidden));
        kv("generator_activation", self.generator_activation.to_string());
        kv(
            "parameterization",
            match self.parameterization {
                Parameterization::Residual => "residual".into(),
                Parameterization::Direct => "direct".into(),
            },
        );
        kv("discriminator_hidden", list(&self.discriminator_hidden));
        kv("discriminator_activation", self.discriminator_activation.to_string());
        kv("dataset", self.dataset.to_string());
        kv("n", self.n.to_string());
        kv("noise", self.noise.to_string());
        kv("radius", self.radius.to_string());
        kv("data_seed", self.data_seed.to_string());
        if let Some(p) = &self.path {
            kv("path", p.display().to_string());
        }
        if let Some(p) = &self.labels_path {
            kv("labels_path", p.display().to_string());
        }
        kv("csv_labels", self.csv_labels.to_string());
        kv("labels_per_class", self.labels_per_class.to_string());
        kv("validation_size", self.validation_size.to_string());
        s
    }

    fn need_path(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("dataset {} needs a path", self.dataset)))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        match self.dataset {
            DatasetKind::Circle => make_circle(self.n, self.radius, self.noise, &mut rng, false),
            DatasetKind::Moons => make_two_moons(self.n, self.noise, &mut rng),
            DatasetKind::Csv => load_csv(self.need_path()?, self.csv_labels),
            DatasetKind::Idx => {
                let points = match load_idx(self.need_path()?)? {
                    IdxData::Images { points, .. } => points,
                    IdxData::Labels(_) => return Err(Error::invalid("path must be an IDX image file")),
                };
                let labels = match &self.labels_path {
                    None => None,
                    Some(p) => match load_idx(p)? {
                        IdxData::Labels(l) => Some(l),
                        IdxData::Images { .. } => return Err(Error::invalid("labels_path must be an IDX label file")),
                    },
                };
                Dataset::new("idx", points, labels)
            }
        }
    }

    /// Splits a labeled dataset into labeled, unlabeled and validation parts.
    /// The validation part is held out first; the labeled part then takes
    /// `labels_per_class` examples of each class from the rest.
    pub fn semisup_split(&self, ds: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        if ds.labels.is_none() {
            return Err(Error::invalid("semi-supervised training needs a labeled dataset"));
        }
        if self.validation_size >= ds.len() {
            return Err(Error::invalid(format!(
                "validation_size {} leaves no training data out of {}",
                self.validation_size,
                ds.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let (val, rest) = order.split_at(self.validation_size);
        let (mut val, mut rest) = (val.to_vec(), rest.to_vec());
        val.sort_unstable();
        rest.sort_unstable();
        let (labeled, unlabeled) = split_labeled(&ds.subset(&rest), self.labels_per_class, &mut rng)?;
        Ok((labeled, unlabeled, ds.subset(&val)))
    }

    pub fn init_generator(&self, ambient_dim: usize) -> Result<LocalGenerator> {
        let spec = MlpSpec::with_hidden(
            ambient_dim + self.coord_dim,
            &self.generator_hidden,
            self.generator_activation,
            ambient_dim,
            Activation::Linear,
        );
        let core = Mlp::init(&spec, self.train.seed.wrapping_add(1))?;
        LocalGenerator::with_parameterization(core, ambient_dim, self.coord_dim, self.parameterization)
    }

    pub fn init_discriminator(&self, ambient_dim: usize) -> Result<Mlp> {
        let spec = MlpSpec::with_hidden(
            ambient_dim,
            &self.discriminator_hidden,
            self.discriminator_activation,
            1,
            Activation::Sigmoid,
        );
        Mlp::init(&spec, self.train.seed.wrapping_add(2))
    }

    pub fn init_classifier(&self, ambient_dim: usize, classes: usize) -> Result<ClassifierModel> {
        ClassifierModel::init(
            ambient_dim,
            &self.discriminator_hidden,
            self.discriminator_activation,
            classes,
            self.train.seed.wrapping_add(3),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# nothing\n\n   \n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::parse("epochs = 7 # short\nmu=0.5\nanneal_start_epoch = 3\ngenerator_hidden = 8, 9\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.mu, 0.5);
        assert_eq!(cfg.train.anneal_start_epoch, Some(3));
        assert_eq!(cfg.generator_hidden, vec![8, 9]);
    }

    #[test]
    fn rejects_bad_lines() {
        let err = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { line, message }) => (line, message),
            other => panic!("{other:?}"),
        };
        let (line, msg) = err("epochs = 3\nlearning_rate = 1\n");
        assert_eq!(line, 2);
        assert!(msg.contains("learning_rate"));
        assert_eq!(err("epochs\n").0, 1);
        assert_eq!(err("epochs = x\n").0, 1);
        assert_eq!(err("seed = 1\nseed = 2\n").0, 2);
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_generator = 0.1 + 0.2;
        cfg.train.anneal_start_epoch = Some(12);
        cfg.train.manifold_penalty = false;
        cfg.parameterization = Parameterization::Direct;
        cfg.dataset = DatasetKind::Csv;
        cfg.path = Some(PathBuf::from("x.csv"));
        cfg.discriminator_hidden = vec![];
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn semisup_split_partitions() {
        let cfg = RunConfig {
            dataset: DatasetKind::Moons,
            n: 30,
            validation_size: 10,
            ..RunConfig::default()
        };
        let ds = cfg.load_dataset().unwrap();
        let (l, u, v) = cfg.semisup_split(&ds).unwrap();
        assert_eq!((l.len(), u.len(), v.len()), (6, 44, 10));
        let mut all: Vec<Vec<u64>> = [&l, &u, &v]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.points.row(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        all.sort();
        let mut orig: Vec<Vec<u64>> = (0..ds.len()).map(|i| ds.points.row(i).iter().map(|x| x.to_bits()).collect()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }
}
