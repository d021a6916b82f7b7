//! Command-line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelBundle};
use crate::config::RunConfig;
use crate::data::{load_csv, load_idx, Dataset, IdxData};
use crate::error::{Error, Result};
use crate::geometry::{locality_penalty, LocalGenerator};
use crate::metrics::{classification_error, gram_deviation, local_dimension, singular_values, DEFAULT_DIMENSION_TOL};
use crate::report::{num, read_xy, scatter_svg, Table};
use crate::semisup::{predict_classes, train_semisup, SemisupEpochLog, SemisupModels};
use crate::tensor::Tensor;
use crate::training::{train_gan, GanEpochLog, GanModels};

#[derive(Debug, Parser)]
#[command(name = "lgan", about = "Localized GAN training and tangent-space diagnostics", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a local generator against a discriminator.
    TrainGan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the semi-supervised classifier together with a local generator.
    TrainSsl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Walk one local coordinate around a stored base point.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        point_index: usize,
        #[arg(long)]
        coord: usize,
        #[arg(long)]
        steps: usize,
        /// The walk covers `[-range, range]`.
        #[arg(long, default_value_t = 2.0)]
        range: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-point tangent diagnostics.
    Tangents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DIMENSION_TOL)]
        tol: f64,
    },
    /// Summary metrics of a checkpoint on a dataset (CSV or IDX).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// IDX label file for IDX images.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// The CSV data has an integer label in its last column.
        #[arg(long)]
        has_labels: bool,
        #[arg(long, default_value_t = DEFAULT_DIMENSION_TOL)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scatter plot of a CSV file.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the CLI; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::TrainGan { config, out, log } => train_gan_cmd(&config, &out, log.as_deref())?,
        Command::TrainSsl { config, out, log } => train_ssl_cmd(&config, &out, log.as_deref())?,
        Command::Generate {
            ckpt,
            point_index,
            coord,
            steps,
            range,
            out,
        } => generate_cmd(&ckpt, point_index, coord, steps, range, &out)?,
        Command::Tangents { ckpt, out, tol } => tangents_cmd(&ckpt, tol, &out)?,
        Command::Eval {
            ckpt,
            data,
            labels,
            has_labels,
            tol,
            out,
        } => eval_cmd(&ckpt, &data, labels.as_deref(), has_labels, tol, &out)?,
        Command::Plot { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let svg = scatter_svg(&read_xy(&text)?)?;
            std::fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
        }
    }
    Ok(())
}

fn write_log(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn train_gan_cmd(config: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let models = GanModels {
        generator: cfg.init_generator(data.dim())?,
        discriminator: cfg.init_discriminator(data.dim())?,
    };
    let (models, history) = train_gan(&cfg.train, &data, models)?;
    if let Some(log) = log {
        write_log(log, GanEpochLog::HEADER, history.iter().map(GanEpochLog::csv_row))?;
    }
    save_checkpoint(
        &ModelBundle {
            generator: Some(models.generator),
            discriminator: Some(models.discriminator),
            classifier: None,
            points: Some(data.points),
        },
        out,
    )
}

fn train_ssl_cmd(config: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let data = cfg.load_dataset()?;
    let (labeled, unlabeled, validation) = cfg.semisup_split(&data)?;
    let models = SemisupModels {
        classifier: cfg.init_classifier(data.dim(), data.num_classes())?,
        generator: cfg.init_generator(data.dim())?,
    };
    let (models, history) = train_semisup(&cfg.train, &labeled, &unlabeled, &validation, models)?;
    if let Some(log) = log {
        write_log(log, SemisupEpochLog::HEADER, history.iter().map(SemisupEpochLog::csv_row))?;
    }
    save_checkpoint(
        &ModelBundle {
            generator: Some(models.generator),
            discriminator: None,
            classifier: Some(models.classifier),
            points: Some(unlabeled.points),
        },
        out,
    )
}

fn parts(ckpt: &Path) -> Result<(LocalGenerator, Tensor, ModelBundle)> {
    let bundle = load_checkpoint(ckpt)?;
    let generator = bundle.generator.clone().ok_or_else(|| Error::MissingTensor("generator.meta".into()))?;
    let points = bundle.points.clone().ok_or_else(|| Error::MissingTensor("data.points".into()))?;
    Ok((generator, points, bundle))
}

fn coord_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

fn generate_cmd(ckpt: &Path, index: usize, coord: usize, steps: usize, range: f64, out: &Path) -> Result<(), Failure> {
    let (generator, points, _) = parts(ckpt)?;
    let n = generator.coord_dim();
    if coord >= n {
        return Err(Failure::Usage(format!("--coord {coord} out of range: valid coordinates are 0..={}", n - 1)));
    }
    if index >= points.rows() {
        return Err(Failure::Usage(format!(
            "--point-index {index} out of range: valid indices are 0..={}",
            points.rows().saturating_sub(1)
        )));
    }
    if steps == 0 {
        return Err(Failure::Usage("--steps must be at least 1".into()));
    }
    if !(range.is_finite() && range >= 0.0) {
        return Err(Failure::Usage("--range must be a non-negative number".into()));
    }
    let values: Vec<f64> = if steps == 1 {
        vec![0.0]
    } else {
        (0..steps).map(|s| -range + 2.0 * range * s as f64 / (steps - 1) as f64).collect()
    };
    let base = Tensor::matrix(steps, points.cols(), points.row(index).repeat(steps))?;
    let mut z = Tensor::zeros(&[steps, n]);
    for (s, &v) in values.iter().enumerate() {
        z.data_mut()[s * n + coord] = v;
    }
    let generated = generator.generate(&base, &z)?;
    let mut table = Table::new(["step".to_string(), "z".to_string()].into_iter().chain(coord_header("x", points.cols())));
    for (s, &v) in values.iter().enumerate() {
        let mut row = vec![s.to_string(), num(v)];
        row.extend(generated.row(s).iter().map(|&x| num(x)));
        table.push(row)?;
    }
    table.write(out)?;
    Ok(())
}

fn tangents_cmd(ckpt: &Path, tol: f64, out: &Path) -> Result<(), Failure> {
    if !(tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let (generator, points, _) = parts(ckpt)?;
    let jacobians = generator.jacobians(&points)?;
    let n = generator.coord_dim();
    let mut table = Table::new(
        ["index", "gram_deviation", "local_dimension"]
            .map(String::from)
            .into_iter()
            .chain(coord_header("sv", n)),
    );
    for (i, j) in jacobians.iter().enumerate() {
        let mut row = vec![i.to_string(), num(gram_deviation(j)), local_dimension(j, tol).to_string()];
        row.extend(singular_values(j).into_iter().map(num));
        table.push(row)?;
    }
    table.write(out)?;
    Ok(())
}

fn load_eval_data(path: &Path, labels: Option<&Path>, has_labels: bool) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return load_csv(path, has_labels);
    }
    let points = match load_idx(path)? {
        IdxData::Images { points, .. } => points,
        IdxData::Labels(_) => return Err(Error::invalid(format!("{} is an IDX label file", path.display()))),
    };
    let labels = match labels.map(load_idx).transpose()? {
        None => None,
        Some(IdxData::Labels(l)) => Some(l),
        Some(IdxData::Images { .. }) => return Err(Error::invalid("--labels must be an IDX label file")),
    };
    Dataset::new("eval", points, labels)
}

fn eval_cmd(ckpt: &Path, data: &Path, labels: Option<&Path>, has_labels: bool, tol: f64, out: &Path) -> Result<(), Failure> {
    if !(tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let bundle = load_checkpoint(ckpt)?;
    let ds = load_eval_data(data, labels, has_labels)?;
    let mut table = Table::new(["metric", "value"]);
    table.push(vec!["points".into(), ds.len().to_string()])?;
    if let Some(g) = &bundle.generator {
        if g.ambient_dim() != ds.dim() {
            return Err(Error::invalid(format!("data has {} columns, generator expects {}", ds.dim(), g.ambient_dim())).into());
        }
        let jacobians = g.jacobians(&ds.points)?;
        let count = jacobians.len().max(1) as f64;
        let mut locality = 0.0;
        for i in 0..ds.len() {
            locality += locality_penalty(g, &Tensor::vector(ds.points.row(i).to_vec()))?;
        }
        table.push(vec!["mean_locality".into(), num(locality / count)])?;
        table.push(vec![
            "mean_gram_deviation".into(),
            num(jacobians.iter().map(gram_deviation).sum::<f64>() / count),
        ])?;
        table.push(vec![
            "mean_local_dimension".into(),
            num(jacobians.iter().map(|j| local_dimension(j, tol) as f64).sum::<f64>() / count),
        ])?;
    }
    if let (Some(c), Some(labels)) = (&bundle.classifier, &ds.labels) {
        let predictions = predict_classes(c, &ds.points)?;
        table.push(vec!["classification_error".into(), num(classification_error(&predictions, labels)?)])?;
    }
    table.write(out)?;
    Ok(())
}
