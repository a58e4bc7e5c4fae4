//! The `caltype` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_model_spec, parse_profile};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, stat, Aggregate, EvalReport, Stat};
use crate::format::Dataset;
use crate::gradcheck::{self, Family};
use crate::model::{preset, LayerSpec, ModelSpec, TrainedModel};
use crate::sim::{generate_dataset, shift_profile, CellType, Profile};
use crate::training::{make_splits, threads_from_env, train_with_progress, EpochProgress, TrainConfig};

/// Exit status for a failed gradient check.
pub const EXIT_GRADCHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "caltype", version, about = "Cell-type classification of calcium fluorescence traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labeled dataset and write it to a dataset file.
    Generate(GenerateArgs),
    /// Train a model over repeated random train/test splits.
    Train(TrainArgs),
    /// Score a saved model on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on small networks.
    Gradcheck(GradcheckArgs),
    /// Sweep trace length or training-set size.
    Benchmark(BenchmarkArgs),
    /// List the named model presets.
    Presets,
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    /// Profile file overriding the default class parameters.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Examples per class, in PY,PV,SOM,VIP order.
    #[arg(long, value_delimiter = ',', default_values_t = [1000, 947, 1000, 1000])]
    pub counts: Vec<usize>,
    #[arg(long, default_value_t = 4000)]
    pub length: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the profile by this severity in [0, 1) before generating.
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    pub preset: Option<String>,
    /// Model spec file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = 3157)]
    pub train_size: usize,
    #[arg(long, default_value_t = 790)]
    pub test_size: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Override the keep probability of every dropout layer.
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Defaults to the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to save the model of the best split.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Add wall-clock training time to the report (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
    /// Print loss and accuracy after every epoch.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    Cnn,
    Rnn,
    Lstm,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb one analytic gradient entry (harness self-test).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Timesteps,
    Trainsize,
}

pub const TIMESTEP_GRID: [usize; 3] = [1000, 2000, 4000];
pub const TRAINSIZE_GRID: [usize; 4] = [2560, 3157, 5137, 6737];

#[derive(Debug, clap::Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub grid: Grid,
    #[arg(long, default_value = "cnn-best")]
    pub preset: String,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Training examples per split for the timesteps grid.
    #[arg(long, default_value_t = 3157)]
    pub train_size: usize,
    #[arg(long, default_value_t = 790)]
    pub test_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate(a) => generate(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Benchmark(a) => benchmark(a, out),
        Command::Presets => {
            for s in crate::model::presets() {
                writeln!(out, "{}", s.name)?;
            }
            Ok(0)
        }
    }
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut profile = match &a.profile {
        Some(p) => parse_profile(&fs::read_to_string(p)?)?,
        None => Profile::default(),
    };
    if let Some(severity) = a.shift {
        profile = shift_profile(&profile, severity, a.seed)?;
    }
    let counts: [usize; 4] = a
        .counts
        .as_slice()
        .try_into()
        .map_err(|_| Error::param("--counts takes exactly four values"))?;
    let data = Dataset::new(a.length, generate_dataset(&profile, counts, a.length, a.seed)?)?;
    data.save(&a.out)?;
    for (c, n) in CellType::ALL.iter().zip(data.class_counts()) {
        writeln!(out, "{c}\t{n}")?;
    }
    writeln!(out, "total\t{} traces of length {}", data.len(), data.length)?;
    Ok(0)
}

fn load_spec(preset_name: Option<&str>, spec_path: Option<&Path>) -> Result<ModelSpec> {
    match (preset_name, spec_path) {
        (Some(name), _) => preset(name),
        (None, Some(path)) => parse_model_spec(&fs::read_to_string(path)?),
        (None, None) => Err(Error::param("give --preset or --spec")),
    }
}

fn override_keep_prob(spec: &mut ModelSpec, keep: f64) {
    for l in &mut spec.layers {
        if let LayerSpec::Dropout { keep_prob } = l {
            *keep_prob = keep;
        }
    }
}

/// Everything one split produced.
pub struct SplitOutcome {
    pub model: TrainedModel,
    pub report: EvalReport,
    pub seed: u64,
}

/// Trains and evaluates `spec` on each split of `data`, in split order.
pub fn run_splits(
    spec: &ModelSpec,
    data: &Dataset,
    splits: usize,
    train_size: usize,
    test_size: usize,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, EpochProgress),
) -> Result<Vec<SplitOutcome>> {
    spec.validate(data.length)?;
    let plans = make_splits(data.len(), splits, train_size, test_size, cfg.seed)?;
    let view = data.training_view();
    let mut outcomes = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let cfg = TrainConfig {
            seed: plan.seed,
            ..cfg.clone()
        };
        let (model, tr) = train_with_progress(spec, &view, plan, &cfg, &mut |p| progress(i, p))?;
        let preds = model.predict_batch(plan.test_indices.iter().map(|&j| view[j].signal))?;
        let labels: Vec<usize> = plan.test_indices.iter().map(|&j| view[j].label).collect();
        let report = EvalReport::from_predictions(&preds, &labels, spec.classes, tr.train_seconds)?;
        outcomes.push(SplitOutcome {
            model,
            report,
            seed: plan.seed,
        });
    }
    Ok(outcomes)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let data = Dataset::load(&a.data)?;
    let mut spec = load_spec(a.preset.as_deref(), a.spec.as_deref())?;
    if let Some(k) = a.keep_prob {
        override_keep_prob(&mut spec, k);
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed.unwrap_or(spec.seed),
        threads: threads_from_env(),
        ..TrainConfig::default()
    };
    let verbose = a.verbose;
    let mut log = |split: usize, p: EpochProgress| {
        if verbose {
            eprintln!(
                "split {split} epoch {}/{} loss {:.4} accuracy {:.4} ({:.1} s)",
                p.epoch, p.epochs, p.loss, p.accuracy, p.seconds
            );
        }
    };
    let outcomes = run_splits(&spec, &data, a.splits, a.train_size, a.test_size, &cfg, &mut log)?;
    if outcomes.is_empty() {
        return Err(Error::param("--splits must be at least 1"));
    }
    for (i, o) in outcomes.iter().enumerate() {
        writeln!(
            out,
            "split {i}: test accuracy {:.4}, trained in {:.2} s",
            o.report.accuracy, o.report.train_seconds
        )?;
    }
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let agg = aggregate(&reports)?;
    writeln!(
        out,
        "{}: accuracy {:.4} +- {:.4} over {} splits, {:.2} +- {:.2} s per split",
        spec.name, agg.accuracy.mean, agg.accuracy.std, agg.splits, agg.train_seconds.mean, agg.train_seconds.std
    )?;

    // Highest test accuracy wins; ties go to the earliest split.
    let best = outcomes
        .iter()
        .enumerate()
        .fold(0, |b, (i, o)| if o.report.accuracy > outcomes[b].report.accuracy { i } else { b });
    if let Some(path) = &a.out {
        outcomes[best].model.save(path)?;
        writeln!(out, "saved split {best} model to {}", path.display())?;
    }
    if let Some(path) = &a.report {
        let rows: Vec<(String, u64, &EvalReport)> =
            outcomes.iter().enumerate().map(|(i, o)| (i.to_string(), o.seed, &o.report)).collect();
        write_metrics_csv(path, &rows, Some(&agg), a.timing)?;
    }
    Ok(0)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let model = TrainedModel::load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    if data.length != model.input_len {
        return Err(Error::LengthMismatch {
            model: model.input_len,
            data: data.length,
        });
    }
    let view = data.training_view();
    let preds = model.predict_batch(view.iter().map(|e| e.signal))?;
    let labels: Vec<usize> = view.iter().map(|e| e.label).collect();
    let report = EvalReport::from_predictions(&preds, &labels, model.spec.classes, 0.0)?;
    writeln!(out, "accuracy {:.4} on {} traces", report.accuracy, data.len())?;
    writeln!(out, "normalized confusion (rows true, columns predicted):")?;
    for (i, row) in report.confusion.normalized.iter().enumerate() {
        let cells = match row {
            Some(r) => r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "),
            None => "absent".to_string(),
        };
        writeln!(out, "  {:<4}{cells}", class_name(i))?;
    }
    for k in 0..report.metrics.precision.len() {
        writeln!(
            out,
            "  {:<4}precision {} recall {} specificity {}",
            class_name(k),
            opt(report.metrics.precision[k]),
            opt(report.metrics.recall[k]),
            opt(report.metrics.specificity[k])
        )?;
    }
    if let Some(path) = &a.report {
        write_metrics_csv(path, &[("eval".to_string(), model.spec.seed, &report)], None, false)?;
    }
    Ok(0)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let family = match a.family {
        FamilyArg::Cnn => Family::Cnn,
        FamilyArg::Rnn => Family::Rnn,
        FamilyArg::Lstm => Family::Lstm,
    };
    let reports = gradcheck::run(family, a.seed, a.corrupt)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        writeln!(
            out,
            "{:<40} {:>5} entries  max rel error {:.3e}  {}",
            r.label,
            r.entries,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        )?;
        worst = worst.max(r.max_rel_error);
    }
    writeln!(out, "max relative error {worst:.3e} (tolerance {:.0e})", gradcheck::TOLERANCE)?;
    Ok(if reports.iter().all(|r| r.passed()) { 0 } else { EXIT_GRADCHECK })
}

/// One cell of a benchmark sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkCell {
    pub value: usize,
    /// `None` when the dataset could not supply the cell.
    pub accuracy: Option<Stat>,
    pub seconds: Option<Stat>,
}

pub fn benchmark_cells(
    spec: &ModelSpec,
    data: &Dataset,
    grid: Grid,
    splits: usize,
    train_size: usize,
    test_size: usize,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, usize, EpochProgress),
) -> Result<Vec<BenchmarkCell>> {
    let values: &[usize] = match grid {
        Grid::Timesteps => &TIMESTEP_GRID,
        Grid::Trainsize => &TRAINSIZE_GRID,
    };
    let mut cells = Vec::new();
    for &value in values {
        let (subset, n_train) = match grid {
            Grid::Timesteps if value <= data.length => (data.truncated(value)?, train_size),
            Grid::Trainsize => (data.clone(), value),
            _ => {
                cells.push(BenchmarkCell { value, accuracy: None, seconds: None });
                continue;
            }
        };
        if n_train + test_size > subset.len() {
            cells.push(BenchmarkCell { value, accuracy: None, seconds: None });
            continue;
        }
        let outcomes = run_splits(spec, &subset, splits, n_train, test_size, cfg, &mut |s, p| progress(value, s, p))?;
        cells.push(BenchmarkCell {
            value,
            accuracy: stat(outcomes.iter().map(|o| Some(o.report.accuracy))),
            seconds: stat(outcomes.iter().map(|o| Some(o.report.train_seconds))),
        });
    }
    Ok(cells)
}

fn benchmark(a: BenchmarkArgs, out: &mut dyn Write) -> Result<i32> {
    let data = Dataset::load(&a.data)?;
    let spec = preset(&a.preset)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        threads: threads_from_env(),
        ..TrainConfig::default()
    };
    let cells = benchmark_cells(&spec, &data, a.grid, a.splits, a.train_size, a.test_size, &cfg, &mut |_, _, _| {})?;
    let column = match a.grid {
        Grid::Timesteps => "timesteps",
        Grid::Trainsize => "train_size",
    };
    let mut w = csv::Writer::from_path(&a.report)?;
    w.write_record([column, "status", "splits", "accuracy_mean", "accuracy_std", "seconds_mean", "seconds_std"])?;
    for c in &cells {
        match (c.accuracy, c.seconds) {
            (Some(acc), Some(sec)) => {
                writeln!(
                    out,
                    "{column} {}: accuracy {:.4} +- {:.4}, {:.2} +- {:.2} s",
                    c.value, acc.mean, acc.std, sec.mean, sec.std
                )?;
                w.write_record([
                    c.value.to_string(),
                    "ok".into(),
                    acc.n.to_string(),
                    acc.mean.to_string(),
                    acc.std.to_string(),
                    sec.mean.to_string(),
                    sec.std.to_string(),
                ])?;
            }
            _ => {
                writeln!(out, "{column} {}: skipped (not enough data)", c.value)?;
                w.write_record([c.value.to_string(), "skipped".into(), "0".into(), "".into(), "".into(), "".into(), "".into()])?;
            }
        }
    }
    w.flush()?;
    Ok(0)
}

fn class_name(k: usize) -> String {
    CellType::from_code(k as u8).map_or_else(|| format!("c{k}"), |c| c.name().to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Writes one row per report and, when given, an aggregate row holding means with
/// sample standard deviations in the `_std` columns. Absent metrics are written as `NA`.
pub fn write_metrics_csv(
    path: &Path,
    rows: &[(String, u64, &EvalReport)],
    agg: Option<&Aggregate>,
    timing: bool,
) -> Result<()> {
    let classes = rows.first().map_or(0, |r| r.2.confusion.classes());
    let mut header = vec!["row".to_string(), "seed".into(), "examples".into(), "accuracy".into(), "accuracy_std".into()];
    if timing {
        header.extend(["train_seconds".to_string(), "train_seconds_std".into()]);
    }
    for k in 0..classes {
        for m in ["precision", "recall", "specificity"] {
            header.push(format!("{m}_{}", class_name(k)));
            header.push(format!("{m}_{}_std", class_name(k)));
        }
    }
    for i in 0..classes {
        for j in 0..classes {
            header.push(format!("cm_{}_{}", class_name(i), class_name(j)));
            header.push(format!("cm_{}_{}_std", class_name(i), class_name(j)));
        }
    }

    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (name, seed, r) in rows {
        let mut rec = vec![name.clone(), seed.to_string(), r.confusion.total().to_string(), r.accuracy.to_string(), String::new()];
        if timing {
            rec.extend([r.train_seconds.to_string(), String::new()]);
        }
        for k in 0..classes {
            for v in [r.metrics.precision[k], r.metrics.recall[k], r.metrics.specificity[k]] {
                rec.extend([cell(v), String::new()]);
            }
        }
        for i in 0..classes {
            for j in 0..classes {
                rec.extend([cell(r.confusion.normalized[i].as_ref().map(|row| row[j])), String::new()]);
            }
        }
        w.write_record(&rec)?;
    }
    if let Some(agg) = agg {
        let pair = |s: Option<Stat>| match s {
            Some(s) => [s.mean.to_string(), s.std.to_string()],
            None => ["NA".to_string(), "NA".to_string()],
        };
        let total: u64 = rows.iter().map(|r| r.2.confusion.total()).sum();
        let mut rec = vec!["aggregate".to_string(), String::new(), total.to_string()];
        rec.extend(pair(Some(agg.accuracy)));
        if timing {
            rec.extend(pair(Some(agg.train_seconds)));
        }
        for k in 0..classes {
            for s in [agg.precision[k], agg.recall[k], agg.specificity[k]] {
                rec.extend(pair(s));
            }
        }
        for i in 0..classes {
            for j in 0..classes {
                rec.extend(pair(stat(rows.iter().map(|r| r.2.confusion.normalized[i].as_ref().map(|row| row[j])))));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
