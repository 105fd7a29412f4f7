//! Command-line verbs. Every artifact lands under an output root:
//!
//! ```text
//! <root>/runs/<id>/{config.json, metrics.csv, softlabels_stage<k>.csv, params_final.bin, params_final.json}
//! <root>/sweeps/<hash>/grid.csv
//! <root>/expected/<id>/expected_accuracy.csv
//! <root>/analysis/<id>/{template_distances.csv, adt.csv, adc.csv, projection_<split>.csv}
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis;
use crate::config::{ExperimentConfig, SweepCell, SweepGrid};
use crate::error::{Error, Result};
use crate::labels::SoftLabelTable;
use crate::nn::{self, Batch, CheckpointMeta, Network, Objective};
use crate::par::{self, Exec};
use crate::rng::substream;
use crate::training::{self, Method, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "colam", version, about = "Soft-label co-learning laboratory")]
pub struct Cli {
    /// Root directory for runs, sweeps and analysis output.
    #[arg(long, global = true, env = "COLAM_OUT", default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Grid search over update interval, peer count and temperature.
    Sweep(ConfigArgs),
    /// Score every soft-label checkpoint of a run by training fresh models on it.
    ExpectedAccuracy(RunArgs),
    /// Export template and representation geometry of a finished run.
    Analyze(AnalyzeArgs),
    /// Compare backpropagated gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, default_value = "colam", value_parser = parse_method)]
    pub method: Method,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Three classes for the template-plane projection.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
    pub classes: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&cli.out, &a.common, a.method, out).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&cli.out, &a, out).map(|_| ()),
        Command::ExpectedAccuracy(a) => cmd_expected_accuracy(&cli.out, &a.run, out).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&cli.out, &a.run, &a.classes, out).map(|_| ()),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn provenance(hash: &str) -> Vec<String> {
    vec![format!("config_hash={hash}")]
}

pub fn run_id(method: Method, config_hash: &str) -> String {
    format!("{}-{}", method.name(), &config_hash[..12])
}

fn run_name(run: &Path) -> Result<String> {
    run.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("bad run directory {}", run.display())))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::file(path, e))
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

/// Train and write `runs/<id>`; returns the run directory.
pub fn cmd_train(root: &Path, args: &ConfigArgs, method: Method, out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(args)?;
    let hash = cfg.hash();
    let dir = root.join("runs").join(run_id(method, &hash));
    if dir.exists() {
        return Err(Error::invalid(format!("run directory {} already exists", dir.display())));
    }
    let (dataset, stats) = cfg.load_dataset()?;
    let record = training::run_method(method, &cfg.train, &dataset)?;
    record.write_dir(&dir, &cfg.to_json(), &hash)?;
    if let Some(stats) = stats {
        write_file(&dir.join("norm_stats.json"), &serde_json::to_string_pretty(&stats)?)?;
    }
    writeln!(out, "run_dir={}", dir.display()).map_err(io)?;
    writeln!(out, "top1={}", record.final_test_top1()).map_err(io)?;
    Ok(dir)
}

/// Training configuration of one sweep cell; always a co-learning run.
pub fn cell_config(base: &TrainConfig, grid: &SweepGrid, cell: &SweepCell) -> TrainConfig {
    TrainConfig {
        stages: grid.stages_for(cell.interval),
        epochs_per_stage: cell.interval,
        peers: cell.peers,
        temperature: cell.temperature,
        seed: cell.seed,
        ..base.clone()
    }
}

pub const SWEEP_HEADER: &str = "interval,k,T,seed,top1,cell_hash";

/// Run every grid cell not already recorded in `sweeps/<hash>/grid.csv`,
/// appending rows in grid order. Returns the grid file.
pub fn cmd_sweep(root: &Path, args: &ConfigArgs, out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = load_config(args)?;
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config(vec!["sweep: config has no grid".into()]))?;
    grid.validate()?;
    let hash = cfg.hash();
    let path = root.join("sweeps").join(&hash[..12]).join("grid.csv");
    let header = format!("# config_hash={hash}\n{SWEEP_HEADER}\n");

    let mut done = HashSet::new();
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        if !text.starts_with(&header) {
            return Err(Error::Inconsistent(format!(
                "{} was written for a different configuration",
                path.display()
            )));
        }
        for line in text.lines().skip(2).filter(|l| !l.trim().is_empty()) {
            // A torn final line from an interrupted write is simply redone.
            if let Some(h) = line.rsplit(',').next().filter(|h| h.len() == 64) {
                done.insert(h.to_string());
            }
        }
        // Drop any partial trailing line.
        let keep: String = text
            .lines()
            .filter(|l| l.starts_with('#') || l == &SWEEP_HEADER || l.rsplit(',').next().is_some_and(|h| done.contains(h)))
            .map(|l| format!("{l}\n"))
            .collect();
        if keep != text {
            write_file(&path, &keep)?;
        }
    } else {
        write_file(&path, &header)?;
    }

    let (dataset, _) = cfg.load_dataset()?;
    let pending: Vec<(SweepCell, TrainConfig, String)> = grid
        .cells()
        .into_iter()
        .map(|cell| {
            let tc = cell_config(&cfg.train, &grid, &cell);
            let h = tc.hash();
            (cell, tc, h)
        })
        .filter(|(_, _, h)| !done.contains(h))
        .collect();
    let skipped = grid.cells().len() - pending.len();
    if skipped > 0 {
        writeln!(out, "resuming: {skipped} cells already complete").map_err(io)?;
    }

    let width = par::threads(Exec::Parallel);
    for wave in pending.chunks(width) {
        let results = par::map(Exec::Parallel, wave, |(_, tc, _)| {
            training::run_colam(tc, &dataset).map(|r| r.final_test_top1())
        });
        let mut rows = String::new();
        for ((cell, _, h), top1) in wave.iter().zip(results) {
            let top1 = top1?;
            let _ = writeln!(
                rows,
                "{},{},{},{},{},{h}",
                cell.interval, cell.peers, cell.temperature, cell.seed, top1
            );
            writeln!(
                out,
                "interval={} k={} T={} seed={} top1={top1}",
                cell.interval, cell.peers, cell.temperature, cell.seed
            )
            .map_err(io)?;
        }
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::file(&path, e))?;
        f.write_all(rows.as_bytes()).map_err(|e| Error::file(&path, e))?;
    }
    writeln!(out, "grid={}", path.display()).map_err(io)?;
    Ok(path)
}

/// Expected accuracy of each stage checkpoint of a co-learning run, written
/// to `expected/<id>/expected_accuracy.csv`.
pub fn cmd_expected_accuracy(root: &Path, run: &Path, out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = ExperimentConfig::from_file(&run.join("config.json"))?;
    let hash = cfg.hash();
    let files: Vec<PathBuf> = (1..=cfg.train.stages)
        .map(|k| run.join(format!("softlabels_stage{k}.csv")))
        .collect();
    let missing: Vec<PathBuf> = files.iter().filter(|p| !p.exists()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints(missing));
    }
    let tables = files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            SoftLabelTable::from_csv(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    let (dataset, _) = cfg.load_dataset()?;
    let scores = par::map(Exec::Parallel, &tables, |t| {
        training::expected_accuracy(t, &cfg.train, &dataset)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut csv = provenance(&hash).iter().map(|l| format!("# {l}\n")).collect::<String>();
    csv.push_str("stage,expected_top1\n");
    for (t, s) in tables.iter().zip(&scores) {
        let _ = writeln!(csv, "{},{s}", t.stage());
        writeln!(out, "stage={} expected_top1={s}", t.stage()).map_err(io)?;
    }
    let path = root.join("expected").join(run_name(run)?).join("expected_accuracy.csv");
    write_file(&path, &csv)?;
    writeln!(out, "expected={}", path.display()).map_err(io)?;
    Ok(path)
}

/// Geometry exports for a finished run, written to `analysis/<id>/`.
pub fn cmd_analyze(root: &Path, run: &Path, classes: &[usize], out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = ExperimentConfig::from_file(&run.join("config.json"))?;
    let hash = cfg.hash();
    let net = Network::load(&run.join("params_final.bin"))?;
    let meta_path = run.join("params_final.json");
    let meta: CheckpointMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::file(&meta_path, e))?,
    )?;
    if meta.config_hash != hash {
        return Err(Error::Inconsistent(format!(
            "parameters were trained under config {} but config.json hashes to {hash}",
            meta.config_hash
        )));
    }
    let (dataset, _) = cfg.load_dataset()?;
    let projection = if dataset.classes() < 3 {
        eprintln!(
            "warning: {} classes, skipping template-plane projection",
            dataset.classes()
        );
        None
    } else {
        match classes {
            [a, b, c] => Some([*a, *b, *c]),
            _ => return Err(Error::invalid("--classes needs exactly three class ids")),
        }
    };
    let report = analysis::analyze(&net, &dataset, projection)?;
    let dir = root.join("analysis").join(run_name(run)?);
    let method = meta.method.as_deref().unwrap_or("unknown");
    report.write_dir(&dir, method, &provenance(&hash))?;
    writeln!(
        out,
        "mean_template_distance={}",
        analysis::mean_template_distance(&report.distances)
    )
    .map_err(io)?;
    writeln!(out, "analysis={}", dir.display()).map_err(io)?;
    Ok(dir)
}

pub fn cmd_grad_check(args: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (dataset, _) = cfg.load_dataset()?;
    let idx: Vec<usize> = dataset
        .indices(crate::data::Split::Train)
        .into_iter()
        .take(args.samples)
        .collect();
    let features: Vec<f64> = idx.iter().flat_map(|&i| dataset.sample(i).to_vec()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.label(i)).collect();
    let batch = Batch::one_hot(features, &labels, dataset.dim(), dataset.classes())?;
    let t = &cfg.train;
    let net = Network::mlp(dataset.dim(), &t.hidden, dataset.classes(), &mut substream(t.seed, "init", 0))?;
    let report = nn::grad_check(&net, &batch, &Objective::tempered(t.temperature), args.step, args.tolerance)?;
    writeln!(
        out,
        "params={} max_rel_error={:e} worst_index={} layer={} passed={}",
        report.params, report.max_rel_error, report.worst_index, report.worst_location.0, report.passed
    )
    .map_err(io)?;
    if report.passed {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "gradient check failed: relative error {:e} at parameter {}",
            report.max_rel_error, report.worst_index
        )))
    }
}

/// Hash identifying a grid row, exposed for tests.
pub fn cell_hash(base: &TrainConfig, grid: &SweepGrid, cell: &SweepCell) -> String {
    cell_config(base, grid, cell).hash()
}
