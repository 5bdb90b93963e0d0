//! Command-line harness: `generate-data`, `run` and `report`.

pub mod report;
pub mod results;
pub mod spec;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::federation::{self, Strategy};
use crate::model::checkpoint;
use crate::synthdata::{format, make_federation_data, positive_fraction, FederationData};
pub use results::ResultRow;
pub use spec::ExperimentSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "detfed", version, about = "Federated detection-transformer simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (flat TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the experiment file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (data directory for `generate-data`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render node and test key-frame sets to FKEY files.
    GenerateData(Common),
    /// Train every grid cell and append to results.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Worker threads for concurrent node training.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        iou_thr: Option<f64>,
        #[arg(long)]
        conf_thr: Option<f64>,
    },
    /// Print final-round results as markdown tables.
    Report {
        /// Results file; defaults to `<out>/results.csv`.
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn load_spec(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

pub fn node_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("node_{i}.fkey"))
}

pub fn test_file(dir: &Path) -> PathBuf {
    dir.join("test.fkey")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Renders the datasets of `spec` into `dir` and returns them.
pub fn cmd_generate_data(spec: &ExperimentSpec, dir: &Path) -> Result<FederationData> {
    let data = make_federation_data(spec.seed, &spec.profiles(), spec.train_per_node, spec.test_size, spec.image_size)?;
    create_dir(dir)?;
    for (i, node) in data.nodes.iter().enumerate() {
        format::save(node, &node_file(dir, i))?;
        println!("node {i}: {} samples, positive fraction {:.3}", node.len(), positive_fraction(node));
    }
    format::save(&data.test, &test_file(dir))?;
    println!("test: {} samples, positive fraction {:.3}", data.test.len(), positive_fraction(&data.test));
    println!("pooled training positive fraction {:.3}", positive_fraction(&data.pooled()));
    Ok(data)
}

/// Reads the node and test sets written by [`cmd_generate_data`].
pub fn load_data(spec: &ExperimentSpec, dir: &Path) -> Result<FederationData> {
    let nodes = (0..spec.nodes).map(|i| format::load(&node_file(dir, i))).collect::<Result<Vec<_>>>()?;
    let test = format::load(&test_file(dir))?;
    for s in nodes.iter().flatten().chain(&test) {
        if s.height() != spec.image_size || s.width() != spec.image_size {
            return Err(Error::Config(format!(
                "{} holds {}×{} frames but image_size is {}",
                dir.display(),
                s.height(),
                s.width(),
                spec.image_size
            )));
        }
    }
    Ok(FederationData { nodes, test })
}

fn cell_dir(out: &Path, strategy: Strategy, rounds: usize, epochs: usize) -> PathBuf {
    out.join("checkpoints").join(format!("{}_r{rounds}_e{epochs}", strategy.name()))
}

/// Runs every grid cell, appending to `<out>/results.csv` and writing each
/// node's final parameters and batch-norm statistics.
pub fn cmd_run(spec: &ExperimentSpec, out: &Path, workers: usize) -> Result<PathBuf> {
    let data = load_data(spec, &spec.data_dir)?;
    create_dir(out)?;
    let csv = out.join("results.csv");
    for (rounds, epochs, strategy) in spec.cells() {
        let cfg = spec.config(strategy, rounds, epochs);
        let run = federation::run(&cfg, &data, workers)?;
        if let Some(g) = run.reports.last().and_then(|r| r.global.as_ref()) {
            eprintln!("{strategy} R={rounds} T={epochs}: acc {:.3} ± {:.3}", g.mean.acc, g.acc_std);
        }
        results::append(&csv, &results::rows_for(strategy.name(), rounds, epochs, &run.reports, spec.record_time))?;
        let dir = cell_dir(out, strategy, rounds, epochs);
        create_dir(&dir)?;
        for (i, node) in run.nodes.iter().enumerate() {
            checkpoint::save(&node.params, &dir.join(format!("node_{i}.ckpt")))?;
            checkpoint::save(&node.stats.to_tree(), &dir.join(format!("node_{i}.stats.ckpt")))?;
        }
    }
    Ok(csv)
}

pub fn cmd_report(csv: &Path) -> Result<String> {
    report::render(&results::read(csv)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(common) => {
            let spec = load_spec(&common)?;
            let dir = common.out.clone().unwrap_or_else(|| spec.data_dir.clone());
            cmd_generate_data(&spec, &dir)?;
        }
        Command::Run { common, workers, iou_thr, conf_thr } => {
            let mut spec = load_spec(&common)?;
            spec.iou_thr = iou_thr.unwrap_or(spec.iou_thr);
            spec.conf_thr = conf_thr.unwrap_or(spec.conf_thr);
            spec.validate()?;
            if workers == 0 {
                return Err(Error::Config("--workers must be at least 1".into()));
            }
            let out = common.out.clone().unwrap_or_else(|| spec.out_dir.clone());
            let csv = cmd_run(&spec, &out, workers)?;
            println!("{}", csv.display());
        }
        Command::Report { csv, common } => {
            let path = match csv {
                Some(p) => p,
                None => common.out.clone().unwrap_or(load_spec(&common)?.out_dir).join("results.csv"),
            };
            print!("{}", cmd_report(&path)?);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}
