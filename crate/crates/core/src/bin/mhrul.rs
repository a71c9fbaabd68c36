use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mhrul::data::{self, Subset, SyntheticConfig};
use mhrul::experiment::{
    self, emit_table, parse_table, ConfigFile, ExperimentConfig, GridSpec, Overrides, TableFormat,
};
use mhrul::model::Model;
use mhrul::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mhrul",
    version,
    about = "Multi-head and attention RUL models for CMAPSS data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a subset and write per-column statistics and the processed frame.
    Ingest {
        #[arg(long, default_value = "FD001")]
        subset: String,
        #[arg(long, default_value = "data/CMAPSS")]
        data_dir: PathBuf,
        #[arg(long, default_value = "runs/ingest")]
        output_dir: PathBuf,
    },
    /// Run one experiment (all repeats).
    Train(ExpArgs),
    /// Run a cartesian grid of experiments and write a combined table.
    Grid {
        #[command(flatten)]
        exp: ExpArgs,
        /// TOML file with `heads`, `modes` and `attention` lists.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Combine result tables from run directories or CSV files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "markdown")]
        format: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-unit true vs predicted series from a finished run.
    Predict {
        /// Output directory of a `train` run.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        units: Vec<u32>,
        /// Seed of the checkpoint to use; defaults to the best repeat.
        #[arg(long)]
        seed: Option<u64>,
        /// Predict at every cycle rather than only the final window.
        #[arg(long)]
        every_window: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a CMAPSS-format synthetic dataset (for smoke tests).
    Synth {
        #[arg(long, default_value = "FD001")]
        subset: String,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        train_units: usize,
        #[arg(long, default_value_t = 10)]
        test_units: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    /// single_head or multi_head
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    head_type: Option<String>,
    #[arg(long, value_delimiter = ',')]
    layer_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    trunk_sizes: Option<Vec<usize>>,
    #[arg(long)]
    window_length: Option<usize>,
    #[arg(long)]
    n_signals: Option<usize>,
    #[arg(long)]
    score_kind: Option<String>,
    /// soft or hard
    #[arg(long)]
    attention_mode: Option<String>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        file.resolve(&Overrides {
            subset: self.subset.clone(),
            data_dir: self.data_dir.clone(),
            output_dir: self.output_dir.clone(),
            repeats: self.repeats,
            mode: self.mode.clone(),
            head_type: self.head_type.clone(),
            layer_sizes: self.layer_sizes.clone(),
            trunk_sizes: self.trunk_sizes.clone(),
            window_length: self.window_length,
            n_signals: self.n_signals,
            score_kind: self.score_kind.clone(),
            attention_mode: self.attention_mode.clone(),
            no_attention: self.no_attention,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        })
    }
}

fn ingest(subset: &str, dir: &Path, out: &Path) -> Result<()> {
    let subset = Subset::parse(subset)?;
    let (train, test, truth) = data::load_subset(dir, subset)?;
    std::fs::create_dir_all(out)?;
    let all = data::all_columns(&train, subset);
    std::fs::write(out.join("raw_summary.csv"), all.summary_csv())?;
    let prepared = data::prepare(subset, &train, &test, truth, 1, data::DEFAULT_R_EARLY)?;
    std::fs::write(out.join("train_scaled.csv"), prepared.train_frame.to_csv())?;
    std::fs::write(out.join("scaled_summary.csv"), prepared.train_frame.summary_csv())?;
    let lengths = data::unit_lengths(&train);
    let min = lengths.values().min().copied().unwrap_or(0);
    let max = lengths.values().max().copied().unwrap_or(0);
    println!(
        "{}: {} training units ({} rows, lengths {min}..={max}), {} test units, {} features",
        subset.name(),
        lengths.len(),
        train.len(),
        data::unit_lengths(&test).len(),
        prepared.train_frame.n_features()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn train_cmd(args: &ExpArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let r = experiment::run_experiment(&cfg)?;
    print!("{}", r.summary_text());
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn grid_cmd(args: &ExpArgs, grid: Option<&Path>) -> Result<()> {
    let base = args.resolve()?;
    let spec: GridSpec = match grid {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::config(format!("grid file: {}", e.message())))?,
        None => GridSpec::default(),
    };
    let cfgs = spec.expand(&base)?;
    let prepared = experiment::prepare_data(&base)?;
    let mut reports = Vec::new();
    for cfg in &cfgs {
        eprintln!("running {}", cfg.label());
        let r = experiment::run_prepared(cfg, &prepared)?;
        experiment::write_outputs(&r, &prepared)?;
        reports.extend(r.reports);
    }
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(
        base.output_dir.join("table.csv"),
        emit_table(&reports, TableFormat::Csv)?,
    )?;
    let md = emit_table(&reports, TableFormat::Markdown)?;
    std::fs::write(base.output_dir.join("table.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn report_cmd(inputs: &[PathBuf], format: &str, output: Option<&Path>) -> Result<()> {
    let format = TableFormat::parse(format)?;
    let mut reports = Vec::new();
    for p in inputs {
        let file = if p.is_dir() { p.join("results.csv") } else { p.clone() };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", file.display()))))?;
        reports.extend(parse_table(&text)?);
    }
    let table = emit_table(&reports, format)?;
    match output {
        Some(p) => std::fs::write(p, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn predict_cmd(run: &Path, units: &[u32], seed: Option<u64>, every: bool, output: Option<&Path>) -> Result<()> {
    let cfg = ConfigFile::load(&run.join("config.toml"))?.resolve(&Overrides::default())?;
    let seed = match seed {
        Some(s) => s,
        None => {
            let text = std::fs::read_to_string(run.join("results.csv"))?;
            let reports = parse_table(&text)?;
            reports
                .iter()
                .min_by(|a, b| a.rmse.total_cmp(&b.rmse))
                .map(|r| r.seed)
                .ok_or_else(|| Error::Data("results.csv has no rows".into()))?
        }
    };
    let mut model = Model::load(&run.join(format!("model_seed{seed}.json")))?;
    let prepared = experiment::prepare_data(&cfg)?;
    let (csv, series) = if every {
        experiment::emit_trajectories(&mut model, &prepared, units, cfg.r_early)?
    } else {
        let mut report = mhrul::metrics::evaluate(&mut model, &prepared.test, cfg.r_early)?;
        report.seed = seed;
        let csv = experiment::emit_predictions(&report, units)?;
        let series = units
            .iter()
            .filter_map(|u| report.per_unit.iter().find(|r| r.unit_id == *u))
            .map(|r| experiment::Series {
                unit_id: r.unit_id,
                cycles: vec![r.cycle],
                truth: vec![r.true_rul],
                predicted: vec![r.predicted_rul],
            })
            .collect::<Vec<_>>();
        (csv, series)
    };
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| run.join("units.csv"));
    std::fs::write(&out, csv)?;
    let svg = out.with_extension("svg");
    std::fs::write(&svg, experiment::render_svg(&series, cfg.r_early))?;
    println!("wrote {} and {}", out.display(), svg.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            subset,
            data_dir,
            output_dir,
        } => ingest(&subset, &data_dir, &output_dir),
        Command::Train(args) => train_cmd(&args),
        Command::Grid { exp, grid } => grid_cmd(&exp, grid.as_deref()),
        Command::Report { inputs, format, output } => report_cmd(&inputs, &format, output.as_deref()),
        Command::Predict {
            run,
            units,
            seed,
            every_window,
            output,
        } => predict_cmd(&run, &units, seed, every_window, output.as_deref()),
        Command::Synth {
            subset,
            output_dir,
            train_units,
            test_units,
            seed,
        } => {
            let subset = Subset::parse(&subset)?;
            let ds = data::synthetic_dataset(&SyntheticConfig {
                subset,
                train_units,
                test_units,
                seed,
                ..Default::default()
            });
            ds.write(&output_dir, subset)?;
            println!("wrote {}", output_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
