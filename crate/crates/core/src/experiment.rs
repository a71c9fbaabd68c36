//! Config-driven experiments, result tables and prediction series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMode, ScoreKind};
use crate::data::{self, Prepared, Subset, WindowBatch, DEFAULT_R_EARLY};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, CSV_HEADER};
use crate::model::{build_model, HeadMode, HeadSpec, HeadType, Model, ModelSpec, DEFAULT_TRUNK, DEFAULT_WINDOW};
use crate::train::{train, History, TrainConfig};

/// Model section of a config file; omitted keys take per-head defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Option<HeadMode>,
    pub head_type: Option<HeadType>,
    pub layer_sizes: Option<Vec<usize>>,
    pub conv: Option<crate::model::ConvSpec>,
    pub n_signals: Option<usize>,
    pub trunk_sizes: Option<Vec<usize>>,
    pub window_length: Option<usize>,
    pub seed: Option<u64>,
}

/// Config file as written by a user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub subset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub r_early: Option<f64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub attention: Option<AttentionConfig>,
}

/// Command-line values that replace file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub subset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub mode: Option<String>,
    pub head_type: Option<String>,
    pub layer_sizes: Option<Vec<usize>>,
    pub trunk_sizes: Option<Vec<usize>>,
    pub window_length: Option<usize>,
    pub n_signals: Option<usize>,
    pub score_kind: Option<String>,
    pub attention_mode: Option<String>,
    pub no_attention: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

/// Fully resolved experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub subset: Subset,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub repeats: usize,
    pub r_early: f64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Mirrors `model.head.attention`; kept for readability of written configs.
    pub attention: Option<AttentionConfig>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config file: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Applies overrides and defaults; reports every violation at once.
    pub fn resolve(mut self, o: &Overrides) -> Result<ExperimentConfig> {
        let mut errs = Vec::new();
        let subset_name = o
            .subset
            .clone()
            .or(self.subset.take())
            .unwrap_or_else(|| "FD001".into());
        let subset = Subset::parse(&subset_name).map_err(|e| errs.push(e.to_string())).ok();
        let mode_name = o.mode.clone().or(self.model.mode.map(|m| m.name().to_string()));
        let mode = match mode_name {
            Some(m) => HeadMode::parse(&m).map_err(|e| errs.push(e.to_string())).ok(),
            None => Some(HeadMode::MultiHead),
        };
        let head_type = match o.head_type.clone() {
            Some(h) => HeadType::parse(&h).map_err(|e| errs.push(e.to_string())).ok(),
            None => Some(self.model.head_type.unwrap_or(HeadType::Fnn)),
        };
        let mut attention = self.attention;
        if o.score_kind.is_some() || o.attention_mode.is_some() {
            let mut a = attention.unwrap_or_default();
            if let Some(k) = &o.score_kind {
                match ScoreKind::parse(k) {
                    Ok(k) => a.score_kind = k,
                    Err(e) => errs.push(e.to_string()),
                }
            }
            if let Some(m) = &o.attention_mode {
                match AttentionMode::parse(m) {
                    Ok(m) => a.mode = m,
                    Err(e) => errs.push(e.to_string()),
                }
            }
            attention = Some(a);
        }
        if o.no_attention {
            attention = None;
        }
        let mut train = self.train.unwrap_or_default();
        if let Some(v) = o.epochs {
            train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = o.seed {
            train.seed = v;
        }
        let repeats = o.repeats.or(self.repeats).unwrap_or(1);
        if repeats == 0 {
            errs.push("repeats must be positive".into());
        }
        let r_early = self.r_early.unwrap_or(DEFAULT_R_EARLY);
        if !(r_early > 0.0 && r_early.is_finite()) {
            errs.push("r_early must be positive".into());
        }
        errs.extend(train.violations());
        let (Some(subset), Some(mode), Some(head_type)) = (subset, mode, head_type) else {
            return Err(Error::Config(errs));
        };
        let mut head = HeadSpec::default_for(head_type);
        if let Some(ls) = o.layer_sizes.clone().or(self.model.layer_sizes) {
            head.layer_sizes = ls;
        }
        if self.model.conv.is_some() {
            head.conv = self.model.conv;
        }
        head.attention = attention;
        let n_features = subset.feature_names().len();
        let model = ModelSpec {
            mode,
            head,
            n_signals: o.n_signals.or(self.model.n_signals).unwrap_or(n_features),
            trunk_sizes: o
                .trunk_sizes
                .clone()
                .or(self.model.trunk_sizes)
                .unwrap_or_else(|| DEFAULT_TRUNK.to_vec()),
            window_length: o.window_length.or(self.model.window_length).unwrap_or(DEFAULT_WINDOW),
            seed: o.seed.or(self.model.seed).unwrap_or(train.seed),
        };
        errs.extend(model.violations());
        if model.n_signals != n_features {
            errs.push(format!(
                "model.n_signals is {} but {} provides {n_features} feature columns",
                model.n_signals,
                subset.name()
            ));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(ExperimentConfig {
            subset,
            data_dir: o
                .data_dir
                .clone()
                .or(self.data_dir)
                .unwrap_or_else(|| PathBuf::from("data/CMAPSS")),
            output_dir: o
                .output_dir
                .clone()
                .or(self.output_dir)
                .unwrap_or_else(|| PathBuf::from("runs").join(model.label())),
            repeats,
            r_early,
            attention: model.head.attention,
            model,
            train,
        })
    }
}

impl ExperimentConfig {
    /// The effective config as a file that resolves back to `self`.
    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            subset: Some(self.subset.name().into()),
            data_dir: Some(self.data_dir.clone()),
            output_dir: Some(self.output_dir.clone()),
            repeats: Some(self.repeats),
            r_early: Some(self.r_early),
            model: ModelSection {
                mode: Some(self.model.mode),
                head_type: Some(self.model.head.head_type),
                layer_sizes: Some(self.model.head.layer_sizes.clone()),
                conv: self.model.head.conv,
                n_signals: Some(self.model.n_signals),
                trunk_sizes: Some(self.model.trunk_sizes.clone()),
                window_length: Some(self.model.window_length),
                seed: Some(self.model.seed),
            },
            train: Some(self.train.clone()),
            attention: self.model.head.attention,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serializes")
    }

    pub fn label(&self) -> String {
        self.model.label()
    }
}

/// Outcome of one experiment over all repeats.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub reports: Vec<EvalReport>,
    pub histories: Vec<History>,
    pub models: Vec<Model>,
}

impl ExperimentResult {
    pub fn mean_rmse(&self) -> f64 {
        self.reports.iter().map(|r| r.rmse).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mean_score(&self) -> f64 {
        self.reports.iter().map(|r| r.score).sum::<f64>() / self.reports.len() as f64
    }

    /// Repeat with the lowest RMSE.
    pub fn best(&self) -> &EvalReport {
        self.reports
            .iter()
            .min_by(|a, b| a.rmse.total_cmp(&b.rmse))
            .expect("at least one repeat")
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        for r in &self.reports {
            s.push_str(&r.text_block());
            s.push('\n');
        }
        let best = self.best();
        let _ = writeln!(s, "repeats      {}", self.reports.len());
        let _ = writeln!(s, "mean rmse    {:.4}", self.mean_rmse());
        let _ = writeln!(s, "mean score   {:.4}", self.mean_score());
        let _ = writeln!(s, "best rmse    {:.4} (seed {})", best.rmse, best.seed);
        let _ = writeln!(s, "best score   {:.4}", best.score);
        s
    }
}

/// Loads and prepares the configured subset.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test, truth) = data::load_subset(&cfg.data_dir, cfg.subset)?;
    data::prepare(cfg.subset, &train, &test, truth, cfg.model.window_length, cfg.r_early)
}

/// Trains and evaluates on prepared data; repeat `k` uses seeds offset by `k`.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentResult> {
    if prepared.train.n_signals() != cfg.model.n_signals {
        return Err(Error::config(format!(
            "data has {} feature columns but model.n_signals is {}",
            prepared.train.n_signals(),
            cfg.model.n_signals
        )));
    }
    let mut out = ExperimentResult {
        config: cfg.clone(),
        reports: Vec::new(),
        histories: Vec::new(),
        models: Vec::new(),
    };
    for k in 0..cfg.repeats as u64 {
        let start = Instant::now();
        let mut spec = cfg.model.clone();
        spec.seed = cfg.model.seed + k;
        let tcfg = TrainConfig {
            seed: cfg.train.seed + k,
            ..cfg.train.clone()
        };
        let mut model = build_model(&spec)?;
        let history = train(&mut model, &prepared.train, &tcfg)?;
        let mut report = metrics::evaluate(&mut model, &prepared.test, cfg.r_early)?;
        report.wall_time_s = start.elapsed().as_secs_f64();
        out.reports.push(report);
        out.histories.push(history);
        out.models.push(model);
    }
    Ok(out)
}

/// Full pipeline from files, writing every artifact under `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prepared = prepare_data(cfg)?;
    let result = run_prepared(cfg, &prepared)?;
    write_outputs(&result, &prepared)?;
    Ok(result)
}

/// Writes tables, histories, predictions, checkpoints and the effective config.
pub fn write_outputs(result: &ExperimentResult, prepared: &Prepared) -> Result<()> {
    let dir = &result.config.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), result.config.to_toml())?;
    std::fs::write(dir.join("results.csv"), emit_table(&result.reports, TableFormat::Csv)?)?;
    std::fs::write(
        dir.join("results.md"),
        emit_table(&result.reports, TableFormat::Markdown)?,
    )?;
    std::fs::write(dir.join("summary.txt"), result.summary_text())?;
    let scaler = serde_json::to_string_pretty(&prepared.scaler).expect("scaler serializes");
    std::fs::write(dir.join("scaler.json"), scaler)?;
    let mut timing = String::from("seed,wall_time_s\n");
    for ((r, h), m) in result.reports.iter().zip(&result.histories).zip(&result.models) {
        let seed = r.seed;
        std::fs::write(dir.join(format!("history_seed{seed}.csv")), h.to_csv())?;
        std::fs::write(
            dir.join(format!("predictions_seed{seed}.csv")),
            final_predictions_csv(r),
        )?;
        m.save(&dir.join(format!("model_seed{seed}.json")))?;
        let _ = writeln!(timing, "{seed},{:.3}", r.wall_time_s);
    }
    std::fs::write(dir.join("timing.csv"), timing)?;
    Ok(())
}

fn final_predictions_csv(r: &EvalReport) -> String {
    let mut s = String::from("unit_id,cycle,true_rul,predicted_rul\n");
    for u in &r.per_unit {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", u.unit_id, u.cycle, u.true_rul, u.predicted_rul);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            _ => Err(Error::config(format!("unknown table format '{s}'"))),
        }
    }
}

/// One row per report, in input order.
pub fn emit_table(reports: &[EvalReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Contract("cannot emit a table with no reports".into()));
    }
    let mut s = String::new();
    match format {
        TableFormat::Csv => {
            s.push_str(CSV_HEADER);
            s.push('\n');
            for r in reports {
                s.push_str(&r.csv_row());
                s.push('\n');
            }
        }
        TableFormat::Markdown => {
            s.push_str("| model | seed | RMSE | Score | parameters |\n");
            s.push_str("|---|---:|---:|---:|---:|\n");
            for r in reports {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {} |",
                    r.label, r.seed, r.rmse, r.score, r.param_count
                );
            }
        }
    }
    Ok(s)
}

/// Reads the report rows of a CSV table (per-unit details are not stored).
pub fn parse_table(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header '{CSV_HEADER}'"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            Ok(EvalReport {
                label: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("bad seed"))?,
                rmse: f[2].parse().map_err(|_| bad("bad rmse"))?,
                score: f[3].parse().map_err(|_| bad("bad score"))?,
                param_count: f[4].parse().map_err(|_| bad("bad parameter count"))?,
                spec_digest: f[5].to_string(),
                per_unit: Vec::new(),
                wall_time_s: 0.0,
            })
        })
        .collect()
}

/// Per-unit series from a report: one point per requested unit.
pub fn emit_predictions(report: &EvalReport, unit_ids: &[u32]) -> Result<String> {
    let mut s = String::from("unit_id,cycle,true_rul,predicted_rul\n");
    for &u in unit_ids {
        let r = report
            .per_unit
            .iter()
            .find(|r| r.unit_id == u)
            .ok_or_else(|| Error::Data(format!("unit {u} is not in the report")))?;
        let _ = writeln!(s, "{},{},{:.6},{:.6}", u, r.cycle, r.true_rul, r.predicted_rul);
    }
    Ok(s)
}

/// Whole-trajectory series: a prediction for every suffix window of each unit.
pub fn emit_trajectories(
    model: &mut Model,
    prepared: &Prepared,
    unit_ids: &[u32],
    r_early: f64,
) -> Result<(String, Vec<Series>)> {
    let seq_l = model.spec.window_length;
    let all = data::test_trajectories(&prepared.test_frame, &prepared.truth, seq_l, r_early)?;
    let mut s = String::from("unit_id,cycle,true_rul,predicted_rul\n");
    let mut series = Vec::new();
    for &u in unit_ids {
        let idx: Vec<usize> = (0..all.len()).filter(|&i| all.unit_ids[i] == u).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("unit {u} is not in the test set")));
        }
        let b: WindowBatch = all.gather(&idx);
        let mut pred = model.predict(&b.windows, 256)?;
        metrics::clamp_predictions(&mut pred, r_early);
        for ((c, t), p) in b.end_cycles.iter().zip(&b.targets).zip(&pred) {
            let _ = writeln!(s, "{u},{c},{t:.6},{p:.6}");
        }
        series.push(Series {
            unit_id: u,
            cycles: b.end_cycles.clone(),
            truth: b.targets.clone(),
            predicted: pred,
        });
    }
    Ok((s, series))
}

#[derive(Clone, Debug)]
pub struct Series {
    pub unit_id: u32,
    pub cycles: Vec<u32>,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Minimal SVG line chart of true versus predicted RUL, one panel per unit.
pub fn render_svg(series: &[Series], r_early: f64) -> String {
    let (w, h, pad) = (480.0, 240.0, 36.0);
    let total_h = h * series.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{total_h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    for (k, ser) in series.iter().enumerate() {
        let oy = k as f64 * h;
        let max_c = ser.cycles.iter().copied().max().unwrap_or(1).max(2) as f64;
        let min_c = ser.cycles.iter().copied().min().unwrap_or(1) as f64;
        let span = (max_c - min_c).max(1.0);
        let x = |c: u32| pad + (c as f64 - min_c) / span * (w - 2.0 * pad);
        let y = |v: f64| oy + h - pad - v / r_early * (h - 2.0 * pad);
        let line = |vals: &[f64]| -> String {
            ser.cycles
                .iter()
                .zip(vals)
                .map(|(&c, &v)| format!("{:.1},{:.1}", x(c), y(v)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            s,
            "<rect x=\"{pad}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
            oy + pad,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"{}\">unit {} (RUL vs cycle)</text>",
            oy + pad - 8.0,
            ser.unit_id
        );
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>",
            line(&ser.truth)
        );
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"{}\"/>",
            line(&ser.predicted)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Cartesian product of head kinds, modes and attention settings over a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub heads: Vec<HeadType>,
    pub modes: Vec<HeadMode>,
    /// `none`, or `soft:<score>` / `hard:<score>`.
    pub attention: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            heads: vec![
                HeadType::Fnn,
                HeadType::Lstm,
                HeadType::Bilstm,
                HeadType::Cnn,
                HeadType::Cnlstm,
            ],
            modes: vec![HeadMode::SingleHead, HeadMode::MultiHead],
            attention: vec!["none".into(), "soft:mul_eq25".into(), "hard:mul_eq25".into()],
        }
    }
}

pub fn parse_attention_variant(s: &str) -> Result<Option<AttentionConfig>> {
    if s == "none" {
        return Ok(None);
    }
    let (mode, kind) = s
        .split_once(':')
        .ok_or_else(|| Error::config(format!("attention variant '{s}' must be none or mode:score")))?;
    Ok(Some(AttentionConfig::new(
        ScoreKind::parse(kind)?,
        AttentionMode::parse(mode)?,
    )))
}

impl GridSpec {
    /// One config per grid point, each with its own output directory.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        let variants = self
            .attention
            .iter()
            .map(|a| parse_attention_variant(a))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &h in &self.heads {
            for &m in &self.modes {
                for a in &variants {
                    let mut cfg = base.clone();
                    let mut head = HeadSpec::default_for(h);
                    head.attention = a.map(|a| AttentionConfig {
                        regularizer_weight: base.attention.map_or(a.regularizer_weight, |b| b.regularizer_weight),
                        units: base.attention.map_or(a.units, |b| b.units),
                        ..a
                    });
                    cfg.model.mode = m;
                    cfg.model.head = head;
                    cfg.attention = cfg.model.head.attention;
                    cfg.model.validate()?;
                    cfg.output_dir = base.output_dir.join(cfg.model.label());
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticConfig};

    fn tiny(dir: &Path) -> ExperimentConfig {
        let ds = synthetic_dataset(&SyntheticConfig {
            train_units: 3,
            test_units: 3,
            min_life: 100,
            max_life: 100,
            ..Default::default()
        });
        ds.write(&dir.join("data"), Subset::Fd001).unwrap();
        let o = Overrides {
            data_dir: Some(dir.join("data")),
            output_dir: Some(dir.join("out")),
            window_length: Some(10),
            layer_sizes: Some(vec![4]),
            trunk_sizes: Some(vec![4, 1]),
            epochs: Some(2),
            batch_size: Some(32),
            ..Default::default()
        };
        ConfigFile::default().resolve(&o).unwrap()
    }

    #[test]
    fn smoke_run_is_finite_and_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let a = run_experiment(&cfg).unwrap();
        assert!(a.reports[0].rmse.is_finite() && a.reports[0].score.is_finite());
        assert_eq!(a.reports[0].per_unit.len(), 3);
        let table = std::fs::read(cfg.output_dir.join("results.csv")).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.reports[0].rmse, b.reports[0].rmse);
        assert_eq!(a.reports[0].score, b.reports[0].score);
        assert_eq!(table, std::fs::read(cfg.output_dir.join("results.csv")).unwrap());
    }

    #[test]
    fn effective_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let back = ConfigFile::from_toml(&cfg.to_toml())
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn signal_count_mismatch_is_config_error() {
        let o = Overrides {
            n_signals: Some(19),
            ..Default::default()
        };
        assert!(matches!(ConfigFile::default().resolve(&o), Err(Error::Config(_))));
        let o = Overrides {
            subset: Some("FD003".into()),
            ..Default::default()
        };
        assert_eq!(ConfigFile::default().resolve(&o).unwrap().model.n_signals, 19);
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "[model]\nhead_type = \"fnn\"\nlayer_sizes = []\n[train]\nepochs = 0\nbatch_size = 1\n";
        match ConfigFile::from_toml(text).unwrap().resolve(&Overrides::default()) {
            Err(Error::Config(v)) => assert!(v.len() >= 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ConfigFile::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_file() {
        let f = ConfigFile::from_toml("subset = \"FD003\"\n[train]\nepochs = 5\n").unwrap();
        let o = Overrides {
            epochs: Some(7),
            ..Default::default()
        };
        let c = f.resolve(&o).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.subset, Subset::Fd003);
    }

    fn report(label: &str, rmse: f64) -> EvalReport {
        EvalReport::from_predictions(
            label,
            &[1],
            &[50],
            &[10.0],
            &[10.0 + rmse],
            7,
            0,
            metrics::digest(label),
        )
        .unwrap()
    }

    #[test]
    fn tables() {
        assert!(matches!(emit_table(&[], TableFormat::Csv), Err(Error::Contract(_))));
        let one = emit_table(&[report("a", 1.0)], TableFormat::Csv).unwrap();
        assert_eq!(one.lines().count(), 2);
        let rs = [report("a", 1.23456789), report("b", 2.5)];
        let csv = emit_table(&rs, TableFormat::Csv).unwrap();
        let md = emit_table(&rs, TableFormat::Markdown).unwrap();
        let parsed = parse_table(&csv).unwrap();
        assert_eq!(parsed[0].label, "a");
        assert_eq!(parsed[1].label, "b");
        for (line, r) in md.lines().skip(2).zip(&parsed) {
            let cells: Vec<&str> = line.split('|').map(str::trim).collect();
            let rmse: f64 = cells[3].parse().unwrap();
            let score: f64 = cells[4].parse().unwrap();
            assert!((rmse - r.rmse).abs() < 5e-5);
            assert!((score - r.score).abs() < 5e-5);
        }
    }

    #[test]
    fn predictions_for_known_units_only() {
        let r = report("a", 0.0);
        let csv = emit_predictions(&r, &[1]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "1,50,10.000000,10.000000");
        assert!(matches!(emit_predictions(&r, &[99]), Err(Error::Data(_))));
    }

    #[test]
    fn grid_expands_cartesian() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny(dir.path());
        let g = GridSpec {
            heads: vec![HeadType::Fnn, HeadType::Cnn],
            modes: vec![HeadMode::MultiHead],
            attention: vec!["none".into(), "hard:mul_eq25".into()],
        };
        let cfgs = g.expand(&base).unwrap();
        assert_eq!(cfgs.len(), 4);
        assert!(cfgs[1].output_dir.ends_with("multi_head-fnn+hard-mul_eq25"));
        assert!(parse_attention_variant("loud:dot").is_err());
    }
}
