//! CMAPSS-format parsing, feature selection, scaling and windowing.

mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{synthetic_dataset, SyntheticConfig, SyntheticDataset};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_COLUMNS: usize = 26;
pub const DEFAULT_R_EARLY: f64 = 130.0;

/// One row of a CMAPSS file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub settings: [f64; 3],
    pub sensors: [f64; 21],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "FD001")]
    Fd001,
    #[serde(rename = "FD003")]
    Fd003,
}

impl Subset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" => Ok(Subset::Fd001),
            "FD003" => Ok(Subset::Fd003),
            _ => Err(Error::config(format!("unknown subset '{s}' (expected FD001 or FD003)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::Fd001 => "FD001",
            Subset::Fd003 => "FD003",
        }
    }

    /// 1-based sensor numbers removed before modelling.
    pub fn dropped_sensors(self) -> &'static [usize] {
        match self {
            Subset::Fd001 => &[1, 5, 6, 10, 16, 18, 19],
            Subset::Fd003 => &[1, 5, 16, 18, 19],
        }
    }

    /// Model input columns, in order.
    pub fn feature_names(self) -> Vec<String> {
        let mut names = vec!["cycle".to_string(), "setting1".into(), "setting2".into()];
        names.extend(
            (1..=21)
                .filter(|s| !self.dropped_sensors().contains(s))
                .map(|s| format!("s{s}")),
        );
        names
    }

    pub fn train_file(self) -> String {
        format!("train_{}.txt", self.name())
    }

    pub fn test_file(self) -> String {
        format!("test_{}.txt", self.name())
    }

    pub fn truth_file(self) -> String {
        format!("RUL_{}.txt", self.name())
    }
}

fn parse_field(tok: &str, line: usize, col: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("column {col}: '{tok}' is not a number"),
    })
}

fn parse_id(v: f64, line: usize, what: &str) -> Result<u32> {
    if v.fract() != 0.0 || v < 1.0 || v > u32::MAX as f64 {
        return Err(Error::Parse {
            line,
            message: format!("{what} must be a positive integer, got {v}"),
        });
    }
    Ok(v as u32)
}

/// Parses CMAPSS text; rows come back ordered by unit, then cycle.
pub fn parse_cmapss_str(text: &str) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.len() != N_COLUMNS {
            return Err(Error::Parse {
                line,
                message: format!("expected {N_COLUMNS} columns, found {}", toks.len()),
            });
        }
        let mut vals = [0.0; N_COLUMNS];
        for (c, t) in toks.iter().enumerate() {
            vals[c] = parse_field(t, line, c + 1)?;
        }
        let mut settings = [0.0; 3];
        settings.copy_from_slice(&vals[2..5]);
        let mut sensors = [0.0; 21];
        sensors.copy_from_slice(&vals[5..]);
        out.push(RawRecord {
            unit_id: parse_id(vals[0], line, "unit id")?,
            cycle: parse_id(vals[1], line, "cycle")?,
            settings,
            sensors,
        });
    }
    out.sort_by_key(|r| (r.unit_id, r.cycle));
    Ok(out)
}

pub fn parse_cmapss(path: &Path) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_cmapss_str(&text)
}

/// One integer RUL per line.
pub fn parse_truth_str(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_field(l.trim(), i + 1, 1))
        .collect()
}

pub fn parse_truth(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_truth_str(&text)
}

/// Selected feature columns plus unit/cycle metadata, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFrame {
    pub subset: Subset,
    pub columns: Vec<String>,
    pub unit_ids: Vec<u32>,
    pub cycles: Vec<u32>,
    /// `rows × columns.len()`.
    pub values: Vec<f64>,
}

impl FeatureFrame {
    pub fn n_rows(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.n_features();
        &self.values[i * f..(i + 1) * f]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.n_features()).copied()
    }

    /// `(unit_id, first_row, row_count)` in row order.
    pub fn units(&self) -> Vec<(u32, usize, usize)> {
        let mut out: Vec<(u32, usize, usize)> = Vec::new();
        for (i, &u) in self.unit_ids.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == u => last.2 += 1,
                _ => out.push((u, i, 1)),
            }
        }
        out
    }

    /// Per-column mean, variance (population), min and max as CSV.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("column,mean,variance,min,max\n");
        let n = self.n_rows() as f64;
        for (j, name) in self.columns.iter().enumerate() {
            let mean = self.column(j).sum::<f64>() / n;
            let var = self.column(j).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let min = self.column(j).fold(f64::INFINITY, f64::min);
            let max = self.column(j).fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(s, "{name},{mean},{var},{min},{max}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("unit_id,cycle,{}\n", self.columns.join(","));
        for i in 0..self.n_rows() {
            let _ = write!(s, "{},{}", self.unit_ids[i], self.cycles[i]);
            for v in self.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

fn record_value(r: &RawRecord, name: &str) -> f64 {
    match name {
        "cycle" => r.cycle as f64,
        "setting1" => r.settings[0],
        "setting2" => r.settings[1],
        "setting3" => r.settings[2],
        s => r.sensors[s[1..].parse::<usize>().expect("sensor column") - 1],
    }
}

/// Keeps the subset's model inputs. The cycle index is one of them.
pub fn select_features(records: &[RawRecord], subset: Subset) -> FeatureFrame {
    let columns = subset.feature_names();
    let mut values = Vec::with_capacity(records.len() * columns.len());
    for r in records {
        values.extend(columns.iter().map(|c| record_value(r, c)));
    }
    FeatureFrame {
        subset,
        columns,
        unit_ids: records.iter().map(|r| r.unit_id).collect(),
        cycles: records.iter().map(|r| r.cycle).collect(),
        values,
    }
}

/// Every raw column (settings and all 21 sensors), for exploratory summaries.
pub fn all_columns(records: &[RawRecord], subset: Subset) -> FeatureFrame {
    let mut columns = vec!["setting1".to_string(), "setting2".into(), "setting3".into()];
    columns.extend((1..=21).map(|s| format!("s{s}")));
    let mut values = Vec::with_capacity(records.len() * columns.len());
    for r in records {
        values.extend_from_slice(&r.settings);
        values.extend_from_slice(&r.sensors);
    }
    FeatureFrame {
        subset,
        columns,
        unit_ids: records.iter().map(|r| r.unit_id).collect(),
        cycles: records.iter().map(|r| r.cycle).collect(),
        values,
    }
}

/// Per-column min/max fitted on training rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn is_fitted(&self) -> bool {
        !self.columns.is_empty()
    }
}

pub fn fit_minmax(frame: &FeatureFrame) -> Result<MinMaxScaler> {
    if frame.n_rows() == 0 {
        return Err(Error::Data("cannot fit a scaler on an empty frame".into()));
    }
    let f = frame.n_features();
    Ok(MinMaxScaler {
        columns: frame.columns.clone(),
        min: (0..f).map(|j| frame.column(j).fold(f64::INFINITY, f64::min)).collect(),
        max: (0..f)
            .map(|j| frame.column(j).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    })
}

/// `(x − min)/(max − min)`; constant training columns map to 0.
pub fn apply_minmax(frame: &FeatureFrame, scaler: &MinMaxScaler) -> Result<FeatureFrame> {
    if !scaler.is_fitted() {
        return Err(Error::State("min-max scaler applied before fitting".into()));
    }
    if scaler.columns != frame.columns {
        return Err(Error::dim(format!(
            "scaler columns {:?} do not match frame columns {:?}",
            scaler.columns, frame.columns
        )));
    }
    let f = frame.n_features();
    let values = frame
        .values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let j = k % f;
            let span = scaler.max[j] - scaler.min[j];
            if span == 0.0 {
                0.0
            } else {
                (v - scaler.min[j]) / span
            }
        })
        .collect();
    Ok(FeatureFrame {
        values,
        ..frame.clone()
    })
}

/// `min(last_cycle − cycle, r_early)` for every row.
pub fn piecewise_rul(frame: &FeatureFrame, r_early: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frame.n_rows());
    for (_, start, len) in frame.units() {
        let last = frame.cycles[start + len - 1] as f64;
        out.extend((start..start + len).map(|i| (last - frame.cycles[i] as f64).min(r_early)));
    }
    out
}

/// Model-ready windows `[N×Seq_l×C]` with one target per window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub windows: Tensor,
    pub targets: Vec<f64>,
    pub unit_ids: Vec<u32>,
    /// Cycle of the window's last row.
    pub end_cycles: Vec<u32>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn n_signals(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Rows `idx` gathered into a new batch.
    pub fn gather(&self, idx: &[usize]) -> WindowBatch {
        let row = self.seq_len() * self.n_signals();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.windows.data()[i * row..(i + 1) * row]);
        }
        WindowBatch {
            windows: Tensor::batch(vec![idx.len(), self.seq_len(), self.n_signals()], data).expect("consistent gather"),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            unit_ids: idx.iter().map(|&i| self.unit_ids[i]).collect(),
            end_cycles: idx.iter().map(|&i| self.end_cycles[i]).collect(),
        }
    }
}

fn check_seq(seq_l: usize) -> Result<()> {
    if seq_l == 0 {
        return Err(Error::config("window length must be at least 1"));
    }
    Ok(())
}

/// Every run of `seq_l` consecutive rows inside a unit; short units yield none.
pub fn generate_windows(frame: &FeatureFrame, seq_l: usize, targets: &[f64]) -> Result<WindowBatch> {
    check_seq(seq_l)?;
    if targets.len() != frame.n_rows() {
        return Err(Error::Data(format!(
            "{} targets for {} rows",
            targets.len(),
            frame.n_rows()
        )));
    }
    let f = frame.n_features();
    let (mut data, mut t, mut units, mut ends) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (u, start, len) in frame.units() {
        if len < seq_l {
            continue;
        }
        for s in start..=start + len - seq_l {
            let last = s + seq_l - 1;
            data.extend_from_slice(&frame.values[s * f..(last + 1) * f]);
            t.push(targets[last]);
            units.push(u);
            ends.push(frame.cycles[last]);
        }
    }
    let n = t.len();
    Ok(WindowBatch {
        windows: Tensor::batch(vec![n, seq_l, f], data)?,
        targets: t,
        unit_ids: units,
        end_cycles: ends,
    })
}

/// The suffix window of one unit, left-padded by repeating its first row.
fn suffix_window(frame: &FeatureFrame, start: usize, end: usize, seq_l: usize, out: &mut Vec<f64>) {
    let f = frame.n_features();
    let len = end - start;
    if len >= seq_l {
        out.extend_from_slice(&frame.values[(end - seq_l) * f..end * f]);
    } else {
        for _ in 0..seq_l - len {
            out.extend_from_slice(frame.row(start));
        }
        out.extend_from_slice(&frame.values[start * f..end * f]);
    }
}

/// One window per test unit (its last `seq_l` cycles) with capped truth targets.
pub fn test_windows(frame: &FeatureFrame, truth: &[f64], seq_l: usize, r_early: f64) -> Result<WindowBatch> {
    check_seq(seq_l)?;
    let units = frame.units();
    if truth.len() != units.len() {
        return Err(Error::Data(format!(
            "truth file has {} entries but the test set has {} units",
            truth.len(),
            units.len()
        )));
    }
    let mut data = Vec::with_capacity(units.len() * seq_l * frame.n_features());
    for &(_, start, len) in &units {
        suffix_window(frame, start, start + len, seq_l, &mut data);
    }
    Ok(WindowBatch {
        windows: Tensor::new(vec![units.len(), seq_l, frame.n_features()], data)?,
        targets: truth.iter().map(|&r| r.min(r_early)).collect(),
        unit_ids: units.iter().map(|u| u.0).collect(),
        end_cycles: units.iter().map(|&(_, s, l)| frame.cycles[s + l - 1]).collect(),
    })
}

/// Windows ending at every cycle of the test units, for whole-trajectory
/// plots. Targets are `min(truth + cycles remaining in the file, r_early)`.
pub fn test_trajectories(frame: &FeatureFrame, truth: &[f64], seq_l: usize, r_early: f64) -> Result<WindowBatch> {
    check_seq(seq_l)?;
    let units = frame.units();
    if truth.len() != units.len() {
        return Err(Error::Data(format!(
            "truth file has {} entries but the test set has {} units",
            truth.len(),
            units.len()
        )));
    }
    let (mut data, mut t, mut ids, mut ends) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, &(u, start, len)) in units.iter().enumerate() {
        let last = frame.cycles[start + len - 1] as f64;
        for e in start + 1..=start + len {
            suffix_window(frame, start, e, seq_l, &mut data);
            let c = frame.cycles[e - 1];
            t.push((truth[k] + last - c as f64).min(r_early));
            ids.push(u);
            ends.push(c);
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(vec![t.len(), seq_l, frame.n_features()], data)?,
        targets: t,
        unit_ids: ids,
        end_cycles: ends,
    })
}

/// Per-unit row counts of a record list.
pub fn unit_lengths(records: &[RawRecord]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.unit_id).or_insert(0) += 1;
    }
    m
}

/// Fully prepared train and test windows plus the fitted scaler.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: WindowBatch,
    pub test: WindowBatch,
    pub scaler: MinMaxScaler,
    pub train_frame: FeatureFrame,
    pub test_frame: FeatureFrame,
    pub truth: Vec<f64>,
}

/// Train/test pipeline on already-parsed records.
pub fn prepare(
    subset: Subset,
    train: &[RawRecord],
    test: &[RawRecord],
    truth: Vec<f64>,
    seq_l: usize,
    r_early: f64,
) -> Result<Prepared> {
    let train_raw = select_features(train, subset);
    let scaler = fit_minmax(&train_raw)?;
    let train_frame = apply_minmax(&train_raw, &scaler)?;
    let test_frame = apply_minmax(&select_features(test, subset), &scaler)?;
    let targets = piecewise_rul(&train_frame, r_early);
    let train_w = generate_windows(&train_frame, seq_l, &targets)?;
    if train_w.is_empty() {
        return Err(Error::Data(format!("no training unit has at least {seq_l} cycles")));
    }
    let test_w = test_windows(&test_frame, &truth, seq_l, r_early)?;
    Ok(Prepared {
        train: train_w,
        test: test_w,
        scaler,
        train_frame,
        test_frame,
        truth,
    })
}

/// Reads `train_FDxxx.txt`, `test_FDxxx.txt` and `RUL_FDxxx.txt` from `dir`.
pub fn load_subset(dir: &Path, subset: Subset) -> Result<(Vec<RawRecord>, Vec<RawRecord>, Vec<f64>)> {
    let files = [subset.train_file(), subset.test_file(), subset.truth_file()];
    let missing: Vec<String> = files
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data files not found: {}", missing.join(", ")),
        )));
    }
    Ok((
        parse_cmapss(&dir.join(&files[0]))?,
        parse_cmapss(&dir.join(&files[1]))?,
        parse_truth(&dir.join(&files[2]))?,
    ))
}
