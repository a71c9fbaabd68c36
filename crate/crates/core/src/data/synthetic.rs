use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RawRecord, Subset};
use crate::error::Result;

/// Knobs of the CMAPSS-like generator.
#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub subset: Subset,
    pub train_units: usize,
    pub test_units: usize,
    pub min_life: u32,
    pub max_life: u32,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            subset: Subset::Fd001,
            train_units: 20,
            test_units: 10,
            min_life: 130,
            max_life: 220,
            noise: 0.02,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub train: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
    pub truth: Vec<f64>,
}

impl SyntheticDataset {
    fn to_text(records: &[RawRecord]) -> String {
        let mut s = String::new();
        for r in records {
            let _ = write!(s, "{} {}", r.unit_id, r.cycle);
            for v in r.settings.iter().chain(&r.sensors) {
                let _ = write!(s, " {v:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes the three files under the standard CMAPSS names.
    pub fn write(&self, dir: &Path, subset: Subset) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(subset.train_file()), Self::to_text(&self.train))?;
        std::fs::write(dir.join(subset.test_file()), Self::to_text(&self.test))?;
        let truth: String = self.truth.iter().map(|t| format!("{t}\n")).collect();
        std::fs::write(dir.join(subset.truth_file()), truth)?;
        Ok(())
    }
}

fn unit(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, id: u32, life: u32, keep: u32) -> Vec<RawRecord> {
    let dropped = cfg.subset.dropped_sensors();
    let offsets: Vec<f64> = (0..21).map(|_| rng.gen_range(-0.05..0.05)).collect();
    (1..=keep)
        .map(|c| {
            // health decays exponentially toward failure at `life`
            let wear = ((c as f64 - life as f64) / 40.0).exp();
            let mut sensors = [0.0; 21];
            for (k, s) in sensors.iter_mut().enumerate() {
                *s = if dropped.contains(&(k + 1)) {
                    100.0 + k as f64
                } else {
                    let dir = if k % 3 == 0 { -1.0 } else { 1.0 };
                    10.0 * (k + 1) as f64 + offsets[k] + dir * wear + cfg.noise * rng.gen_range(-1.0..1.0)
                };
            }
            RawRecord {
                unit_id: id,
                cycle: c,
                settings: [rng.gen_range(-0.002..0.002), rng.gen_range(-0.0003..0.0003), 100.0],
                sensors,
            }
        })
        .collect()
}

/// Run-to-failure training units and truncated test units with known RUL.
pub fn synthetic_dataset(cfg: &SyntheticConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    for u in 1..=cfg.train_units as u32 {
        let life = rng.gen_range(cfg.min_life..=cfg.max_life);
        train.extend(unit(&mut rng, cfg, u, life, life));
    }
    let (mut test, mut truth) = (Vec::new(), Vec::new());
    for u in 1..=cfg.test_units as u32 {
        let life = rng.gen_range(cfg.min_life..=cfg.max_life);
        let keep = rng.gen_range(life / 4..life);
        test.extend(unit(&mut rng, cfg, u, life, keep));
        truth.push((life - keep) as f64);
    }
    SyntheticDataset { train, test, truth }
}
