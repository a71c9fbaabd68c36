//! Acceptance checks; prints one PASS/FAIL line per criterion.
//!
//! Real-data checks read `CMAPSS_DATA_DIR` (default `<workspace>/data/CMAPSS`).
//! Without the files they print FAIL with the reason but do not fail the
//! process unless `MHRUL_ACCEPTANCE_STRICT=1`.


use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use mhrul::attention::{attention_weights, AttentionConfig, AttentionMode, ScoreKind, SelfAttentionLayer};
use mhrul::data::{self, Prepared, Subset, SyntheticConfig};
use mhrul::experiment::{
    emit_table, run_experiment, run_prepared, ConfigFile, ExperimentConfig, Overrides, TableFormat,
};
use mhrul::layers::init::InitRng;
use mhrul::metrics::{rmse, score};
use mhrul::model::{build_model, count_params, HeadMode, HeadSpec, HeadType, ModelSpec};
use mhrul::tensor::ParamStore;
use mhrul::{Tape, Tensor};
use rand::{Rng, SeedableRng};

enum Outcome {
    Pass(String),
    Fail(String),
    NoData(String),
}

fn data_dir() -> PathBuf {
    std::env::var_os("CMAPSS_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/CMAPSS"))
}

type Raw = (Vec<data::RawRecord>, Vec<data::RawRecord>, Vec<f64>);

fn real(subset: Subset) -> Result<Raw, Outcome> {
    data::load_subset(&data_dir(), subset).map_err(|e| Outcome::NoData(e.to_string()))
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let suite: [(&str, fn()); 10] = [
        ("dense", gradients::check_dense_layer),
        ("srnn", gradients::check_srnn_cell),
        ("gru", gradients::check_gru_cell),
        ("lstm", gradients::check_lstm_cell),
        ("bilstm", gradients::check_bidirectional_lstm),
        ("conv1d", gradients::check_conv1d),
        ("batch-norm", gradients::check_batch_norm_training_mode),
        ("attention", gradients::check_self_attention_soft),
        ("regularizer", gradients::check_attention_regularizer_term),
        ("models", gradients::check_whole_models),
    ];
    let failed: Vec<&str> = suite
        .iter()
        .filter(|(_, f)| panic::catch_unwind(*f).is_err())
        .map(|(n, _)| *n)
        .collect();
    let took = start.elapsed();
    let detail = format!(
        "{} groups, 5 seeds, rel err < 1e-4, {:.1} s",
        suite.len(),
        took.as_secs_f64()
    );
    if failed.is_empty() {
        verdict(took < Duration::from_secs(120), detail)
    } else {
        Outcome::Fail(format!("{detail}; failed: {}", failed.join(", ")))
    }
}

fn metric_oracles() -> Outcome {
    let e1 = std::f64::consts::E - 1.0;
    let truth = 57.0;
    let late = score(&[truth + 10.0], &[truth]).unwrap();
    let early = score(&[truth - 13.0], &[truth]).unwrap();
    let asym = (1..=50).all(|d| {
        let d = d as f64;
        score(&[truth + d], &[truth]).unwrap() > score(&[truth - d], &[truth]).unwrap()
    });
    let r = rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
    let ok = (late - e1).abs() <= 1e-12 && (early - e1).abs() <= 1e-12 && asym && (r - 2.5f64.sqrt()).abs() <= 1e-12;
    verdict(
        ok,
        format!(
            "late {:.3e}, early {:.3e} off e-1; asymmetry d=1..50 {asym}; rmse off sqrt(2.5) by {:.1e}",
            (late - e1).abs(),
            (early - e1).abs(),
            (r - 2.5f64.sqrt()).abs()
        ),
    )
}

fn pipeline_on_real_files() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for subset in [Subset::Fd001, Subset::Fd003] {
        let (train, test, truth) = match real(subset) {
            Ok(d) => d,
            Err(o) => return o,
        };
        let prepared = match data::prepare(subset, &train, &test, truth, 90, 130.0) {
            Ok(p) => p,
            Err(e) => return Outcome::Fail(format!("{}: {e}", subset.name())),
        };
        let lengths = data::unit_lengths(&train);
        let min_len = lengths.values().copied().min().unwrap_or(0);
        let expected: usize = lengths.values().map(|&l| l.saturating_sub(89)).sum();
        let targets = data::piecewise_rul(&prepared.train_frame, 130.0);
        let in_range = targets.iter().all(|t| (0.0..=130.0).contains(t));
        let ends_at_zero = prepared
            .train_frame
            .units()
            .iter()
            .all(|&(_, start, len)| targets[start + len - 1] == 0.0);
        let cols = prepared.train_frame.n_features();
        if subset == Subset::Fd001 && cols != 17 {
            ok = false;
        }
        ok &= min_len > 120 && in_range && ends_at_zero && prepared.train.len() == expected;
        notes.push(format!(
            "{}: {cols} columns, min length {min_len}, targets in range {in_range}, final 0 {ends_at_zero}, windows {}/{expected}",
            subset.name(),
            prepared.train.len()
        ));
    }
    verdict(ok, notes.join("; "))
}

fn attention_properties() -> Outcome {
    let mut rng = InitRng::seed_from_u64(2024);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(1..=12);
        for _ in 0..rows {
            let s: Vec<f64> = (0..cols).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let w = attention_weights(&Tensor::vector(&s)).unwrap();
            worst_sum = worst_sum.max((w.sum() - 1.0).abs());
        }
    }

    let mut hard_ok = true;
    let mut worst_mean = 0.0f64;
    for kind in ScoreKind::ALL {
        for seed in 0..20u64 {
            let (t, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let x = Tensor::new(
                vec![2, t, d],
                (0..2 * t * d).map(|_| rng.gen_range(0.05..1.0)).collect(),
            )
            .unwrap();

            let mut store = ParamStore::new();
            let mut lrng = InitRng::seed_from_u64(seed);
            let hard = SelfAttentionLayer::new(
                &mut store,
                &mut lrng,
                "h",
                d,
                AttentionConfig::new(kind, AttentionMode::Hard),
            );
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (ctx, _) = hard.forward(&mut tape, &store, xv).unwrap();
            let c = tape.value(ctx).data();
            for b in 0..2 {
                for r in 0..t {
                    let out = &c[(b * t + r) * d..(b * t + r + 1) * d];
                    hard_ok &= (0..t).any(|s| &x.data()[(b * t + s) * d..(b * t + s + 1) * d] == out);
                }
            }

            // zeroed parameters give equal scores for the parametrized kinds
            if matches!(kind, ScoreKind::Dot | ScoreKind::ScaledDot | ScoreKind::ContentBased) {
                continue;
            }
            let mut store = ParamStore::new();
            let soft = SelfAttentionLayer::new(
                &mut store,
                &mut lrng,
                "s",
                d,
                AttentionConfig::new(kind, AttentionMode::Soft),
            );
            soft.zero_params(&mut store);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (ctx, _) = soft.forward(&mut tape, &store, xv).unwrap();
            let c = tape.value(ctx).data();
            for b in 0..2 {
                for j in 0..d {
                    let mean = (0..t).map(|s| x.data()[(b * t + s) * d + j]).sum::<f64>() / t as f64;
                    for r in 0..t {
                        worst_mean = worst_mean.max((c[(b * t + r) * d + j] - mean).abs());
                    }
                }
            }
        }
    }
    verdict(
        worst_sum <= 1e-9 && hard_ok && worst_mean <= 1e-12,
        format!("row sum err {worst_sum:.1e}; hard rows are inputs {hard_ok}; uniform mean err {worst_mean:.1e}"),
    )
}

fn real_config(mode: &str, seed: u64, out: &std::path::Path) -> ExperimentConfig {
    ConfigFile::default()
        .resolve(&Overrides {
            subset: Some("FD001".into()),
            data_dir: Some(data_dir()),
            output_dir: Some(out.to_path_buf()),
            mode: Some(mode.into()),
            head_type: Some("fnn".into()),
            repeats: Some(3),
            seed: Some(seed),
            ..Default::default()
        })
        .unwrap()
}

fn load_fd001(cfg: &ExperimentConfig) -> Result<Prepared, Outcome> {
    mhrul::experiment::prepare_data(cfg).map_err(|e| Outcome::NoData(e.to_string()))
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = real_config("multi_head", 0, tmp.path());
    let prepared = match load_fd001(&cfg) {
        Ok(p) => p,
        Err(o) => return o,
    };
    let start = Instant::now();
    let r = match run_prepared(&cfg, &prepared) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let took = start.elapsed();
    let best = r.best();
    let best_score = r.reports.iter().map(|x| x.score).fold(f64::INFINITY, f64::min);
    verdict(
        best.rmse <= 18.0 && best_score <= 800.0 && took < Duration::from_secs(30 * 60),
        format!(
            "best of 3 seeds: rmse {:.3}, score {:.2}; {} epochs in {:.0} s",
            best.rmse,
            best_score,
            cfg.train.epochs,
            took.as_secs_f64()
        ),
    )
}

fn directional() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let probe = real_config("multi_head", 0, tmp.path());
    let prepared = match load_fd001(&probe) {
        Ok(p) => p,
        Err(o) => return o,
    };
    let mut attempts = Vec::new();
    // one re-run with fresh seeds is permitted
    for seed in [0u64, 3] {
        let multi = run_prepared(&real_config("multi_head", seed, tmp.path()), &prepared);
        let mut single_cfg = real_config("single_head", seed, tmp.path());
        single_cfg.model.trunk_sizes = probe.model.trunk_sizes.clone();
        let single = run_prepared(&single_cfg, &prepared);
        let (multi, single) = match (multi, single) {
            (Ok(m), Ok(s)) => (m, s),
            (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
        };
        let mut reports = multi.reports.clone();
        reports.extend(single.reports.clone());
        println!("{}", emit_table(&reports, TableFormat::Markdown).unwrap());
        let won = multi.mean_rmse() < single.mean_rmse();
        attempts.push(format!(
            "seeds {seed}..{}: multi {:.3} vs single {:.3}",
            seed + 2,
            multi.mean_rmse(),
            single.mean_rmse()
        ));
        if won {
            return Outcome::Pass(attempts.join("; "));
        }
    }
    Outcome::Fail(attempts.join("; "))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let subset = Subset::Fd001;
    let dir = tmp.path().join("data");
    data::synthetic_dataset(&SyntheticConfig {
        subset,
        train_units: 8,
        test_units: 4,
        ..Default::default()
    })
    .write(&dir, subset)
    .unwrap();
    let mut tables = Vec::new();
    for run in 0..2 {
        let cfg = ConfigFile::default()
            .resolve(&Overrides {
                data_dir: Some(dir.clone()),
                output_dir: Some(tmp.path().join(format!("run{run}"))),
                head_type: Some("fnn".into()),
                layer_sizes: Some(vec![4]),
                window_length: Some(30),
                score_kind: Some("mul_eq25".into()),
                epochs: Some(2),
                repeats: Some(2),
                ..Default::default()
            })
            .unwrap();
        if let Err(e) = run_experiment(&cfg) {
            return Outcome::Fail(e.to_string());
        }
        let read = |f: &str| std::fs::read(cfg.output_dir.join(f)).unwrap();
        tables.push((read("results.csv"), read("results.md"), read("history_seed0.csv")));
    }
    verdict(
        tables[0] == tables[1],
        "two runs of a multi-head attention FNN config (synthetic FD001 files): results.csv, results.md and history byte-identical".into(),
    )
}

fn parameter_counting() -> Outcome {
    let single = |ht: HeadType, n: usize, t: usize, sizes: Vec<usize>| {
        let mut head = HeadSpec::default_for(ht);
        head.layer_sizes = sizes;
        let mut s = ModelSpec::new(HeadMode::SingleHead, head, n);
        s.window_length = t;
        s.trunk_sizes = vec![1];
        build_model(&s).unwrap()
    };
    // dense 3 -> 2 is a one-layer FNN head over a single 3-signal step
    let walk = |m: &mhrul::model::Model, ids: Vec<mhrul::tensor::ParamId>| -> usize {
        ids.into_iter().map(|id| m.store.get(id).numel()).sum::<usize>()
    };
    let dense = single(HeadType::Fnn, 3, 1, vec![2]);
    let lstm = single(HeadType::Lstm, 2, 5, vec![3]);
    let dense_head = count_params(&dense) - walk(&dense, dense.trunk_param_ids());
    let lstm_head = count_params(&lstm) - walk(&lstm, lstm.trunk_param_ids());

    let mut totals_ok = true;
    for ht in HeadType::ALL {
        if ht == HeadType::San {
            continue;
        }
        let mut head = HeadSpec::default_for(ht);
        head.layer_sizes = vec![4];
        let mut s = ModelSpec::new(HeadMode::MultiHead, head, 5);
        s.window_length = 12;
        let m = build_model(&s).unwrap();
        let per_head = m.heads()[0].param_count();
        totals_ok &= count_params(&m) == m.n_heads() * per_head + walk(&m, m.trunk_param_ids());
    }
    verdict(
        dense_head == 8 && lstm_head == 72 && totals_ok,
        format!(
            "dense 3->2: {dense_head}; lstm 2->3: {lstm_head}; multi = n x head + trunk for all head types {totals_ok}"
        ),
    )
}

fn main() {
    let strict = std::env::var("MHRUL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("data pipeline on real files", pipeline_on_real_files),
        ("softmax/attention properties", attention_properties),
        ("end-to-end FD001 multi-head FNN", end_to_end),
        ("multi-head beats single-head", directional),
        ("determinism", determinism),
        ("parameter counting", parameter_counting),
    ];
    let (mut failed, mut missing) = (0, 0);
    for (name, f) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Outcome::Fail("panicked".into()));
        match outcome {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
            Outcome::NoData(d) => {
                missing += 1;
                println!("FAIL  {name}: not run, {d}");
            }
        }
    }
    println!("acceptance: {failed} failed, {missing} without data");
    if failed > 0 || (strict && missing > 0) {
        std::process::exit(1);
    }
}
