//! One line per acceptance criterion; exits nonzero if any criterion fails.
//!
//! The ETTh1 criterion needs `ETTh1.csv`, looked up via `TM_ETTH1` and then
//! `crates/core/data/ETTh1.csv`. Without it the criterion is reported as a
//! blocked FAIL, which only affects the exit status when
//! `TM_ACCEPTANCE_STRICT` is set.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use timemachine::data::{self, SplitRule};
use timemachine::model::{count_params, ChannelMode, ModelConfig, TimeMachine};
use timemachine::numerics::gradcheck::DEFAULT_TOLERANCE;
use timemachine::train::{self, Checkpoint, RunMeta, TrainConfig};
use timemachine::verify::{self, Mutation};

type Check = fn(u64) -> timemachine::Result<f64>;
type Criterion = fn() -> Outcome;

struct Outcome {
    passed: bool,
    blocked: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        blocked: false,
        detail: detail.into(),
    }
}

fn blocked(detail: impl Into<String>) -> Outcome {
    Outcome {
        passed: false,
        blocked: true,
        detail: format!("BLOCKED: {}", detail.into()),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let err = verify::scan_oracle_error(100, 2024, Mutation::None).unwrap_or(f64::INFINITY);
    let el = start.elapsed();
    outcome(
        err < 1e-10 && within(el, 5.0),
        format!(
            "100 instances, max |scan - oracle| = {err:.2e} (< 1e-10), {:.2}s (< 5s)",
            el.as_secs_f64()
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let seed = 2024;
    let checks: [(&str, Check); 8] = [
        ("affine", verify::grad_affine),
        ("elementwise", verify::grad_elementwise),
        ("shape", verify::grad_shape_ops),
        ("conv", verify::grad_conv),
        ("dropout", verify::grad_dropout),
        ("channel", verify::grad_channel_ops),
        ("scan", verify::grad_scan),
        ("mamba", verify::grad_mamba),
    ];
    let mut worst = ("", 0.0_f64);
    let mut record = |name, e: timemachine::Result<f64>| {
        let e = e.ok().filter(|v| !v.is_nan()).unwrap_or(f64::INFINITY);
        if e > worst.1 {
            worst = (name, e);
        }
    };
    for (name, f) in checks {
        record(name, f(seed));
    }
    record(
        "model/mixing",
        verify::grad_model(ChannelMode::Mixing, seed),
    );
    record(
        "model/independence",
        verify::grad_model(ChannelMode::Independence, seed),
    );
    let el = start.elapsed();
    outcome(
        worst.1 < DEFAULT_TOLERANCE && within(el, 60.0),
        format!(
            "8 op groups + toy model in both modes, worst rel error {:.2e} ({}) (< 1e-4), {:.1}s (< 60s)",
            worst.1,
            worst.0,
            el.as_secs_f64()
        ),
    )
}

fn shape_contract() -> Outcome {
    let failures = verify::shape_contract_failures().unwrap_or(f64::INFINITY);
    let diff = verify::mode_agreement(2024).unwrap_or(f64::INFINITY);
    outcome(
        failures == 0.0 && diff == 0.0,
        format!("{failures} of 16 configs with wrong shape, mixing vs independence at M=1 max diff {diff:e}"),
    )
}

fn revin_and_causality() -> Outcome {
    let rt = verify::revin_round_trip(2024).unwrap_or(f64::INFINITY);
    let conv = verify::conv_causality(2024).unwrap_or(f64::INFINITY);
    let mamba = verify::mamba_causality(2024).unwrap_or(f64::INFINITY);
    outcome(
        rt < 1e-6 && conv == 0.0 && mamba == 0.0,
        format!("revin round trip {rt:.1e} (< 1e-6), future leak conv {conv:e}, mamba {mamba:e}"),
    )
}

fn parameter_scalability() -> Outcome {
    let base = ModelConfig {
        channels: 7,
        ..ModelConfig::default()
    };
    let at = |l| {
        count_params(&ModelConfig {
            lookback: l,
            ..base.clone()
        }) as i64
    };
    let n1 = base.n1 as i64;
    let (d1, d2) = (at(192) - at(96), at(336) - at(192));
    outcome(
        d1 == 96 * n1 && d2 == 144 * n1,
        format!(
            "count(192)-count(96) = {d1} (96*n1 = {}), count(336)-count(192) = {d2} (144*n1 = {})",
            96 * n1,
            144 * n1
        ),
    )
}

fn sinusoid() -> data::Prepared {
    data::prepare(
        data::sinusoid_series(2000, 1, 24.0),
        SplitRule::Ratio,
        96,
        24,
    )
    .unwrap()
}

fn learnability() -> Outcome {
    let p = sinusoid();
    let cfg = ModelConfig {
        lookback: 96,
        horizon: 24,
        channels: 1,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 50,
        target_val_mse: Some(1e-2),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut model = TimeMachine::new(cfg).unwrap();
    let res = train::train_loop(&mut model, &p.train, &p.val, &tc, |_| {});
    let el = start.elapsed();
    match res {
        Ok(o) => outcome(
            o.best_val_mse < 1e-2 && within(el, 300.0),
            format!(
                "default model ({} params), lr 1e-3: best val MSE {:.2e} (< 1e-2) after {} epoch(s) (<= 50), {:.0}s (< 300s)",
                model.num_params(),
                o.best_val_mse,
                o.records.len(),
                el.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("training failed: {e}")),
    }
}

fn etth1_path() -> Option<PathBuf> {
    std::env::var_os("TM_ETTH1")
        .map(PathBuf::from)
        .or_else(|| Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/ETTh1.csv")))
        .filter(|p| p.exists())
}

fn etth1_sanity() -> Outcome {
    let Some(path) = etth1_path() else {
        return blocked(
            "ETTh1.csv not found (set TM_ETTH1 or place it at crates/core/data/ETTh1.csv)",
        );
    };
    let start = Instant::now();
    let run = || -> timemachine::Result<(train::Metrics, train::Metrics)> {
        let series = data::load_csv(&path)?;
        let m = series.channels();
        let p = data::prepare(series, SplitRule::Etth, 96, 96)?;
        let mut model = TimeMachine::new(ModelConfig {
            lookback: 96,
            horizon: 96,
            channels: m,
            n1: 64,
            n2: 32,
            state_size: 16,
            dropout: timemachine::config::ETT_DROPOUT,
            ..ModelConfig::default()
        })?;
        let tc = TrainConfig {
            epochs: 10,
            batch_size: 32,
            ..TrainConfig::default()
        };
        train::train_loop(&mut model, &p.train, &p.val, &tc, |_| {})?;
        Ok((
            train::evaluate(&model, &p.test, 32)?,
            train::persistence_baseline(&p.test, 32)?,
        ))
    };
    let result = run();
    let el = start.elapsed();
    match result {
        Ok((test, base)) => outcome(
            test.mse < base.mse && within(el, 1800.0),
            format!(
                "test MSE {:.4} / MAE {:.4} vs persistence MSE {:.4} / MAE {:.4}, {:.0}s (< 1800s)",
                test.mse,
                test.mae,
                base.mse,
                base.mae,
                el.as_secs_f64()
            ),
        ),
        Err(e) => outcome(false, format!("run failed: {e}")),
    }
}

fn small_run_config(seed: u64) -> (ModelConfig, TrainConfig) {
    (
        ModelConfig {
            lookback: 96,
            horizon: 24,
            channels: 1,
            n1: 32,
            n2: 16,
            state_size: 8,
            seed,
            ..ModelConfig::default()
        },
        TrainConfig {
            epochs: 3,
            seed,
            log_seconds: false,
            ..TrainConfig::default()
        },
    )
}

fn epoch_log(p: &data::Prepared, seed: u64) -> timemachine::Result<String> {
    let (mc, tc) = small_run_config(seed);
    let mut model = TimeMachine::new(mc)?;
    let out = train::train_loop(&mut model, &p.train, &p.val, &tc, |_| {})?;
    Ok(train::epoch_log_csv(&out.records))
}

fn determinism() -> Outcome {
    let p = sinusoid();
    match (epoch_log(&p, 5), epoch_log(&p, 5)) {
        (Ok(a), Ok(b)) => outcome(
            a.as_bytes() == b.as_bytes(),
            format!(
                "two 3-epoch runs with seed 5: epoch logs ({} bytes) byte-identical = {}",
                a.len(),
                a == b
            ),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("training failed: {e}")),
    }
}

fn bits_equal(a: &train::Metrics, b: &train::Metrics) -> bool {
    a.mse.to_bits() == b.mse.to_bits() && a.mae.to_bits() == b.mae.to_bits()
}

fn checkpoint_round_trip() -> Outcome {
    let p = sinusoid();
    let run = || -> timemachine::Result<(train::Metrics, train::Metrics)> {
        let (mc, tc) = small_run_config(9);
        let mut model = TimeMachine::new(mc)?;
        let out = train::train_loop(&mut model, &p.train, &p.val, &tc, |_| {})?;
        let before = train::evaluate(&model, &p.test, 32)?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("ck.tmck");
        Checkpoint::from_model(&model, RunMeta::default(), Some(out.optimizer)).save(&path)?;
        let restored = Checkpoint::load(&path)?.into_model()?;
        Ok((before, train::evaluate(&restored, &p.test, 32)?))
    };
    match run() {
        Ok((a, b)) => outcome(
            bits_equal(&a, &b),
            format!(
                "test MSE {:.6e} before save, {:.6e} after load (f64, bitwise equal = {})",
                a.mse,
                b.mse,
                bits_equal(&a, &b)
            ),
        ),
        Err(e) => outcome(false, format!("round trip failed: {e}")),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient suite", gradient_suite),
        ("shape/mode contract", shape_contract),
        ("revin round trip + causality", revin_and_causality),
        ("parameter scalability in L", parameter_scalability),
        ("sinusoid learnability", learnability),
        ("ETTh1 desk-scale sanity", etth1_sanity),
        ("determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let strict = std::env::var_os("TM_ACCEPTANCE_STRICT").is_some();
    let (mut failed, mut fatal, mut n_blocked) = (0, 0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        if !o.passed {
            failed += 1;
            n_blocked += o.blocked as usize;
            if strict || !o.blocked {
                fatal += 1;
            }
        }
        println!(
            "criterion {} [{}] {}: {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed, {} blocked",
        criteria.len() - failed,
        criteria.len(),
        n_blocked
    );
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
