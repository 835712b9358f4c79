//! Self-checks run by `tm verify`: gradients, oracle scans, RevIN, causality
//! and parameter scaling.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mamba::{MambaBlock, MambaConfig};
use crate::model::{count_params, ChannelMode, ModelConfig, RevInState, TimeMachine};
use crate::numerics::{gradcheck, rng, ParamStore, Rng, Tape, Tensor, Var};
use crate::ssm::{self, DiscretizeFn, SsmParams};

/// Deliberate defects for checking that the suite notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Flips the sign of `A` inside the discretization used by the scan.
    DiscretizeSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub oracle_instances: usize,
    pub mutation: Mutation,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 7,
            oracle_instances: 100,
            mutation: Mutation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

fn timed(name: &str, tolerance: f64, f: impl FnOnce() -> Result<f64>) -> CheckResult {
    let start = Instant::now();
    let (max_error, passed) = match f() {
        Ok(e) => (e, e <= tolerance),
        Err(err) => {
            log::error!("{name}: {err}");
            (f64::NAN, false)
        }
    };
    CheckResult {
        name: name.to_string(),
        max_error,
        tolerance,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Vec<CheckResult> {
    let tol = gradcheck::DEFAULT_TOLERANCE;
    let seed = cfg.seed;
    vec![
        timed("scan vs oracle", 1e-10, || {
            scan_oracle_error(cfg.oracle_instances, seed, cfg.mutation)
        }),
        timed("grad: affine", tol, || grad_affine(seed)),
        timed("grad: elementwise", tol, || grad_elementwise(seed)),
        timed("grad: shape ops", tol, || grad_shape_ops(seed)),
        timed("grad: causal_conv1d", tol, || grad_conv(seed)),
        timed("grad: dropout", tol, || grad_dropout(seed)),
        timed("grad: channel affine", tol, || grad_channel_ops(seed)),
        timed("grad: selective scan", tol, || grad_scan(seed)),
        timed("grad: mamba block", tol, || grad_mamba(seed)),
        timed("grad: model (mixing)", tol, || {
            grad_model(ChannelMode::Mixing, seed)
        }),
        timed("grad: model (independence)", tol, || {
            grad_model(ChannelMode::Independence, seed)
        }),
        timed("shape contract (16 configs)", 0.0, shape_contract_failures),
        timed("mixing == independence at M=1", 0.0, || {
            mode_agreement(seed)
        }),
        timed("revin round trip", 1e-6, || revin_round_trip(seed)),
        timed("causality: causal_conv1d", 0.0, || conv_causality(seed)),
        timed("causality: mamba block", 0.0, || mamba_causality(seed)),
        timed("param count vs instantiation", 0.0, param_count_gap),
        timed("param growth in L", 0.0, param_growth_error),
    ]
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let w = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut s = format!(
        "{:<w$}  {:>11}  {:>9}  {:>8}  status\n",
        "check", "max error", "tolerance", "seconds"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<w$}  {:>11.3e}  {:>9.1e}  {:>8.2}  {}",
            r.name,
            r.max_error,
            r.tolerance,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    s
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).expect("shape")
}

fn random_ssm(d: usize, n: usize, r: &mut Rng) -> SsmParams {
    let mut p = SsmParams::init(d, n, r.gen_bool(0.5), r);
    p.a_log = random(&[d, n], -1.0, 1.5, r);
    p.w_b = random(&[d, n], -1.0, 1.0, r);
    p.w_c = random(&[d, n], -1.0, 1.0, r);
    p.w_delta_down = random(&[d, 1], -1.0, 1.0, r);
    p.w_delta_up = random(&[1, d], -1.0, 1.0, r);
    p.delta_bias = random(&[d], -3.0, 0.5, r);
    p
}

/// Max abs difference between the recurrent scan and the unrolled oracle.
pub fn scan_oracle_error(instances: usize, seed: u64, mutation: Mutation) -> Result<f64> {
    let disc: DiscretizeFn = match mutation {
        Mutation::None => ssm::discretize_elem,
        Mutation::DiscretizeSign => |a, delta, b| ssm::discretize_elem(-a, delta, b),
    };
    let mut r = rng(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let seq = r.gen_range(1..=64);
        let d = r.gen_range(1..=8);
        let n = r.gen_range(1..=16);
        let p = random_ssm(d, n, &mut r);
        let u = random(&[seq, d], -1.0, 1.0, &mut r);
        let fast = ssm::selective_scan_with(&u, &p, disc)?;
        let slow = ssm::scan_oracle(&u, &p)?;
        let e = fast.max_abs_diff(&slow);
        worst = if e.is_nan() {
            f64::INFINITY
        } else {
            worst.max(e)
        };
    }
    Ok(worst)
}

/// Scalar probe that weights every output element differently, so permuted
/// gradients do not cancel.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = random(&shape, -1.0, 1.0, &mut rng(991));
    let w = tape.input(w)?;
    let lin = tape.mul(y, w)?;
    let sq = tape.mul(y, y)?;
    let s = tape.add(lin, sq)?;
    tape.mean(s)
}

fn grad_error(
    store: &ParamStore,
    build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let report = gradcheck::check(store, gradcheck::DEFAULT_STEP, build)?;
    if let Some(w) = report.worst() {
        log::debug!("worst parameter {}: rel {:.3e}", w.name, w.rel_error);
    }
    Ok(report.max_rel_error())
}

fn store_of(entries: Vec<(&str, Tensor)>) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t)?;
    }
    Ok(s)
}

pub fn grad_affine(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let s = store_of(vec![
        ("x", random(&[2, 3, 4], -1.0, 1.0, &mut r)),
        ("w", random(&[4, 5], -1.0, 1.0, &mut r)),
        ("b", random(&[5], -1.0, 1.0, &mut r)),
    ])?;
    grad_error(&s, |t, s| {
        let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
        let y = t.affine(x, w, Some(b))?;
        let wt = t.transpose(w)?;
        let y2 = t.affine(y, wt, None)?;
        probe(t, y2)
    })
}

pub fn grad_elementwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 1);
    let s = store_of(vec![
        ("a", random(&[2, 3], -2.0, 2.0, &mut r)),
        ("b", random(&[2, 3], -2.0, 2.0, &mut r)),
    ])?;
    grad_error(&s, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        let ab = t.mul(a, b)?;
        let p1 = t.silu(ab)?;
        let d = t.sub(a, b)?;
        let p2 = t.softplus(d)?;
        let na = t.neg(a)?;
        let sg = t.sigmoid(na)?;
        let eb = t.exp(b)?;
        let p3 = t.mul(sg, eb)?;
        let q = t.add(p1, p2)?;
        let y = t.add(q, p3)?;
        let total = t.sum(y)?;
        let m = probe(t, y)?;
        t.add(m, total)
    })
}

pub fn grad_shape_ops(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 2);
    let s = store_of(vec![
        ("a", random(&[2, 3, 4], -1.0, 1.0, &mut r)),
        ("b", random(&[2, 4, 2], -1.0, 1.0, &mut r)),
    ])?;
    grad_error(&s, |t, s| {
        let (a, b) = (t.param(s, "a")?, t.param(s, "b")?);
        let at = t.transpose(a)?;
        let c = t.concat(at, b)?;
        let y = t.reshape(c, &[4, 10])?;
        probe(t, y)
    })
}

pub fn grad_conv(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 3);
    let s = store_of(vec![
        ("x", random(&[2, 5, 3], -1.0, 1.0, &mut r)),
        ("k", random(&[3, 3], -1.0, 1.0, &mut r)),
        ("bias", random(&[3], -1.0, 1.0, &mut r)),
    ])?;
    grad_error(&s, |t, s| {
        let (x, k, b) = (t.param(s, "x")?, t.param(s, "k")?, t.param(s, "bias")?);
        let y = t.causal_conv1d(x, k, b)?;
        probe(t, y)
    })
}

pub fn grad_dropout(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 4);
    let s = store_of(vec![("x", random(&[4, 6], -1.0, 1.0, &mut r))])?;
    grad_error(&s, |t, s| {
        let x = t.param(s, "x")?;
        let mut mask_rng = rng(seed + 40);
        let y = t.dropout(x, 0.3, true, &mut mask_rng)?;
        probe(t, y)
    })
}

pub fn grad_channel_ops(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 5);
    let s = store_of(vec![
        ("x", random(&[2, 3, 4], -1.0, 1.0, &mut r)),
        ("g", random(&[3], 0.5, 1.5, &mut r)),
        ("h", random(&[3], -0.5, 0.5, &mut r)),
        ("g2", random(&[3], 0.5, 1.5, &mut r)),
        ("h2", random(&[3], -0.5, 0.5, &mut r)),
    ])?;
    let scale: Vec<f64> = (0..6).map(|i| 0.5 + 0.25 * i as f64).collect();
    let shift: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect();
    grad_error(&s, |t, s| {
        let x = t.param(s, "x")?;
        let (g, h) = (t.param(s, "g")?, t.param(s, "h")?);
        let (g2, h2) = (t.param(s, "g2")?, t.param(s, "h2")?);
        let y = t.channel_affine(x, g, h)?;
        let y = t.channel_affine_inv(y, g2, h2, 1e-10)?;
        let y = t.row_affine(y, &scale, &shift)?;
        probe(t, y)
    })
}

pub fn grad_scan(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 6);
    let mut s = ParamStore::new();
    random_ssm(3, 4, &mut r).register(&mut s, "ssm")?;
    s.insert("u", random(&[2, 6, 3], -1.0, 1.0, &mut r))?;
    grad_error(&s, |t, s| {
        let u = t.param(s, "u")?;
        let v = ssm::ssm_on_tape(t, s, "ssm", u)?;
        probe(t, v)
    })
}

fn small_mamba() -> MambaConfig {
    MambaConfig {
        d_model: 3,
        expand: 1,
        state_size: 2,
        conv_width: 2,
        skip: true,
    }
}

pub fn grad_mamba(seed: u64) -> Result<f64> {
    let block = MambaBlock::new("m", small_mamba());
    let mut s = ParamStore::new();
    let mut r = rng(seed + 7);
    block.init_params(&mut s, &mut r)?;
    s.insert("x", random(&[4, 3], -1.0, 1.0, &mut r))?;
    grad_error(&s, |t, s| {
        let x = t.param(s, "x")?;
        let y = block.forward(t, s, x)?;
        probe(t, y)
    })
}

/// The toy model used by the end-to-end gradient check.
pub fn toy_config(mode: ChannelMode, seed: u64) -> ModelConfig {
    ModelConfig {
        lookback: 8,
        horizon: 4,
        channels: 2,
        n1: 8,
        n2: 4,
        dropout: 0.0,
        channel_mode: mode,
        state_size: 2,
        expand: 1,
        conv_width: 2,
        seed,
        ..ModelConfig::default()
    }
}

pub fn grad_model(mode: ChannelMode, seed: u64) -> Result<f64> {
    let model = TimeMachine::new(toy_config(mode, seed))?;
    let x = random(&[1, 2, 8], -2.0, 2.0, &mut rng(seed + 8));
    let store = model.params().clone();
    grad_error(&store, |t, s| {
        let mut r = rng(0);
        let y = model.forward(t, s, &x, false, &mut r)?;
        probe(t, y)
    })
}

fn small_model(mode: ChannelMode, m: usize, l: usize, t: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        lookback: l,
        horizon: t,
        channels: m,
        n1: 16,
        n2: 8,
        state_size: 4,
        channel_mode: mode,
        seed,
        ..ModelConfig::default()
    }
}

/// Number of configurations in the mode x L x T x M grid whose output shape is wrong.
pub fn shape_contract_failures() -> Result<f64> {
    let mut failures = 0;
    for mode in [ChannelMode::Mixing, ChannelMode::Independence] {
        for l in [8, 96] {
            for t in [4, 24] {
                for m in [1, 7] {
                    let model = TimeMachine::new(small_model(mode, m, l, t, 1))?;
                    let x = random(&[2, m, l], -1.0, 1.0, &mut rng(2));
                    if model.predict(&x)?.shape() != [2, m, t] {
                        failures += 1;
                    }
                }
            }
        }
    }
    Ok(failures as f64)
}

/// At M = 1 the two channel modes must agree bit for bit.
pub fn mode_agreement(seed: u64) -> Result<f64> {
    let mut worst = 0.0_f64;
    for (l, t) in [(8, 4), (96, 24)] {
        let mix = TimeMachine::new(small_model(ChannelMode::Mixing, 1, l, t, seed))?;
        let ind = TimeMachine::new(small_model(ChannelMode::Independence, 1, l, t, seed))?;
        let x = random(&[3, 1, l], -1.0, 1.0, &mut rng(seed + 9));
        worst = worst.max(mix.predict(&x)?.max_abs_diff(&ind.predict(&x)?));
    }
    Ok(worst)
}

pub fn revin_round_trip(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 10);
    let mut x = random(&[4, 3, 32], -1.0, 1.0, &mut r);
    for (i, row) in x.data_mut().chunks_mut(32).enumerate() {
        let (scale, offset) = (10f64.powi(i as i32 % 4 - 1), 50.0 * i as f64 - 100.0);
        row.iter_mut().for_each(|v| *v = *v * scale + offset);
    }
    let st = RevInState::fit(&x)?;
    let back = st.denormalize(&st.normalize(&x)?)?;
    Ok(back.max_abs_diff(&x))
}

/// Largest change of outputs before `t` when the input at `t` is perturbed.
fn causality_leak(
    seq: usize,
    d: usize,
    x: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    let base = f(x)?;
    let mut worst = 0.0_f64;
    for t in 0..seq {
        let mut xp = x.clone();
        for c in 0..d {
            xp.data_mut()[t * d + c] += 1.0;
        }
        let y = f(&xp)?;
        for (a, b) in base.data()[..t * d].iter().zip(&y.data()[..t * d]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub fn conv_causality(seed: u64) -> Result<f64> {
    let mut r = rng(seed + 11);
    let (seq, d, w) = (12, 3, 4);
    let x = random(&[seq, d], -1.0, 1.0, &mut r);
    let k = random(&[w, d], -1.0, 1.0, &mut r);
    let b = random(&[d], -1.0, 1.0, &mut r);
    causality_leak(seq, d, &x, |x| {
        let mut t = Tape::new();
        let (xv, kv, bv) = (
            t.input(x.clone())?,
            t.input(k.clone())?,
            t.input(b.clone())?,
        );
        let y = t.causal_conv1d(xv, kv, bv)?;
        Ok(t.value(y).clone())
    })
}

pub fn mamba_causality(seed: u64) -> Result<f64> {
    let cfg = MambaConfig {
        d_model: 4,
        expand: 2,
        state_size: 3,
        conv_width: 3,
        skip: true,
    };
    let block = MambaBlock::new("m", cfg);
    let mut s = ParamStore::new();
    let mut r = rng(seed + 12);
    block.init_params(&mut s, &mut r)?;
    let x = random(&[10, 4], -1.0, 1.0, &mut r);
    causality_leak(10, 4, &x, |x| {
        let mut t = Tape::new();
        let xv = t.input(x.clone())?;
        let y = block.forward(&mut t, &s, xv)?;
        Ok(t.value(y).clone())
    })
}

/// |closed-form count - instantiated count| summed over a few configurations.
pub fn param_count_gap() -> Result<f64> {
    let mut gap = 0.0;
    for (mode, m, affine, skip, res) in [
        (ChannelMode::Mixing, 7, true, true, true),
        (ChannelMode::Independence, 7, false, false, true),
        (ChannelMode::Auto, 3, true, true, false),
    ] {
        let cfg = ModelConfig {
            revin_affine: affine,
            skip,
            residual: res,
            ..small_model(mode, m, 24, 12, 3)
        };
        let model = TimeMachine::new(cfg.clone())?;
        gap += (count_params(&cfg) as f64 - model.num_params() as f64).abs();
    }
    Ok(gap)
}

/// Deviation of the count differences across L = 96, 192, 336 from 96*n1 and 144*n1.
pub fn param_growth_error() -> Result<f64> {
    let mut err = 0.0_f64;
    for mode in [ChannelMode::Mixing, ChannelMode::Independence] {
        let at = |l: usize| {
            count_params(&ModelConfig {
                lookback: l,
                channels: 7,
                channel_mode: mode,
                ..ModelConfig::default()
            }) as f64
        };
        let n1 = ModelConfig::default().n1 as f64;
        err = err
            .max((at(192) - at(96) - 96.0 * n1).abs())
            .max((at(336) - at(192) - 144.0 * n1).abs());
    }
    Ok(err)
}
