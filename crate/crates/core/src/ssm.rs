//! Selective state-space engine.
//!
//! A diagonal continuous system `h' = A h + B u, v = C h` is discretized with a
//! zero-order hold at an input-dependent step `delta`, and the resulting linear
//! recurrence is scanned sequentially. `B`, `C` and `delta` are computed from
//! each token, which is what makes the scan selective.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::kernels::{softplus, softplus_inverse};
use crate::numerics::{batch_seq_dim, Function, ParamStore, Rng, Tape, Tensor, Var};

/// Below this `|z|` the hold factor `(e^z - 1)/z` is evaluated by its series.
pub const SERIES_THRESHOLD: f64 = 1e-5;

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Coefficients of one selective SSM with token dimension `D` and state size `N`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, N]`; the state matrix is `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[D, N]`, token to input matrix `B_k`.
    pub w_b: Tensor,
    /// `[D, N]`, token to output matrix `C_k`.
    pub w_c: Tensor,
    /// `[D, 1]`
    pub w_delta_down: Tensor,
    /// `[1, D]`
    pub w_delta_up: Tensor,
    /// `[D]`
    pub delta_bias: Tensor,
    /// `[D]` passthrough gain, absent when the skip term is disabled.
    pub skip: Option<Tensor>,
}

/// Per-token selection `(B_k, C_k, delta_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Elementwise discretization rule `(a, delta, b) -> (a_bar, b_bar)`.
pub type DiscretizeFn = fn(f64, f64, f64) -> (f64, f64);

impl SsmParams {
    pub fn init(d: usize, n: usize, skip: bool, rng: &mut Rng) -> Self {
        let a_log = Tensor::new(
            &[d, n],
            (0..d)
                .flat_map(|_| (0..n).map(|i| ((i + 1) as f64).ln()))
                .collect(),
        )
        .expect("a_log shape");
        let bound = 1.0 / (d as f64).sqrt();
        let w_b = uniform(&[d, n], bound, rng);
        let w_c = uniform(&[d, n], bound, rng);
        let w_delta_down = uniform(&[d, 1], bound, rng);
        let w_delta_up = uniform(&[1, d], 1.0, rng);
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let delta_bias = Tensor::from_vec(
            (0..d)
                .map(|_| softplus_inverse(rng.gen_range(lo..hi).exp()))
                .collect(),
        );
        SsmParams {
            a_log,
            w_b,
            w_c,
            w_delta_down,
            w_delta_up,
            delta_bias,
            skip: skip.then(|| Tensor::ones(&[d])),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// `A = -exp(a_log)`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn selectivity(&self, u_k: &[f64]) -> Result<Selection> {
        let (d, n) = (self.dim(), self.state_size());
        if u_k.len() != d {
            return Err(Error::shape("selectivity token", &[u_k.len()], &[d]));
        }
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut low = 0.0;
        for (i, &u) in u_k.iter().enumerate() {
            for j in 0..n {
                b[j] += u * self.w_b.data()[i * n + j];
                c[j] += u * self.w_c.data()[i * n + j];
            }
            low += u * self.w_delta_down.data()[i];
        }
        let delta = (0..d)
            .map(|i| softplus(self.delta_bias.data()[i] + low * self.w_delta_up.data()[i]))
            .collect();
        Ok(Selection { b, c, delta })
    }

    /// Writes these coefficients into `store` under `prefix/...`.
    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}/a_log"), self.a_log)?;
        store.insert(format!("{prefix}/w_b"), self.w_b)?;
        store.insert(format!("{prefix}/w_c"), self.w_c)?;
        store.insert(format!("{prefix}/w_delta_down"), self.w_delta_down)?;
        store.insert(format!("{prefix}/w_delta_up"), self.w_delta_up)?;
        store.insert(format!("{prefix}/delta_bias"), self.delta_bias)?;
        if let Some(skip) = self.skip {
            store.insert(format!("{prefix}/skip"), skip)?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |k: &str| store.value(&format!("{prefix}/{k}")).cloned();
        Ok(SsmParams {
            a_log: get("a_log")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
            w_delta_down: get("w_delta_down")?,
            w_delta_up: get("w_delta_up")?,
            delta_bias: get("delta_bias")?,
            skip: get("skip").ok(),
        })
    }

    fn check(&self) -> Result<()> {
        let (d, n) = (self.dim(), self.state_size());
        let expect: [(&Tensor, &[usize]); 5] = [
            (&self.w_b, &[d, n]),
            (&self.w_c, &[d, n]),
            (&self.w_delta_down, &[d, 1]),
            (&self.w_delta_up, &[1, d]),
            (&self.delta_bias, &[d]),
        ];
        for (t, s) in expect {
            if t.shape() != s {
                return Err(Error::shape("ssm params", t.shape(), s));
            }
        }
        if let Some(skip) = &self.skip {
            if skip.shape() != [d] {
                return Err(Error::shape("ssm skip", skip.shape(), &[d]));
            }
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("uniform shape")
}

/// `(e^z - 1) / z`, continuous at 0.
#[inline]
pub fn hold_factor(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`hold_factor`].
#[inline]
fn hold_factor_grad(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order hold for one diagonal entry: `a_bar = e^z`, `b_bar = ((e^z - 1)/z) delta b`
/// with `z = delta a`.
#[inline]
pub fn discretize_elem(a: f64, delta: f64, b: f64) -> (f64, f64) {
    let z = delta * a;
    (z.exp(), hold_factor(z) * delta * b)
}

/// Discretizes `A: [D, N]` with per-channel steps `delta_k: [D]` and `B_k: [N]`.
pub fn discretize(a: &Tensor, b_k: &[f64], delta_k: &[f64]) -> Result<(Tensor, Tensor)> {
    let [d, n] = *a.shape() else {
        return Err(Error::shape("discretize A", a.shape(), &[0, 0]));
    };
    if b_k.len() != n || delta_k.len() != d {
        return Err(Error::shape(
            "discretize",
            &[b_k.len(), delta_k.len()],
            &[n, d],
        ));
    }
    if let Some(bad) = a.data().iter().find(|&&v| v >= 0.0) {
        return Err(Error::Contract(format!(
            "state matrix must be strictly negative, found {bad}"
        )));
    }
    let mut abar = vec![0.0; d * n];
    let mut bbar = vec![0.0; d * n];
    for i in 0..d {
        for j in 0..n {
            let (ab, bb) = discretize_elem(a.data()[i * n + j], delta_k[i], b_k[j]);
            abar[i * n + j] = ab;
            bbar[i * n + j] = bb;
        }
    }
    Ok((Tensor::new(&[d, n], abar)?, Tensor::new(&[d, n], bbar)?))
}

/// Selective scan over `u: [seq, D]` (or `[batch, seq, D]`), returning the same shape.
pub fn selective_scan(u: &Tensor, params: &SsmParams) -> Result<Tensor> {
    selective_scan_with(u, params, discretize_elem)
}

/// [`selective_scan`] with a substitute discretization rule, used to probe the
/// oracle checks with deliberately broken kernels.
pub fn selective_scan_with(u: &Tensor, params: &SsmParams, disc: DiscretizeFn) -> Result<Tensor> {
    params.check()?;
    let (batch, seq, d) = batch_seq_dim(u.shape(), "selective_scan")?;
    if d != params.dim() {
        return Err(Error::shape("selective_scan token", &[d], &[params.dim()]));
    }
    let n = params.state_size();
    let mut delta = Vec::with_capacity(u.numel());
    let mut bm = Vec::with_capacity(batch * seq * n);
    let mut cm = Vec::with_capacity(batch * seq * n);
    for tok in u.data().chunks(d) {
        let sel = params.selectivity(tok)?;
        delta.extend(sel.delta);
        bm.extend(sel.b);
        cm.extend(sel.c);
    }
    let a = params.a();
    check_negative(&a)?;
    let dims = ScanDims { batch, seq, d, n };
    let skip = params.skip.as_ref().map(Tensor::data);
    let (v, _) = scan_forward(
        dims,
        u.data(),
        &delta,
        a.data(),
        &bm,
        &cm,
        skip,
        disc,
        false,
    );
    Tensor::new(u.shape(), v)
}

/// Reference scan computed as an explicit sum over past tokens,
/// `v_k = sum_{j<=k} C_k (prod_{i=j+1..k} a_bar_i) b_bar_j u_j + skip u_k`.
///
/// Quadratic in the sequence length and written without the recurrence or any
/// helper it uses; intended for cross-checking [`selective_scan`].
#[allow(clippy::needless_range_loop)]
pub fn scan_oracle(u: &Tensor, params: &SsmParams) -> Result<Tensor> {
    let (batch, seq, d) = batch_seq_dim(u.shape(), "scan_oracle")?;
    let n = params.a_log.shape()[1];
    let x = u.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let tok = |k: usize, i: usize| x[(bi * seq + k) * d + i];
        // per-token step sizes and projections
        let mut dts = vec![vec![0.0; d]; seq];
        let mut bs = vec![vec![0.0; n]; seq];
        let mut cs = vec![vec![0.0; n]; seq];
        for k in 0..seq {
            let low: f64 = (0..d)
                .map(|i| tok(k, i) * params.w_delta_down.data()[i])
                .sum();
            for i in 0..d {
                let pre = params.delta_bias.data()[i] + params.w_delta_up.data()[i] * low;
                dts[k][i] = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
            }
            for j in 0..n {
                bs[k][j] = (0..d)
                    .map(|i| tok(k, i) * params.w_b.data()[i * n + j])
                    .sum();
                cs[k][j] = (0..d)
                    .map(|i| tok(k, i) * params.w_c.data()[i * n + j])
                    .sum();
            }
        }
        for k in 0..seq {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..n {
                    let a = -params.a_log.data()[i * n + j].exp();
                    let mut state = 0.0;
                    for s in 0..=k {
                        let z = dts[s][i] * a;
                        let factor = if z == 0.0 { 1.0 } else { z.exp_m1() / z };
                        let mut decay = 1.0;
                        for r in s + 1..=k {
                            decay *= (dts[r][i] * a).exp();
                        }
                        state += decay * factor * dts[s][i] * bs[s][j] * tok(s, i);
                    }
                    acc += cs[k][j] * state;
                }
                let skip = params.skip.as_ref().map_or(0.0, |s| s.data()[i]);
                out[(bi * seq + k) * d + i] = acc + skip * tok(k, i);
            }
        }
    }
    Tensor::new(u.shape(), out)
}

fn check_negative(a: &Tensor) -> Result<()> {
    if a.data().iter().any(|&v| v >= 0.0) {
        return Err(Error::Contract(
            "state matrix must be strictly negative".to_string(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct ScanDims {
    batch: usize,
    seq: usize,
    d: usize,
    n: usize,
}

/// Returns outputs `[batch, seq, d]` and, when `keep_states`, every state `[batch, seq, d, n]`.
#[allow(clippy::too_many_arguments)]
fn scan_forward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    skip: Option<&[f64]>,
    disc: DiscretizeFn,
    keep_states: bool,
) -> (Vec<f64>, Vec<f64>) {
    let ScanDims { batch, seq, d, n } = dims;
    let mut v = vec![0.0; batch * seq * d];
    let mut states = if keep_states {
        vec![0.0; batch * seq * d * n]
    } else {
        Vec::new()
    };
    let state_chunk = if keep_states { seq * d * n } else { 0 };

    let run = |bi: usize, vb: &mut [f64], sb: &mut [f64]| {
        let mut h = vec![0.0; d * n];
        for k in 0..seq {
            let tok = (bi * seq + k) * d;
            let sel = (bi * seq + k) * n;
            for i in 0..d {
                let (uk, dt) = (u[tok + i], delta[tok + i]);
                let mut acc = 0.0;
                for j in 0..n {
                    let (ab, bb) = disc(a[i * n + j], dt, bm[sel + j]);
                    let hs = &mut h[i * n + j];
                    *hs = ab * *hs + bb * uk;
                    acc += cm[sel + j] * *hs;
                }
                vb[k * d + i] = acc + skip.map_or(0.0, |s| s[i] * uk);
            }
            if keep_states {
                sb[k * d * n..(k + 1) * d * n].copy_from_slice(&h);
            }
        }
    };

    if keep_states {
        v.par_chunks_mut(seq * d)
            .zip(states.par_chunks_mut(state_chunk))
            .enumerate()
            .for_each(|(bi, (vb, sb))| run(bi, vb, sb));
    } else {
        v.par_chunks_mut(seq * d)
            .enumerate()
            .for_each(|(bi, vb)| run(bi, vb, &mut []));
    }
    (v, states)
}

/// Tape op for the scan. Inputs: `u, delta: [B, S, D]`, `a_log: [D, N]`,
/// `b, c: [B, S, N]`, optional `skip: [D]`.
struct ScanFn {
    dims: ScanDims,
    states: Vec<f64>,
    has_skip: bool,
}

struct BatchGrads {
    gu: Vec<f64>,
    gdelta: Vec<f64>,
    gb: Vec<f64>,
    gc: Vec<f64>,
    ga_log: Vec<f64>,
    gskip: Vec<f64>,
}

impl Function for ScanFn {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let ScanDims { batch, seq, d, n } = self.dims;
        let (u, delta, a_log, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let skip = self.has_skip.then(|| inputs[5].data());
        let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
        let g = grad_out.data();
        let states = &self.states;

        let per_batch: Vec<BatchGrads> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let mut out = BatchGrads {
                    gu: vec![0.0; seq * d],
                    gdelta: vec![0.0; seq * d],
                    gb: vec![0.0; seq * n],
                    gc: vec![0.0; seq * n],
                    ga_log: vec![0.0; d * n],
                    gskip: vec![0.0; d],
                };
                let mut carry = vec![0.0; d * n];
                let st = &states[bi * seq * d * n..(bi + 1) * seq * d * n];
                for k in (0..seq).rev() {
                    let tok = (bi * seq + k) * d;
                    let sel = (bi * seq + k) * n;
                    for i in 0..d {
                        let (gv, uk, dt) = (g[tok + i], u[tok + i], delta[tok + i]);
                        if let Some(s) = skip {
                            out.gskip[i] += gv * uk;
                            out.gu[k * d + i] += gv * s[i];
                        }
                        for j in 0..n {
                            let idx = i * n + j;
                            let h_k = st[k * d * n + idx];
                            let h_prev = if k > 0 {
                                st[(k - 1) * d * n + idx]
                            } else {
                                0.0
                            };
                            let (b, c, av) = (bm[sel + j], cm[sel + j], a[idx]);
                            out.gc[k * n + j] += gv * h_k;
                            let gh = gv * c + carry[idx];
                            let z = dt * av;
                            let ab = z.exp();
                            let f = hold_factor(z);
                            let g_ab = gh * h_prev;
                            let g_bb = gh * uk;
                            out.gu[k * d + i] += gh * f * dt * b;
                            carry[idx] = gh * ab;
                            let gz = g_ab * ab + g_bb * hold_factor_grad(z) * dt * b;
                            out.gdelta[k * d + i] += g_bb * f * b + gz * av;
                            out.gb[k * n + j] += g_bb * f * dt;
                            out.ga_log[idx] += gz * dt * av;
                        }
                    }
                }
                out
            })
            .collect();

        let mut gu = Vec::with_capacity(batch * seq * d);
        let mut gdelta = Vec::with_capacity(batch * seq * d);
        let mut gb = Vec::with_capacity(batch * seq * n);
        let mut gc = Vec::with_capacity(batch * seq * n);
        let mut ga_log = vec![0.0; d * n];
        let mut gskip = vec![0.0; d];
        for part in per_batch {
            gu.extend(part.gu);
            gdelta.extend(part.gdelta);
            gb.extend(part.gb);
            gc.extend(part.gc);
            for (acc, v) in ga_log.iter_mut().zip(&part.ga_log) {
                *acc += v;
            }
            for (acc, v) in gskip.iter_mut().zip(&part.gskip) {
                *acc += v;
            }
        }
        let mut grads = vec![
            Some(Tensor::new(inputs[0].shape(), gu)?),
            Some(Tensor::new(inputs[1].shape(), gdelta)?),
            Some(Tensor::new(inputs[2].shape(), ga_log)?),
            Some(Tensor::new(inputs[3].shape(), gb)?),
            Some(Tensor::new(inputs[4].shape(), gc)?),
        ];
        if self.has_skip {
            grads.push(Some(Tensor::from_vec(gskip)));
        }
        Ok(grads)
    }
}

/// Records the scan on `tape` given precomputed selections.
pub fn scan_on_tape(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    c: Var,
    skip: Option<Var>,
) -> Result<Var> {
    let (batch, seq, d) = batch_seq_dim(tape.shape(u), "selective_scan")?;
    let n = tape.shape(a_log)[1];
    if tape.shape(delta) != tape.shape(u) {
        return Err(Error::shape("scan delta", tape.shape(delta), tape.shape(u)));
    }
    if tape.shape(a_log) != [d, n] {
        return Err(Error::shape("scan a_log", tape.shape(a_log), &[d, n]));
    }
    for v in [b, c] {
        if tape.value(v).numel() != batch * seq * n {
            return Err(Error::shape("scan B/C", tape.shape(v), &[batch, seq, n]));
        }
    }
    let a = tape.value(a_log).map(|v| -v.exp());
    check_negative(&a)?;
    let dims = ScanDims { batch, seq, d, n };
    let skip_data = skip.map(|s| tape.value(s).data());
    let (v, states) = scan_forward(
        dims,
        tape.value(u).data(),
        tape.value(delta).data(),
        a.data(),
        tape.value(b).data(),
        tape.value(c).data(),
        skip_data,
        discretize_elem,
        true,
    );
    let value = Tensor::new(tape.shape(u), v)?;
    let mut inputs = vec![u, delta, a_log, b, c];
    inputs.extend(skip);
    tape.custom(
        &inputs,
        value,
        Box::new(ScanFn {
            dims,
            states,
            has_skip: skip.is_some(),
        }),
    )
}

/// Full selective SSM on the tape: selection projections followed by the scan.
pub fn ssm_on_tape(tape: &mut Tape, store: &ParamStore, prefix: &str, u: Var) -> Result<Var> {
    let p = |tape: &mut Tape, k: &str| tape.param(store, &format!("{prefix}/{k}"));
    let w_b = p(tape, "w_b")?;
    let w_c = p(tape, "w_c")?;
    let w_down = p(tape, "w_delta_down")?;
    let w_up = p(tape, "w_delta_up")?;
    let dt_bias = p(tape, "delta_bias")?;
    let a_log = p(tape, "a_log")?;
    let skip_name = format!("{prefix}/skip");
    let skip = if store.get(&skip_name).is_ok() {
        Some(tape.param(store, &skip_name)?)
    } else {
        None
    };
    let b = tape.affine(u, w_b, None)?;
    let c = tape.affine(u, w_c, None)?;
    let low = tape.affine(u, w_down, None)?;
    let pre = tape.affine(low, w_up, Some(dt_bias))?;
    let delta = tape.softplus(pre)?;
    scan_on_tape(tape, u, delta, a_log, b, c, skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, rng};

    fn random_params(d: usize, n: usize, seed: u64) -> SsmParams {
        let mut r = rng(seed);
        let mut p = SsmParams::init(d, n, true, &mut r);
        // spread the step sizes so the recurrence is not trivially short
        p.delta_bias = Tensor::from_vec((0..d).map(|_| r.gen_range(-2.0..1.0)).collect());
        p.a_log = p.a_log.map(|v| v + r.gen_range(-0.5..0.5));
        p.skip = Some(Tensor::from_vec(
            (0..d).map(|_| r.gen_range(-1.0..1.0)).collect(),
        ));
        p
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn selectivity_at_zero_token() {
        let mut p = SsmParams::init(3, 4, true, &mut rng(1));
        p.delta_bias = Tensor::zeros(&[3]);
        let s = p.selectivity(&[0.0; 3]).unwrap();
        assert_eq!(s.b, vec![0.0; 4]);
        assert_eq!(s.c, vec![0.0; 4]);
        for d in &s.delta {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
        p.delta_bias = Tensor::full(&[3], -20.0);
        let s = p.selectivity(&[0.0; 3]).unwrap();
        for d in &s.delta {
            assert!((d - (-20f64).exp()).abs() / (-20f64).exp() < 1e-8);
        }
    }

    #[test]
    fn init_step_sizes_are_in_range() {
        let p = SsmParams::init(64, 2, true, &mut rng(3));
        for &b in p.delta_bias.data() {
            let dt = softplus(b);
            assert!((DT_MIN * (1.0 - 1e-12)..=DT_MAX * (1.0 + 1e-12)).contains(&dt));
        }
        assert_eq!(p.a_log.data()[1], 2f64.ln());
    }

    #[test]
    fn discretize_analytic_case() {
        let a = Tensor::new(&[1, 1], vec![-std::f64::consts::LN_2]).unwrap();
        let (ab, bb) = discretize(&a, &[1.0], &[1.0]).unwrap();
        assert!((ab.item() - 0.5).abs() < 1e-15);
        assert!((bb.item() - 0.5 / std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_limit() {
        let a = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        let (ab, bb) = discretize(&a, &[2.0], &[1e-9]).unwrap();
        assert!((ab.item() - 1.0).abs() < 1e-8);
        assert!((bb.item() - 2e-9).abs() < 1e-15);
    }

    #[test]
    fn discretize_rejects_nonnegative_state() {
        let a = Tensor::new(&[1, 2], vec![-1.0, 0.0]).unwrap();
        assert!(matches!(
            discretize(&a, &[1.0, 1.0], &[0.1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hold_factor_branches_agree_at_switch() {
        for &z in &[SERIES_THRESHOLD, -SERIES_THRESHOLD] {
            let below = z * (1.0 - 1e-9);
            let series = 1.0 + below / 2.0 + below * below / 6.0;
            let direct = z.exp_m1() / z;
            assert!((series - direct).abs() < 1e-10);
            assert!((hold_factor(below) - hold_factor(z)).abs() < 1e-10);
            let gs = 0.5 + below / 3.0;
            assert!((hold_factor_grad(below) - gs).abs() < 1e-10);
            assert!((hold_factor_grad(z) - gs).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = random_params(3, 4, 2);
        let u = Tensor::zeros(&[6, 3]);
        let v = selective_scan(&u, &p).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        // D = 1, N = 2, hand-chosen coefficients
        let p = SsmParams {
            a_log: Tensor::new(&[1, 2], vec![0.0, 2f64.ln()]).unwrap(),
            w_b: Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap(),
            w_c: Tensor::new(&[1, 2], vec![2.0, 1.0]).unwrap(),
            w_delta_down: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            w_delta_up: Tensor::new(&[1, 1], vec![0.0]).unwrap(),
            delta_bias: Tensor::from_vec(vec![softplus_inverse(0.5)]),
            skip: Some(Tensor::from_vec(vec![0.25])),
        };
        let u1 = 0.8;
        let v = selective_scan(&Tensor::from_vec(vec![u1]).reshape(&[1, 1]).unwrap(), &p).unwrap();
        // delta = 0.5, A = [-1, -2], B = [0.4, -0.8], C = [1.6, 0.8]
        let bbar = |a: f64, b: f64| ((0.5 * a).exp() - 1.0) / a * b;
        let expect = 1.6 * bbar(-1.0, 0.4) * u1 + 0.8 * bbar(-2.0, -0.8) * u1 + 0.25 * u1;
        assert!(
            (v.item() - expect).abs() < 1e-14,
            "{} vs {expect}",
            v.item()
        );
        let o = scan_oracle(&Tensor::new(&[1, 1], vec![u1]).unwrap(), &p).unwrap();
        assert!((o.item() - expect).abs() < 1e-14);
    }

    #[test]
    fn scan_matches_oracle() {
        let p = random_params(4, 8, 11);
        let u = random_input(&[32, 4], 12);
        let a = selective_scan(&u, &p).unwrap();
        let b = scan_oracle(&u, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
        // batched input gives the per-sequence result
        let ub = random_input(&[3, 5, 4], 13);
        let ab = selective_scan(&ub, &p).unwrap();
        let bb = scan_oracle(&ub, &p).unwrap();
        assert!(ab.max_abs_diff(&bb) < 1e-12);
    }

    #[test]
    fn memoryless_limit() {
        let mut p = random_params(2, 3, 5);
        p.delta_bias = Tensor::full(&[2], 40.0);
        p.a_log = Tensor::full(&[2, 3], 3.0);
        let mut u = random_input(&[6, 2], 6);
        let before = scan_oracle(&u, &p).unwrap();
        u.data_mut()[0] += 0.3;
        u.data_mut()[5] -= 0.7;
        let after = scan_oracle(&u, &p).unwrap();
        // tokens 3.. do not see the perturbed tokens 0..=2
        for k in 3..6 {
            for i in 0..2 {
                assert_eq!(before.data()[k * 2 + i], after.data()[k * 2 + i]);
            }
        }
    }

    #[test]
    fn scan_is_causal() {
        let p = random_params(3, 4, 21);
        let u = random_input(&[10, 3], 22);
        let base = selective_scan(&u, &p).unwrap();
        for j in 0..10 {
            let mut up = u.clone();
            up.data_mut()[j * 3 + 1] += 0.5;
            let out = selective_scan(&up, &p).unwrap();
            for k in 0..j {
                for i in 0..3 {
                    assert_eq!(base.data()[k * 3 + i], out.data()[k * 3 + i]);
                }
            }
        }
    }

    #[test]
    fn tape_scan_matches_pure_scan() {
        let p = random_params(3, 4, 31);
        let mut store = ParamStore::new();
        p.clone().register(&mut store, "ssm").unwrap();
        let u = random_input(&[2, 7, 3], 32);
        let mut tape = Tape::new();
        let uv = tape.input(u.clone()).unwrap();
        let v = ssm_on_tape(&mut tape, &store, "ssm", uv).unwrap();
        let pure = selective_scan(&u, &p).unwrap();
        assert!(tape.value(v).max_abs_diff(&pure) < 1e-13);
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        for seed in 0..3 {
            let p = random_params(3, 4, 40 + seed);
            let mut store = ParamStore::new();
            p.register(&mut store, "ssm").unwrap();
            store
                .insert("u", random_input(&[2, 6, 3], 50 + seed))
                .unwrap();
            let report = gradcheck::check(&store, 1e-5, |tape, s| {
                let u = tape.param(s, "u")?;
                let v = ssm_on_tape(tape, s, "ssm", u)?;
                let sq = tape.mul(v, v)?;
                tape.mean(sq)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{:?}", report.worst());
        }
    }
}
