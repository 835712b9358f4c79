//! Gated two-branch Mamba block.
//!
//! ```text
//! a = scan(silu(conv(in_proj_a(x))))
//! g = silu(in_proj_b(x))
//! y = out_proj(a * g)
//! ```

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Rng, Tape, Tensor, Var};
use crate::ssm::{self, SsmParams};

/// Hyperparameters of one block; `d_model` is the token dimension it receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub state_size: usize,
    pub conv_width: usize,
    pub skip: bool,
}

impl MambaConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.state_size == 0 || self.conv_width == 0 {
            return Err(Error::Config(format!(
                "mamba dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of scalars the block owns.
    pub fn param_count(&self) -> usize {
        let (d, e, n, w) = (
            self.d_model,
            self.inner_dim(),
            self.state_size,
            self.conv_width,
        );
        let in_proj = 2 * (d * e + e);
        let conv = w * e + e;
        let ssm = 3 * e * n + e + e + e + if self.skip { e } else { 0 };
        let out_proj = e * d + d;
        in_proj + conv + ssm + out_proj
    }
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    prefix: String,
    config: MambaConfig,
}

impl MambaBlock {
    pub fn new(prefix: impl Into<String>, config: MambaConfig) -> Self {
        MambaBlock {
            prefix: prefix.into(),
            config,
        }
    }

    pub fn config(&self) -> &MambaConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, k: &str) -> String {
        format!("{}/{k}", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.config.validate()?;
        let (d, e) = (self.config.d_model, self.config.inner_dim());
        let w = self.config.conv_width;
        linear_init(store, &self.name("in_proj_a"), d, e, rng)?;
        linear_init(store, &self.name("in_proj_b"), d, e, rng)?;
        let bound = 1.0 / (w as f64).sqrt();
        store.insert(self.name("conv/kernel"), uniform(&[w, e], bound, rng))?;
        store.insert(self.name("conv/bias"), uniform(&[e], bound, rng))?;
        SsmParams::init(e, self.config.state_size, self.config.skip, rng)
            .register(store, &self.name("ssm"))?;
        linear_init(store, &self.name("out_proj"), e, d, rng)?;
        Ok(())
    }

    /// Applies the block to `x: [seq, d_model]` or `[batch, seq, d_model]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if !(2..=3).contains(&shape.len()) || shape[shape.len() - 1] != self.config.d_model {
            return Err(Error::shape(
                format!("{} input", self.prefix),
                &shape,
                &[self.config.d_model],
            ));
        }
        let a_in = linear(tape, store, &self.name("in_proj_a"), x)?;
        let kernel = tape.param(store, &self.name("conv/kernel"))?;
        let conv_bias = tape.param(store, &self.name("conv/bias"))?;
        let conv = tape.causal_conv1d(a_in, kernel, conv_bias)?;
        let act = tape.silu(conv)?;
        let scanned = ssm::ssm_on_tape(tape, store, &self.name("ssm"), act)?;

        let b_in = linear(tape, store, &self.name("in_proj_b"), x)?;
        let gate = tape.silu(b_in)?;

        let gated = tape.mul(scanned, gate)?;
        linear(tape, store, &self.name("out_proj"), gated)
    }
}

pub(crate) fn linear_init(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut Rng,
) -> Result<()> {
    let bound = 1.0 / (d_in as f64).sqrt();
    store.insert(
        format!("{prefix}/weight"),
        uniform(&[d_in, d_out], bound, rng),
    )?;
    store.insert(format!("{prefix}/bias"), uniform(&[d_out], bound, rng))?;
    Ok(())
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}/weight"))?;
    let b = tape.param(store, &format!("{prefix}/bias"))?;
    tape.affine(x, w, Some(b))
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("uniform shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, kernels, rng};

    fn cfg(d_model: usize, expand: usize, state_size: usize, conv_width: usize) -> MambaConfig {
        MambaConfig {
            d_model,
            expand,
            state_size,
            conv_width,
            skip: true,
        }
    }

    fn block(c: MambaConfig, seed: u64) -> (MambaBlock, ParamStore) {
        let b = MambaBlock::new("m", c);
        let mut s = ParamStore::new();
        b.init_params(&mut s, &mut rng(seed)).unwrap();
        (b, s)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(b: &MambaBlock, s: &ParamStore, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let y = b.forward(&mut tape, s, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shape_is_preserved() {
        for &(e, n, w) in &[(1, 4, 2), (2, 3, 4), (1, 1, 9)] {
            let (b, s) = block(cfg(32, e, n, w), 1);
            let y = run(&b, &s, &random(&[7, 32], 2));
            assert_eq!(y.shape(), &[7, 32]);
            let y = run(&b, &s, &random(&[3, 5, 32], 3));
            assert_eq!(y.shape(), &[3, 5, 32]);
        }
    }

    #[test]
    fn param_count_matches_store() {
        for &(d, e, n, w, skip) in &[(5, 1, 3, 2, true), (4, 2, 6, 3, false)] {
            let c = MambaConfig {
                d_model: d,
                expand: e,
                state_size: n,
                conv_width: w,
                skip,
            };
            let (_, s) = block(c, 4);
            assert_eq!(c.param_count(), s.num_trainable());
        }
    }

    #[test]
    fn wrong_token_dim_is_rejected() {
        let (b, s) = block(cfg(4, 1, 2, 2), 1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 5])).unwrap();
        assert!(matches!(
            b.forward(&mut tape, &s, x),
            Err(Error::Shape { .. })
        ));
    }

    fn zero_biases(s: &mut ParamStore) {
        let names: Vec<String> = s
            .names()
            .filter(|n| n.ends_with("/bias"))
            .map(str::to_string)
            .collect();
        for n in names {
            let shape = s.value(&n).unwrap().shape().to_vec();
            s.set(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zeros_propagate() {
        let (b, mut s) = block(cfg(6, 1, 4, 2), 5);
        zero_biases(&mut s);
        let y = run(&b, &s, &Tensor::zeros(&[4, 6]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_reduces_to_scan_branch() {
        let (b, mut s) = block(cfg(3, 1, 2, 2), 6);
        // silu(g0) = 1
        let mut g0 = 1.0;
        for _ in 0..60 {
            g0 -= (kernels::silu(g0) - 1.0) / kernels::silu_grad(g0);
        }
        s.set("m/in_proj_b/weight", Tensor::zeros(&[3, 3])).unwrap();
        s.set("m/in_proj_b/bias", Tensor::full(&[3], g0)).unwrap();
        let x = random(&[5, 3], 7);
        let y = run(&b, &s, &x);

        let mut tape = Tape::new();
        let xv = tape.input(x).unwrap();
        let h = linear(&mut tape, &s, "m/in_proj_a", xv).unwrap();
        let k = tape.param(&s, "m/conv/kernel").unwrap();
        let cb = tape.param(&s, "m/conv/bias").unwrap();
        let h = tape.causal_conv1d(h, k, cb).unwrap();
        let h = tape.silu(h).unwrap();
        let u = tape.value(h).clone();
        let scanned =
            ssm::selective_scan(&u, &SsmParams::from_store(&s, "m/ssm").unwrap()).unwrap();
        let sv = tape.input(scanned).unwrap();
        let out = linear(&mut tape, &s, "m/out_proj", sv).unwrap();
        assert!(tape.value(out).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn block_is_causal() {
        let (b, s) = block(cfg(4, 2, 3, 3), 8);
        let x = random(&[9, 4], 9);
        let base = run(&b, &s, &x);
        for t in 0..9 {
            let mut xp = x.clone();
            xp.data_mut()[t * 4 + 2] += 1.0;
            let y = run(&b, &s, &xp);
            assert_eq!(
                &base.data()[..t * 4],
                &y.data()[..t * 4],
                "leak into t < {t}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, mut s) = block(cfg(3, 1, 2, 2), 10);
        s.insert("x", random(&[4, 3], 11)).unwrap();
        let report = gradcheck::check(&s, 1e-5, |tape, st| {
            let x = tape.param(st, "x")?;
            let y = b.forward(tape, st, x)?;
            tape.mean(y)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{:?}", report.worst());
    }
}
