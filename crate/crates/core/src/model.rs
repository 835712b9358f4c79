//! The four-Mamba forecaster.
//!
//! Input `[B, M, L]` is normalized, embedded twice along the time axis
//! (`L -> n1 -> n2`), processed by an inner pair of Mambas at `n2` and an
//! outer pair at `n1`, and projected back to the horizon `T`. In each pair one
//! block scans across tokens and the other scans the transposed view; their
//! outputs are summed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::{linear, linear_init, MambaBlock, MambaConfig};
use crate::numerics::{rng, ParamStore, Rng, Tape, Tensor, Var};

/// Variance floor of the instance normalizer: `std = sqrt(var + EPS^2)`.
pub const REVIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Mixing,
    Independence,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Revin,
    ZscoreInternal,
    None,
}

impl FromStr for ChannelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixing" => Ok(ChannelMode::Mixing),
            "independence" => Ok(ChannelMode::Independence),
            "auto" => Ok(ChannelMode::Auto),
            _ => Err(Error::Config(format!("unknown channel mode {s:?}"))),
        }
    }
}

impl fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelMode::Mixing => "mixing",
            ChannelMode::Independence => "independence",
            ChannelMode::Auto => "auto",
        })
    }
}

/// Picks mixing when the channel count is at least half the look-back.
pub fn resolve_channel_mode(channels: usize, lookback: usize, mode: ChannelMode) -> ChannelMode {
    match mode {
        ChannelMode::Auto if 2 * channels >= lookback => ChannelMode::Mixing,
        ChannelMode::Auto => ChannelMode::Independence,
        explicit => explicit,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub dropout: f64,
    pub channel_mode: ChannelMode,
    pub norm_mode: NormMode,
    pub revin_affine: bool,
    pub state_size: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub skip: bool,
    pub residual: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            channels: 1,
            n1: 256,
            n2: 128,
            dropout: 0.1,
            channel_mode: ChannelMode::Auto,
            norm_mode: NormMode::Revin,
            revin_affine: true,
            state_size: 256,
            expand: 1,
            conv_width: 2,
            skip: true,
            residual: true,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("n1", self.n1),
            ("n2", self.n2),
            ("state_size", self.state_size),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n1 <= self.n2 {
            return Err(Error::Config(format!(
                "embedding sizes must satisfy n1 > n2, got n1={} n2={}",
                self.n1, self.n2
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn resolved_mode(&self) -> ChannelMode {
        resolve_channel_mode(self.channels, self.lookback, self.channel_mode)
    }

    /// Token dimension seen by the transposed-view Mambas.
    fn transposed_dim(&self) -> usize {
        match self.resolved_mode() {
            ChannelMode::Independence => 1,
            _ => self.channels,
        }
    }

    fn mamba(&self, d_model: usize) -> MambaConfig {
        MambaConfig {
            d_model,
            expand: self.expand,
            state_size: self.state_size,
            conv_width: self.conv_width,
            skip: self.skip,
        }
    }
}

/// Exact number of trainable scalars for `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let (l, t, n1, n2) = (config.lookback, config.horizon, config.n1, config.n2);
    let embed = (l * n1 + n1) + (n1 * n2 + n2);
    let project = (n2 * n1 + n1) + (2 * n1 * t + t);
    let revin = if config.norm_mode == NormMode::Revin && config.revin_affine {
        2 * config.channels
    } else {
        0
    };
    let md = config.transposed_dim();
    let mambas = config.mamba(n1).param_count()
        + config.mamba(md).param_count()
        + config.mamba(n2).param_count()
        + config.mamba(md).param_count();
    embed + project + revin + mambas
}

/// Per-instance, per-channel statistics over the look-back axis.
#[derive(Clone, Debug)]
pub struct RevInState {
    /// `[B * M]`, row-major over `(b, m)`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RevInState {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let l = check_rank3(x, "revin")?.2;
        let mut mean = Vec::with_capacity(x.numel() / l);
        let mut std = Vec::with_capacity(x.numel() / l);
        for row in x.data().chunks(l) {
            let mu = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / l as f64;
            mean.push(mu);
            std.push((var + REVIN_EPS * REVIN_EPS).sqrt());
        }
        Ok(RevInState { mean, std })
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn denormalize(&self, y: &Tensor) -> Result<Tensor> {
        self.apply(y, |v, mu, sd| v * sd + mu)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let k = x.last_dim();
        if x.numel() / k != self.mean.len() {
            return Err(Error::shape(
                "revin rows",
                &[x.numel() / k],
                &[self.mean.len()],
            ));
        }
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_mut(k).enumerate() {
            row.iter_mut()
                .for_each(|v| *v = f(*v, self.mean[r], self.std[r]));
        }
        Ok(out)
    }
}

/// Normalizes `x: [B, M, L]`. Only `Revin` changes the values here; z-scoring
/// with training statistics happens in the data pipeline.
pub fn normalize(x: &Tensor, mode: NormMode) -> Result<(Tensor, Option<RevInState>)> {
    check_rank3(x, "normalize")?;
    match mode {
        NormMode::Revin => {
            let state = RevInState::fit(x)?;
            Ok((state.normalize(x)?, Some(state)))
        }
        NormMode::ZscoreInternal | NormMode::None => Ok((x.clone(), None)),
    }
}

fn check_rank3(x: &Tensor, context: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, m, l] => Ok((b, m, l)),
        _ => Err(Error::shape(context, x.shape(), &[0, 0, 0])),
    }
}

const OUTER_SEQ: &str = "model/mamba_outer_seq";
const OUTER_TRANS: &str = "model/mamba_outer_trans";
const INNER_SEQ: &str = "model/mamba_inner_seq";
const INNER_TRANS: &str = "model/mamba_inner_trans";

#[derive(Clone, Debug)]
pub struct TimeMachine {
    config: ModelConfig,
    params: ParamStore,
    outer_seq: MambaBlock,
    outer_trans: MambaBlock,
    inner_seq: MambaBlock,
    inner_trans: MambaBlock,
}

impl TimeMachine {
    /// Builds the network with freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut r = rng(model.config.seed);
        let c = &model.config;
        let p = &mut model.params;
        if c.norm_mode == NormMode::Revin && c.revin_affine {
            p.insert("model/revin/gain", Tensor::ones(&[c.channels]))?;
            p.insert("model/revin/shift", Tensor::zeros(&[c.channels]))?;
        }
        linear_init(p, "model/E1", c.lookback, c.n1, &mut r)?;
        linear_init(p, "model/E2", c.n1, c.n2, &mut r)?;
        model.outer_seq.init_params(p, &mut r)?;
        model.outer_trans.init_params(p, &mut r)?;
        model.inner_seq.init_params(p, &mut r)?;
        model.inner_trans.init_params(p, &mut r)?;
        linear_init(p, "model/P1", c.n2, c.n1, &mut r)?;
        linear_init(p, "model/P2", 2 * c.n1, c.horizon, &mut r)?;
        Ok(model)
    }

    /// Rebuilds a network from a saved configuration and parameter set.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config)?;
        let expected: Vec<(&str, &[usize])> = fresh
            .params
            .iter()
            .map(|(n, p)| (n, p.value.shape()))
            .collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != got {
            let missing: Vec<_> = expected
                .iter()
                .filter(|e| !got.contains(e))
                .map(|e| e.0)
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter set does not match configuration (mismatched: {missing:?})"
            )));
        }
        let mut model = Self::skeleton(fresh.config)?;
        model.params = params;
        Ok(model)
    }

    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let md = config.transposed_dim();
        Ok(TimeMachine {
            outer_seq: MambaBlock::new(OUTER_SEQ, config.mamba(config.n1)),
            outer_trans: MambaBlock::new(OUTER_TRANS, config.mamba(md)),
            inner_seq: MambaBlock::new(INNER_SEQ, config.mamba(config.n2)),
            inner_trans: MambaBlock::new(INNER_TRANS, config.mamba(md)),
            params: ParamStore::new(),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ChannelMode {
        self.config.resolved_mode()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_trainable()
    }

    /// Records the forward pass of `x: [B, M, L]` on `tape`; the result is `[B, M, T]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, m, l) = check_rank3(x, "model input")?;
        if m != c.channels || l != c.lookback {
            return Err(Error::shape(
                "model input (batch, channels, lookback)",
                x.shape(),
                &[b, c.channels, c.lookback],
            ));
        }

        // normalization
        let (x0, revin) = normalize(x, c.norm_mode)?;
        let mut h = tape.input(x0)?;
        if revin.is_some() && c.revin_affine {
            let gain = tape.param(store, "model/revin/gain")?;
            let shift = tape.param(store, "model/revin/shift")?;
            h = tape.channel_affine(h, gain, shift)?;
        }

        if self.mode() == ChannelMode::Independence {
            h = tape.reshape(h, &[b * m, 1, l])?;
        }

        // two-stage embedding
        let x1 = linear(tape, store, "model/E1", h)?;
        let u1 = tape.dropout(x1, c.dropout, training, rng)?;
        let x2 = linear(tape, store, "model/E2", u1)?;
        let u2 = tape.dropout(x2, c.dropout, training, rng)?;

        // inner pair at n2
        let inner = self.pair(tape, store, &self.inner_seq, &self.inner_trans, u2)?;
        let x3 = if c.residual {
            tape.add(inner, x2)?
        } else {
            inner
        };
        let x4 = linear(tape, store, "model/P1", x3)?;

        // outer pair at n1
        let x5 = self.pair(tape, store, &self.outer_seq, &self.outer_trans, u1)?;
        let skip = if c.residual { tape.add(x4, x1)? } else { x4 };
        let x6 = tape.concat(x5, skip)?;

        let mut y = linear(tape, store, "model/P2", x6)?;
        if self.mode() == ChannelMode::Independence {
            y = tape.reshape(y, &[b, m, c.horizon])?;
        }

        if let Some(state) = revin {
            if c.revin_affine {
                let gain = tape.param(store, "model/revin/gain")?;
                let shift = tape.param(store, "model/revin/shift")?;
                y = tape.channel_affine_inv(y, gain, shift, REVIN_EPS * REVIN_EPS)?;
            }
            y = tape.row_affine(y, &state.std, &state.mean)?;
        }
        Ok(y)
    }

    /// Sequence-view block plus transposed-view block, summed.
    fn pair(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &MambaBlock,
        trans: &MambaBlock,
        u: Var,
    ) -> Result<Var> {
        let left = seq.forward(tape, store, u)?;
        let ut = tape.transpose(u)?;
        let right = trans.forward(tape, store, ut)?;
        let right = tape.transpose(right)?;
        tape.add(left, right)
    }

    /// Evaluation-mode prediction for `x: [B, M, L]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut r = rng(self.config.seed);
        let y = self.forward(&mut tape, &self.params, x, false, &mut r)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use rand::Rng as _;

    fn small(mode: ChannelMode, m: usize, l: usize, t: usize) -> ModelConfig {
        ModelConfig {
            lookback: l,
            horizon: t,
            channels: m,
            n1: 8,
            n2: 4,
            dropout: 0.0,
            channel_mode: mode,
            state_size: 2,
            ..ModelConfig::default()
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn auto_mode_rule() {
        assert_eq!(
            resolve_channel_mode(862, 96, ChannelMode::Auto),
            ChannelMode::Mixing
        );
        assert_eq!(
            resolve_channel_mode(7, 96, ChannelMode::Auto),
            ChannelMode::Independence
        );
        assert_eq!(
            resolve_channel_mode(48, 96, ChannelMode::Auto),
            ChannelMode::Mixing
        );
        assert_eq!(
            resolve_channel_mode(47, 96, ChannelMode::Auto),
            ChannelMode::Independence
        );
        assert_eq!(
            resolve_channel_mode(1, 96, ChannelMode::Mixing),
            ChannelMode::Mixing
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n2 = c.n1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn revin_constant_and_standard_channels() {
        let x = Tensor::new(&[1, 2, 4], vec![3.0, 3.0, 3.0, 3.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        let (n, state) = normalize(&x, NormMode::Revin).unwrap();
        assert!(n.data()[..4].iter().all(|&v| v == 0.0));
        for (a, b) in n.data()[4..].iter().zip(&x.data()[4..]) {
            assert!((a - b).abs() < 1e-6);
        }
        let back = state.unwrap().denormalize(&n).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn revin_round_trip() {
        let x = random(&[3, 4, 10], 1).map(|v| 5.0 * v + 2.0);
        let (n, state) = normalize(&x, NormMode::Revin).unwrap();
        let back = state.unwrap().denormalize(&n).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn output_shape_both_modes() {
        for mode in [ChannelMode::Mixing, ChannelMode::Independence] {
            let model = TimeMachine::new(small(mode, 3, 10, 5)).unwrap();
            let y = model.predict(&random(&[2, 3, 10], 2)).unwrap();
            assert_eq!(y.shape(), &[2, 3, 5]);
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let model = TimeMachine::new(small(ChannelMode::Mixing, 3, 10, 5)).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros(&[2, 4, 10])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn constant_input_predicts_constant() {
        let model = TimeMachine::new(small(ChannelMode::Independence, 2, 10, 4)).unwrap();
        let mut model = model;
        let names: Vec<String> = model
            .params()
            .names()
            .filter(|n| n.ends_with("/bias"))
            .map(str::to_string)
            .collect();
        for n in names {
            let shape = model.params().value(&n).unwrap().shape().to_vec();
            model.params_mut().set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let mut data = vec![4.5; 10];
        data.extend(vec![-0.25; 10]);
        let y = model
            .predict(&Tensor::new(&[1, 2, 10], data).unwrap())
            .unwrap();
        for &v in &y.data()[..4] {
            assert!((v - 4.5).abs() < 1e-12);
        }
        for &v in &y.data()[4..] {
            assert!((v + 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_coincide_for_one_channel() {
        let x = random(&[3, 1, 12], 3);
        let a = TimeMachine::new(small(ChannelMode::Mixing, 1, 12, 4)).unwrap();
        let b = TimeMachine::new(small(ChannelMode::Independence, 1, 12, 4)).unwrap();
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn count_matches_instantiated_params() {
        for mode in [ChannelMode::Mixing, ChannelMode::Independence] {
            let mut c = small(mode, 3, 10, 5);
            assert_eq!(
                count_params(&c),
                TimeMachine::new(c.clone()).unwrap().num_params()
            );
            c.skip = false;
            c.norm_mode = NormMode::None;
            c.expand = 2;
            assert_eq!(
                count_params(&c),
                TimeMachine::new(c.clone()).unwrap().num_params()
            );
        }
    }

    #[test]
    fn count_growth_in_lookback_and_horizon() {
        let c = ModelConfig {
            channels: 7,
            ..ModelConfig::default()
        };
        let base = count_params(&c);
        let longer = count_params(&ModelConfig {
            lookback: c.lookback + 96,
            ..c.clone()
        });
        assert_eq!(longer - base, 96 * c.n1);
        let further = count_params(&ModelConfig {
            horizon: c.horizon + 96,
            ..c.clone()
        });
        assert_eq!(further - base, 96 * (2 * c.n1 + 1));
    }

    #[test]
    fn residual_paths_are_live() {
        let x = random(&[2, 2, 10], 4);
        let with = TimeMachine::new(small(ChannelMode::Independence, 2, 10, 4)).unwrap();
        let without = TimeMachine::new(ModelConfig {
            residual: false,
            ..small(ChannelMode::Independence, 2, 10, 4)
        })
        .unwrap();
        assert!(
            with.predict(&x)
                .unwrap()
                .max_abs_diff(&without.predict(&x).unwrap())
                > 1e-6
        );
    }

    #[test]
    fn end_to_end_gradients() {
        for mode in [ChannelMode::Mixing, ChannelMode::Independence] {
            let c = ModelConfig {
                lookback: 8,
                horizon: 4,
                channels: 2,
                ..small(mode, 2, 8, 4)
            };
            let model = TimeMachine::new(c).unwrap();
            let x = random(&[1, 2, 8], 5);
            let target = random(&[1, 2, 4], 6);
            let report = gradcheck::check(model.params(), 1e-5, |tape, s| {
                let y = model.forward(tape, s, &x, false, &mut rng(0))?;
                let t = tape.input(target.clone())?;
                let d = tape.sub(y, t)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{mode:?}: {:?}", report.worst());
        }
    }
}
