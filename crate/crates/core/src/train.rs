//! Optimization, evaluation and checkpoint persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TimeMachine};
use crate::numerics::{rng, ParamStore, Tape, Tensor};

pub const EPOCH_LOG_HEADER: &str = "epoch,train_mse,val_mse,val_mae,seconds";

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b) * (a - b))?.mean())
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(pred.zip_map(target, |a, b| (a - b).abs())?.mean())
}

/// Bias-corrected Adam over the trainable parameters of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let shape = p.value.shape().to_vec();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((th, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *th -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off when absent.
    pub clip: Option<f64>,
    /// Stop once the best validation MSE falls below this value.
    pub target_val_mse: Option<f64>,
    /// Write wall-clock seconds into the epoch log; when off the column is 0.
    pub log_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 2024,
            clip: None,
            target_val_mse: None,
            log_seconds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if let Some(c) = self.clip {
            if c <= 0.0 || c.is_nan() {
                return Err(Error::Config(format!("clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:.3}",
            self.epoch, self.train_mse, self.val_mse, self.val_mae, self.seconds
        )
    }
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub optimizer: Adam,
}

/// Trains in place; on return `model` holds the parameters of the best validation epoch.
pub fn train_loop(
    model: &mut TimeMachine,
    train: &WindowDataset,
    val: &WindowDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(model.config(), train)?;
    check_dataset(model.config(), val)?;
    let mut r = rng(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = train.order(Some(&mut r));
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(idx)?;
            let loss = train_step(model, &mut adam, &x, &y, cfg, &mut r)
                .and_then(|l| {
                    if l.is_finite() {
                        Ok(l)
                    } else {
                        Err(Error::NonFinite(format!("loss = {l}")))
                    }
                })
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Diverged(diagnostics(model, epoch, bi, &what)),
                    other => other,
                })?;
            loss_sum += loss * idx.len() as f64;
            count += idx.len();
        }
        let val_metrics = evaluate(model, val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_mse: loss_sum / count as f64,
            val_mse: val_metrics.mse,
            val_mae: val_metrics.mae,
            seconds: if cfg.log_seconds {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!("{}", rec.csv_row());
        on_epoch(&rec);
        if best.as_ref().is_none_or(|b| rec.val_mse < b.1) {
            let mut snapshot = model.params().clone();
            snapshot.zero_grad();
            best = Some((epoch, rec.val_mse, snapshot));
        }
        records.push(rec);
        if let (Some(target), Some(b)) = (cfg.target_val_mse, &best) {
            if b.1 < target {
                log::info!("validation target {target} reached at epoch {epoch}");
                break;
            }
        }
    }

    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_mse,
        optimizer: adam,
    })
}

fn train_step(
    model: &mut TimeMachine,
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
    r: &mut crate::numerics::Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pred = model.forward(&mut tape, model.params(), x, true, r)?;
    let target = tape.input(y.clone())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq)?;
    let value = tape.value(loss).item();
    let store = model.params_mut();
    store.zero_grad();
    tape.backward(loss, store)?;
    if let Some(c) = cfg.clip {
        clip_grad_norm(store, c);
    }
    adam.step(store);
    Ok(value)
}

fn diagnostics(model: &TimeMachine, epoch: usize, batch: usize, what: &str) -> String {
    let mut s =
        format!("non-finite value at epoch {epoch}, batch {batch}: {what}\nparameter norms:");
    for (name, p) in model.params().iter() {
        s.push_str(&format!(
            "\n  {name}: |value| = {:.4e}, |grad| = {:.4e}",
            p.value.norm(),
            p.grad.norm()
        ));
    }
    s
}

fn check_dataset(config: &ModelConfig, ds: &WindowDataset) -> Result<()> {
    if ds.channels() != config.channels {
        return Err(Error::Checkpoint(format!(
            "model expects M={} channels but the dataset has {}",
            config.channels,
            ds.channels()
        )));
    }
    if ds.lookback() != config.lookback || ds.horizon() != config.horizon {
        return Err(Error::Config(format!(
            "windows are (L={}, T={}) but the model is (L={}, T={})",
            ds.lookback(),
            ds.horizon(),
            config.lookback,
            config.horizon
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

fn batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Sums per-window errors in window order, so the result does not depend on batching.
fn reduce(parts: Vec<Vec<(f64, f64)>>, windows: usize) -> Metrics {
    let mut n = 0usize;
    let (mut se, mut ae) = (0.0, 0.0);
    for (s, a) in parts.into_iter().flatten() {
        se += s;
        ae += a;
        n += 1;
    }
    let per_window = |v: f64| v / n as f64;
    Metrics {
        mse: per_window(se),
        mae: per_window(ae),
        windows,
    }
}

/// Mean squared and absolute error of each window in a batch.
fn error_sums(pred: &Tensor, y: &Tensor) -> Result<Vec<(f64, f64)>> {
    let d = pred.zip_map(y, |a, b| a - b)?;
    let per = d.numel() / d.shape()[0];
    Ok(d.data()
        .chunks(per)
        .map(|w| {
            (
                w.iter().map(|v| v * v).sum::<f64>() / per as f64,
                w.iter().map(|v| v.abs()).sum::<f64>() / per as f64,
            )
        })
        .collect())
}

/// Per-window `(mse, mae)` in window order, dropout off, on the standardized scale.
pub fn window_metrics(
    model: &TimeMachine,
    ds: &WindowDataset,
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    check_dataset(model.config(), ds)?;
    let parts = batches(ds.len(), batch_size)
        .par_iter()
        .map(|idx| {
            let (x, y) = ds.batch(idx)?;
            error_sums(&model.predict(&x)?, &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// MSE/MAE averaged over every window of `ds`.
pub fn evaluate(model: &TimeMachine, ds: &WindowDataset, batch_size: usize) -> Result<Metrics> {
    Ok(reduce(
        vec![window_metrics(model, ds, batch_size)?],
        ds.len(),
    ))
}

/// Repeats each channel's last observed value across the horizon.
pub fn persistence_forecast(x: &Tensor, horizon: usize) -> Tensor {
    let l = x.last_dim();
    let rows = x.numel() / l;
    let data = x
        .data()
        .chunks(l)
        .flat_map(|row| std::iter::repeat_n(row[l - 1], horizon))
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = horizon;
    debug_assert_eq!(rows * horizon, shape.iter().product::<usize>());
    Tensor::new(&shape, data).expect("persistence shape")
}

pub fn persistence_baseline(ds: &WindowDataset, batch_size: usize) -> Result<Metrics> {
    let parts = batches(ds.len(), batch_size)
        .iter()
        .map(|idx| {
            let (x, y) = ds.batch(idx)?;
            error_sums(&persistence_forecast(&x, ds.horizon()), &y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts, ds.len()))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_mse: Option<f64>,
    pub dataset: Option<String>,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: String,
    config: ModelConfig,
    run: RunMeta,
    optimizer: Option<AdamMeta>,
}

/// Named parameters plus the configuration needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub run: RunMeta,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn from_model(model: &TimeMachine, run: RunMeta, optimizer: Option<Adam>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            run,
            params: model.params().clone(),
            optimizer,
        }
    }

    pub fn into_model(self) -> Result<TimeMachine> {
        TimeMachine::from_params(self.config, self.params)
    }

    /// Refuses a checkpoint whose channel count differs from the data's.
    pub fn ensure_channels(&self, m: usize) -> Result<()> {
        if self.config.channels != m {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with M={} channels, dataset has M={m}",
                self.config.channels
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            precision: "f64".into(),
            config: self.config.clone(),
            run: self.run.clone(),
            optimizer: self.optimizer.as_ref().map(|a| AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            }),
        };
        let meta = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("metadata encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, p) in self.params.iter() {
            write_record(&mut out, name, &p.value);
        }
        if let Some(a) = &self.optimizer {
            for (name, t) in &a.m {
                write_record(&mut out, &format!("{ADAM_M}{name}"), t);
            }
            for (name, t) in &a.v {
                write_record(&mut out, &format!("{ADAM_V}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "bad magic bytes (not a TMCK file)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        while r.pos < bytes.len() {
            let (name, t) = r.record()?;
            if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else {
                params
                    .insert(name, t)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
            }
        }
        let optimizer = header.optimizer.map(|a| Adam {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            m,
            v,
        });
        Ok(Checkpoint {
            config: header.config,
            run: header.run,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => self
                .take(numel.saturating_mul(8))?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DTYPE_F32 => self
                .take(numel.saturating_mul(4))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => {
                return Err(Error::Checkpoint(format!(
                    "{name}: unknown dtype tag {other}"
                )))
            }
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, sinusoid_series, SplitRule};
    use crate::model::ChannelMode;

    #[test]
    fn loss_examples() {
        let z = Tensor::zeros(&[2]);
        let one = Tensor::ones(&[2]);
        assert_eq!(mse(&z, &one).unwrap(), 1.0);
        assert_eq!(mae(&z, &one).unwrap(), 1.0);
        assert_eq!(mse(&one, &one).unwrap(), 0.0);
        let pm = Tensor::from_vec(vec![1.0, -1.0]);
        assert_eq!(mse(&pm, &z).unwrap(), 1.0);
        assert_eq!(mae(&pm, &z).unwrap(), 1.0);
        assert!(mse(&z, &Tensor::zeros(&[3])).is_err());
    }

    fn scalar_store(theta: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(theta)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.zero_grad();
        s.accumulate_grad("theta", &Tensor::scalar(g)).unwrap();
    }

    #[test]
    fn adam_first_step() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, 1.0);
        let mut a = Adam::new(0.1);
        a.step(&mut s);
        let th = s.value("theta").unwrap().item();
        assert!((th - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(a.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut s = scalar_store(0.37);
        let mut a = Adam::new(0.1);
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            a.step(&mut s);
        }
        assert_eq!(s.value("theta").unwrap().item(), 0.37);
    }

    #[test]
    fn adam_matches_hand_rolled_trajectory() {
        // f(θ) = (θ - 3)², gradient 2(θ - 3)
        let (lr, b1, b2, eps) = (0.05_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let mut theta = 0.5_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (theta - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }

        let mut s = scalar_store(0.5);
        let mut a = Adam::new(lr);
        for want in expected {
            let th = s.value("theta").unwrap().item();
            set_grad(&mut s, 2.0 * (th - 3.0));
            a.step(&mut s);
            assert!((s.value("theta").unwrap().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, -10.0);
        assert_eq!(clip_grad_norm(&mut s, 2.0), 10.0);
        assert_eq!(s.grad("theta").unwrap().item(), -2.0);
    }

    #[test]
    fn persistence_repeats_last_value() {
        let x = Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = persistence_forecast(&x, 2);
        assert_eq!(p.data(), &[3.0, 3.0, 6.0, 6.0]);
    }

    fn toy_model(m: usize, l: usize, t: usize) -> TimeMachine {
        TimeMachine::new(ModelConfig {
            lookback: l,
            horizon: t,
            channels: m,
            n1: 8,
            n2: 4,
            dropout: 0.1,
            channel_mode: ChannelMode::Auto,
            state_size: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let p = prepare(sinusoid_series(120, 2, 12.0), SplitRule::Ratio, 8, 4).unwrap();
        let mut model = toy_model(2, 8, 4);
        let before = model.params().clone();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            batch_size: 16,
            ..TrainConfig::default()
        };
        train_loop(&mut model, &p.train, &p.val, &cfg, |_| {}).unwrap();
        for (name, param) in before.iter() {
            assert_eq!(param.value, *model.params().value(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn one_epoch_round_trips_through_a_checkpoint() {
        let p = prepare(
            sinusoid_series(100, 1, 10.0),
            SplitRule::Borders([30, 60, 100]),
            8,
            4,
        )
        .unwrap();
        assert_eq!(p.train.len(), 19);
        let mut model = toy_model(1, 8, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train_loop(&mut model, &p.train, &p.val, &cfg, |_| {}).unwrap();
        assert_eq!(out.records.len(), 1);

        let ck = Checkpoint::from_model(&model, RunMeta::default(), Some(out.optimizer.clone()));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.optimizer.as_ref(), Some(&out.optimizer));
        let restored = back.into_model().unwrap();
        let val = evaluate(&restored, &p.val, 4).unwrap();
        assert_eq!(val.mse.to_bits(), out.best_val_mse.to_bits());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let ck = Checkpoint::from_model(&toy_model(1, 8, 4), RunMeta::default(), None);
        let mut bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        assert!(ck.ensure_channels(3).is_err());
        assert!(ck.ensure_channels(1).is_ok());
    }

    #[test]
    fn single_precision_records_load() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(b"w/x");
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&(-2.0f32).to_le_bytes());
        let (name, t) = Reader {
            bytes: &buf,
            pos: 0,
        }
        .record()
        .unwrap();
        assert_eq!(name, "w/x");
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn evaluation_rejects_channel_mismatch() {
        let p = prepare(sinusoid_series(100, 3, 10.0), SplitRule::Ratio, 8, 4).unwrap();
        let model = toy_model(2, 8, 4);
        assert!(matches!(
            evaluate(&model, &p.test, 8),
            Err(Error::Checkpoint(_))
        ));
    }
}
