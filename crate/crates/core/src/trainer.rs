//! Two-phase training with Adam, checkpoints and the evaluation driver.
//!
//! A run has a DSM-only phase followed by a phase with the full pipeline.
//! Which matching mode each phase uses comes from [`TrainConfig::mode`]:
//!
//! | mode           | phase 1      | phase 2    |
//! |----------------|--------------|------------|
//! | `two-stage`    | post-process | two-stage  |
//! | `post-process` | post-process | post-process |
//! | `one-stage`    | one-stage    | one-stage  |
//!
//! Samples of a batch run on independent tapes in parallel and their
//! gradients are averaged in batch order, so results do not depend on the
//! number of worker threads.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::assignment::{hungarian_max, PermutationMatrix};
use crate::data::{derive_seed, PairSample, Reader};
use crate::error::{config, Error, Result};
use crate::features::{FeatureConfig, FeatureParams};
use crate::gradcore::Tensor;
use crate::matchnet::{forward, LossKind, MatchConfig, MatchMode, Phase};
use crate::metrics::{
    relaxed_precision, strict_precision, transform_errors, PrecisionReport, TransformErrors, TransformSummary,
};
use crate::rigid::procrustes;
use crate::sinkhorn::SinkhornConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. `names` label the tensors in errors.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: AdamConfig,
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "adam got {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let name = names.get(i).map(String::as_str).unwrap_or("?");
        if g.shape() != params[i].shape() {
            return Err(Error::Input(format!("gradient of {name} is {:?}, param {:?}", g.shape(), params[i].shape())));
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!("gradient of {name} has {} at element {k}", g.data()[k])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Every knob of a training run. Serialized as flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Points per cloud.
    pub n: usize,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub adam: AdamConfig,
    pub sinkhorn: SinkhornConfig,
    pub features: FeatureConfig,
    pub mode: MatchMode,
    pub loss: LossKind,
    pub gumbel: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 32,
            batch_size: 8,
            phase1_epochs: 30,
            phase2_epochs: 30,
            adam: AdamConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            features: FeatureConfig { k: 8, widths: vec![32, 32], dim: 32, heads: 1, slope: 0.2 },
            mode: MatchMode::TwoStage,
            loss: LossKind::Product,
            gumbel: true,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    /// Full-size schedule: 100 + 100 epochs with the large network.
    pub fn paper() -> Self {
        Self { phase1_epochs: 100, phase2_epochs: 100, features: FeatureConfig::large(), ..Self::default() }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig { features: self.features.clone(), sinkhorn: self.sinkhorn, loss: self.loss, gumbel: self.gumbel }
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// Matching mode used during `epoch` (0-based).
    pub fn mode_at(&self, epoch: usize) -> MatchMode {
        match self.mode {
            MatchMode::TwoStage if epoch < self.phase1_epochs => MatchMode::PostProcess,
            m => m,
        }
    }

    pub fn phase_at(&self, epoch: usize) -> usize {
        if epoch < self.phase1_epochs {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.batch_size == 0 {
            return Err(config("n and batch_size must be positive"));
        }
        if self.total_epochs() == 0 {
            return Err(config("at least one epoch is required"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(config("adam betas must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(config("adam epsilon must be positive"));
        }
        self.sinkhorn.validate()?;
        self.features.validate_for(self.n)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "n" => self.n = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "phase1_epochs" => self.phase1_epochs = parse_value(key, v)?,
            "phase2_epochs" => self.phase2_epochs = parse_value(key, v)?,
            "lr" => self.adam.lr = parse_value(key, v)?,
            "beta1" => self.adam.beta1 = parse_value(key, v)?,
            "beta2" => self.adam.beta2 = parse_value(key, v)?,
            "adam_eps" => self.adam.eps = parse_value(key, v)?,
            "mu" => self.sinkhorn.mu = parse_value(key, v)?,
            "iters" => self.sinkhorn.iters = parse_value(key, v)?,
            "k" => self.features.k = parse_value(key, v)?,
            "widths" => {
                self.features.widths =
                    v.split(',').map(|w| parse_value(key, w)).collect::<Result<Vec<usize>>>()?
            }
            "dim" => self.features.dim = parse_value(key, v)?,
            "heads" => self.features.heads = parse_value(key, v)?,
            "slope" => self.features.slope = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "loss" => self.loss = v.parse()?,
            "gumbel" => self.gumbel = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            self.set(k, v).map_err(|e| config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Canonical text form; [`TrainConfig::from_kv`] inverts it exactly.
    pub fn to_kv(&self) -> String {
        let widths: Vec<String> = self.features.widths.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("n", self.n.to_string());
        put("batch_size", self.batch_size.to_string());
        put("phase1_epochs", self.phase1_epochs.to_string());
        put("phase2_epochs", self.phase2_epochs.to_string());
        put("lr", format!("{:?}", self.adam.lr));
        put("beta1", format!("{:?}", self.adam.beta1));
        put("beta2", format!("{:?}", self.adam.beta2));
        put("adam_eps", format!("{:?}", self.adam.eps));
        put("mu", format!("{:?}", self.sinkhorn.mu));
        put("iters", self.sinkhorn.iters.to_string());
        put("k", self.features.k.to_string());
        put("widths", widths.join(","));
        put("dim", self.features.dim.to_string());
        put("heads", self.features.heads.to_string());
        put("slope", format!("{:?}", self.features.slope));
        put("mode", self.mode.to_string());
        put("loss", self.loss.to_string());
        put("gumbel", self.gumbel.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// SHA-256 of [`TrainConfig::to_kv`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv().as_bytes()).into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One row of the epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: usize,
    pub loss: f64,
    pub strict_precision: f64,
    pub relaxed_k1: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,phase,loss,strict_precision,relaxed_K1";

pub fn epoch_csv(history: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for e in history {
        let _ = writeln!(s, "{},{},{:?},{:?},{:?}", e.epoch, e.phase, e.loss, e.strict_precision, e.relaxed_k1);
    }
    s
}

/// Per-sample result of a training step.
#[derive(Debug, Clone)]
pub struct SampleStep {
    pub grads: Vec<Tensor>,
    pub loss: f64,
    pub strict: f64,
    pub relaxed_k1: f64,
}

/// Forward and backward of one pair in training mode.
pub fn sample_step(
    params: &FeatureParams,
    mcfg: &MatchConfig,
    mode: MatchMode,
    pair: &PairSample,
    seed: u64,
) -> Result<SampleStep> {
    // pairs are validated up front, so non-finite values here come from the parameters
    let f = match forward(&pair.x, &pair.y, params, mcfg, mode, Phase::Train, seed) {
        Err(Error::Input(msg)) if pair.x.all_finite() && pair.y.all_finite() => return Err(Error::Diverged(msg)),
        r => r?,
    };
    let loss = f.loss(&pair.gt)?;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss is {loss}")));
    }
    let grads = f.backward(&pair.gt)?;
    let m = match f.permutation() {
        Some(m) => m.clone(),
        None => hungarian_max(f.dsm().expect("post-process records P"))?,
    };
    let strict = strict_precision(&m, &pair.gt)?;
    let relaxed_k1 = if pair.n() > 1 { relaxed_precision(&m, &pair.gt, &pair.y, 1)? } else { strict };
    Ok(SampleStep { grads, loss, strict, relaxed_k1 })
}

/// Mean of per-sample steps; summed sequentially in the given order.
pub fn batch_step(
    params: &FeatureParams,
    mcfg: &MatchConfig,
    mode: MatchMode,
    batch: &[(&PairSample, u64)],
) -> Result<SampleStep> {
    let steps: Vec<SampleStep> =
        batch.par_iter().map(|(pair, seed)| sample_step(params, mcfg, mode, pair, *seed)).collect::<Result<_>>()?;
    let k = steps.len() as f64;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut strict, mut relaxed) = (0.0, 0.0, 0.0);
    for s in &steps {
        for (acc, g) in grads.iter_mut().zip(&s.grads) {
            acc.add_assign(g);
        }
        loss += s.loss;
        strict += s.strict;
        relaxed += s.relaxed_k1;
    }
    for g in &mut grads {
        *g = g.map(|v| v / k);
    }
    Ok(SampleStep { grads, loss: loss / k, strict: strict / k, relaxed_k1: relaxed / k })
}

/// Parameters, optimizer state and history of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: FeatureParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// The checkpoint holds the state after the last good epoch.
    Diverged { epoch: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub status: TrainStatus,
}

/// Epoch-by-epoch driver; [`train`] runs it to completion.
pub struct Trainer<'a> {
    ckpt: Checkpoint,
    pairs: &'a [PairSample],
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, pairs: &'a [PairSample]) -> Result<Self> {
        config.validate()?;
        let params = FeatureParams::init(&config.features, derive_seed(config.seed, 1, 0))?;
        let adam = AdamState::new(params.tensors());
        Self::resume(Checkpoint { config, params, adam, epoch: 0, history: Vec::new() }, pairs)
    }

    pub fn resume(ckpt: Checkpoint, pairs: &'a [PairSample]) -> Result<Self> {
        ckpt.config.validate()?;
        if pairs.is_empty() {
            return Err(config("training needs at least one pair"));
        }
        if let Some(p) = pairs.iter().find(|p| p.n() != ckpt.config.n) {
            return Err(Error::Input(format!("training pair has {} points, config says n = {}", p.n(), ckpt.config.n)));
        }
        Ok(Self { ckpt, pairs })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn finished(&self) -> bool {
        self.ckpt.epoch >= self.ckpt.config.total_epochs()
    }

    /// Runs one epoch. On error the state is left as it was before the epoch.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = self.ckpt.config.clone();
        let epoch = self.ckpt.epoch;
        let mode = cfg.mode_at(epoch);
        let mcfg = cfg.match_config();
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, epoch as u64)));

        let mut params = self.ckpt.params.clone();
        let mut adam = self.ckpt.adam.clone();
        let names = params.names().to_vec();
        let (mut loss, mut strict, mut relaxed) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&PairSample, u64)> = chunk
                .iter()
                .map(|&i| (&self.pairs[i], derive_seed(cfg.seed, 3 + epoch as u64, i as u64)))
                .collect();
            let step = batch_step(&params, &mcfg, mode, &batch)?;
            adam_step(params.tensors_mut(), &step.grads, &mut adam, cfg.adam, &names)?;
            let w = chunk.len() as f64;
            loss += step.loss * w;
            strict += step.strict * w;
            relaxed += step.relaxed_k1 * w;
        }
        if let Some(t) = params.tensors().iter().position(|t| !t.all_finite()) {
            return Err(Error::Diverged(format!("parameter {} became non-finite", names[t])));
        }
        let total = self.pairs.len() as f64;
        let log = EpochLog {
            epoch,
            phase: cfg.phase_at(epoch),
            loss: loss / total,
            strict_precision: strict / total,
            relaxed_k1: relaxed / total,
        };
        self.ckpt.params = params;
        self.ckpt.adam = adam;
        self.ckpt.epoch += 1;
        self.ckpt.history.push(log);
        Ok(log)
    }
}

/// Trains from scratch on `pairs` for the configured number of epochs.
pub fn train(config: TrainConfig, pairs: &[PairSample]) -> Result<TrainResult> {
    continue_training(Trainer::new(config, pairs)?)
}

/// Runs a trainer until its schedule is done or it diverges.
pub fn continue_training(mut trainer: Trainer<'_>) -> Result<TrainResult> {
    while !trainer.finished() {
        let epoch = trainer.checkpoint().epoch;
        match trainer.run_epoch() {
            Ok(_) => {}
            Err(Error::Diverged(message)) => {
                return Ok(TrainResult {
                    checkpoint: trainer.into_checkpoint(),
                    status: TrainStatus::Diverged { epoch, message },
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainResult { checkpoint: trainer.into_checkpoint(), status: TrainStatus::Completed })
}

const CKPT_MAGIC: &[u8; 4] = b"PMCK";
const CKPT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.error("string is not UTF-8"))
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 4 {
        return Err(r.error(format!("tensor rank {rank} is not supported")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        data.push(r.f64()?);
    }
    Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))
}

impl Checkpoint {
    /// Binary layout: magic `PMCK`, version, config hash, config text,
    /// epoch, Adam step, then per tensor its name, value and both moments,
    /// then the epoch history.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut buf, CKPT_VERSION);
        buf.extend_from_slice(&self.config.hash());
        put_str(&mut buf, &self.config.to_kv());
        put_u64(&mut buf, self.epoch as u64);
        put_u64(&mut buf, self.adam.step);
        put_u32(&mut buf, self.params.names().len() as u32);
        for (i, name) in self.params.names().iter().enumerate() {
            put_str(&mut buf, name);
            put_tensor(&mut buf, &self.params.tensors()[i]);
            put_tensor(&mut buf, &self.adam.m[i]);
            put_tensor(&mut buf, &self.adam.v[i]);
        }
        put_u32(&mut buf, self.history.len() as u32);
        for e in &self.history {
            put_u64(&mut buf, e.epoch as u64);
            put_u32(&mut buf, e.phase as u32);
            for v in [e.loss, e.strict_precision, e.relaxed_k1] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, source);
        r.magic(CKPT_MAGIC)?;
        r.version(CKPT_VERSION)?;
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let text = get_str(&mut r)?;
        let config = TrainConfig::from_kv(&text).map_err(|e| r.error(format!("embedded config: {e}")))?;
        if config.hash() != hash {
            return Err(r.error(format!(
                "config hash mismatch: stored {}, computed {}",
                hex(&hash),
                hex(&config.hash())
            )));
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut named = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name = get_str(&mut r)?;
            named.push((name, get_tensor(&mut r)?));
            m.push(get_tensor(&mut r)?);
            v.push(get_tensor(&mut r)?);
        }
        let params = FeatureParams::from_named(&config.features, named).map_err(|e| r.error(e.to_string()))?;
        let hist_len = r.u32()? as usize;
        let mut history = Vec::new();
        for _ in 0..hist_len {
            history.push(EpochLog {
                epoch: r.u64()? as usize,
                phase: r.u32()? as usize,
                loss: r.f64()?,
                strict_precision: r.f64()?,
                relaxed_k1: r.f64()?,
            });
        }
        r.finish()?;
        Ok(Self { config, params, adam: AdamState { step, m, v }, epoch, history })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    /// SHA-256 over parameters and optimizer moments.
    pub fn state_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in self.params.tensors().iter().chain(&self.adam.m).chain(&self.adam.v) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.update(self.adam.step.to_le_bytes());
        h.finalize().into()
    }
}

/// Metrics of one evaluated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    pub m: PermutationMatrix,
    pub precision: PrecisionReport,
    /// Set for rigid pairs whose predicted matching supports Procrustes.
    pub transform: Option<TransformErrors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub pairs: Vec<PairEval>,
    pub mean: PrecisionReport,
    /// Over rigid pairs; `None` when there are none.
    pub transform: Option<TransformSummary>,
    /// Rigid pairs whose predicted matching was too degenerate for Procrustes.
    pub degenerate: usize,
}

impl EvalReport {
    pub fn strict(&self) -> f64 {
        self.mean.strict
    }
}

/// Scores given matchings against the pairs' ground truth.
pub fn evaluate_assignments(pairs: &[PairSample], preds: Vec<PermutationMatrix>, ks: &[usize]) -> Result<EvalReport> {
    if pairs.len() != preds.len() {
        return Err(Error::Input(format!("{} pairs but {} predictions", pairs.len(), preds.len())));
    }
    let mut out = Vec::with_capacity(pairs.len());
    let mut errors = Vec::new();
    let mut degenerate = 0;
    for (pair, m) in pairs.iter().zip(preds) {
        let precision = PrecisionReport::compute(&m, &pair.gt, &pair.y, ks)?;
        let transform = match &pair.transform {
            None => None,
            Some(truth) => match procrustes(&pair.x, &pair.y, &m) {
                Ok(est) => Some(transform_errors(&est, truth)?),
                Err(Error::Degenerate(_)) => {
                    degenerate += 1;
                    None
                }
                Err(e) => return Err(e),
            },
        };
        errors.extend(transform);
        out.push(PairEval { m, precision, transform });
    }
    let mean = PrecisionReport::mean(&out.iter().map(|p| p.precision.clone()).collect::<Vec<_>>())
        .ok_or_else(|| config("evaluation needs at least one pair"))?;
    let transform = (!errors.is_empty()).then(|| TransformSummary::aggregate(&errors));
    Ok(EvalReport { ks: ks.to_vec(), pairs: out, mean, transform, degenerate })
}

/// Noise-free matching of `pair` with the checkpoint's mode.
pub fn predict(ckpt: &Checkpoint, x: &crate::cloud::PointCloud, y: &crate::cloud::PointCloud) -> Result<PermutationMatrix> {
    Ok(predict_with_scores(ckpt, x, y)?.0)
}

/// Like [`predict`], also returning the matrix the assignment maximises:
/// the Sinkhorn output, or the similarity matrix in one-stage mode.
pub fn predict_with_scores(
    ckpt: &Checkpoint,
    x: &crate::cloud::PointCloud,
    y: &crate::cloud::PointCloud,
) -> Result<(PermutationMatrix, Tensor)> {
    for c in [x, y] {
        if c.len() != ckpt.config.n {
            return Err(Error::Input(format!(
                "cloud has {} points but the checkpoint was trained with n = {}",
                c.len(),
                ckpt.config.n
            )));
        }
    }
    let f = forward(x, y, &ckpt.params, &ckpt.config.match_config(), ckpt.config.mode, Phase::Eval, 0)?;
    let m = f.permutation().expect("evaluation always projects").clone();
    let scores = f.dsm().unwrap_or_else(|| f.similarity()).clone();
    Ok((m, scores))
}

/// Evaluates `ckpt` on `pairs` at every relaxation level in `ks`.
pub fn evaluate(ckpt: &Checkpoint, pairs: &[PairSample], ks: &[usize]) -> Result<EvalReport> {
    if let Some(p) = pairs.iter().find(|p| p.n() != ckpt.config.n) {
        return Err(Error::Input(format!(
            "dataset pair has {} points but the checkpoint was trained with n = {}",
            p.n(),
            ckpt.config.n
        )));
    }
    let preds: Vec<PermutationMatrix> = pairs.par_iter().map(|p| predict(ckpt, &p.x, &p.y)).collect::<Result<_>>()?;
    evaluate_assignments(pairs, preds, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_split, PairConfig, Setting, ShapeCategory, SplitPart};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            n: 12,
            batch_size: 4,
            phase1_epochs: 2,
            phase2_epochs: 2,
            features: FeatureConfig { k: 4, widths: vec![8], dim: 8, heads: 1, slope: 0.2 },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn pairs(n: usize, count: usize) -> Vec<PairSample> {
        let split = make_split(Setting::Upc, &ShapeCategory::ALL, PairConfig { n, ..PairConfig::default() }, 1).unwrap();
        split.pairs(SplitPart::Train, count).unwrap()
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::filled(&[2, 2], 0.5)];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut s, AdamConfig::default(), &names(1)).unwrap();
        assert_eq!(p[0], Tensor::filled(&[2, 2], 0.5));
        assert_eq!(s.m[0], Tensor::zeros(&[2, 2]));
        assert_eq!(s.v[0], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, 7.0, -3.0] {
            let mut p = vec![Tensor::scalar(1.0)];
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, AdamConfig::default(), &names(1)).unwrap();
            let delta = 1.0 - p[0].item();
            assert!((delta - 1e-3 * g.signum()).abs() < 1e-8, "{g}: {delta}");
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * p[0].item());
            adam_step(&mut p, &[g], &mut s, cfg, &names(1)).unwrap();
        }
        assert!(p[0].item().abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn adam_reports_nan_parameter() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let names = vec!["edge0.weight".to_string(), "proj.bias".to_string()];
        let g = [Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        match adam_step(&mut p, &g, &mut s, AdamConfig::default(), &names) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("proj.bias"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::paper();
        c.mode = MatchMode::OneStage;
        c.loss = LossKind::CrossEntropy;
        c.adam.lr = 0.0003;
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert_eq!(TrainConfig::from_kv("").unwrap(), TrainConfig::default());
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("lr=fast").is_err());
        let c = TrainConfig::from_kv("# desk\nlr = 0.01\nwidths=4,8\n").unwrap();
        assert_eq!(c.adam.lr, 0.01);
        assert_eq!(c.features.widths, vec![4, 8]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.sinkhorn.mu = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.features.k = 40;
        assert!(c.validate().is_err());
    }

    #[test]
    fn phase_modes() {
        let c = tiny_cfg();
        assert_eq!(c.mode_at(0), MatchMode::PostProcess);
        assert_eq!(c.mode_at(2), MatchMode::TwoStage);
        let one = TrainConfig { mode: MatchMode::OneStage, ..tiny_cfg() };
        assert_eq!(one.mode_at(0), MatchMode::OneStage);
    }

    #[test]
    fn batch_gradient_is_mean_of_singles() {
        let cfg = tiny_cfg();
        let data = pairs(12, 2);
        let params = FeatureParams::init(&cfg.features, 5).unwrap();
        let mcfg = cfg.match_config();
        let batch = [(&data[0], 11), (&data[1], 12)];
        let both = batch_step(&params, &mcfg, MatchMode::TwoStage, &batch).unwrap();
        let a = batch_step(&params, &mcfg, MatchMode::TwoStage, &batch[..1]).unwrap();
        let b = batch_step(&params, &mcfg, MatchMode::TwoStage, &batch[1..]).unwrap();
        for ((g, ga), gb) in both.grads.iter().zip(&a.grads).zip(&b.grads) {
            let want = ga.zip_map(gb, |x, y| (x + y) / 2.0);
            assert!(g.zip_map(&want, |x, y| x - y).max_abs() < 1e-15);
        }
    }

    #[test]
    fn training_is_deterministic_and_thread_independent() {
        let data = pairs(12, 8);
        let a = train(tiny_cfg(), &data).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| train(tiny_cfg(), &data)).unwrap();
        assert_eq!(a.status, TrainStatus::Completed);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(epoch_csv(&a.checkpoint.history), epoch_csv(&b.checkpoint.history));
        assert_eq!(a.checkpoint.history.len(), 4);
    }

    #[test]
    fn phase_handoff_keeps_state() {
        let data = pairs(12, 8);
        let phase1_only = train(TrainConfig { phase2_epochs: 0, ..tiny_cfg() }, &data).unwrap().checkpoint;
        let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        assert_eq!(t.checkpoint().state_hash(), phase1_only.state_hash());
        assert_eq!(t.checkpoint().history, phase1_only.history);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = pairs(12, 8);
        let full = train(tiny_cfg(), &data).unwrap().checkpoint;
        let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
        t.run_epoch().unwrap();
        let saved = Checkpoint::decode(&t.checkpoint().encode(), "mem").unwrap();
        let resumed = continue_training(Trainer::resume(saved, &data).unwrap()).unwrap().checkpoint;
        assert_eq!(resumed, full);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let data = pairs(12, 4);
        let ckpt = train(TrainConfig { phase1_epochs: 1, phase2_epochs: 1, ..tiny_cfg() }, &data).unwrap().checkpoint;
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes, "mem").unwrap();
        assert_eq!(back, ckpt);
        let test = pairs(12, 3);
        assert_eq!(evaluate(&back, &test, &[0, 1]).unwrap(), evaluate(&ckpt, &test, &[0, 1]).unwrap());
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3], "mem"), Err(Error::Parse { .. })));
        // flip a byte inside the stored hash
        let mut bad = bytes.clone();
        bad[10] ^= 1;
        match Checkpoint::decode(&bad, "mem") {
            Err(Error::Parse { message, .. }) => assert!(message.contains("hash"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ground_truth_predictions_score_perfectly() {
        let data = pairs(16, 5);
        let report = evaluate_assignments(&data, data.iter().map(|p| p.gt.clone()).collect(), &[0, 1, 2, 4]).unwrap();
        assert_eq!(report.strict(), 100.0);
        assert!(report.mean.relaxed.iter().all(|&(_, v)| v == 100.0));
        let t = report.transform.unwrap();
        assert!(t.rmse_rotation < 1e-6 && t.rmse_translation < 1e-9);
    }

    #[test]
    fn prediction_works_in_every_mode() {
        let data = pairs(12, 2);
        for mode in MatchMode::ALL {
            let ckpt = Trainer::new(TrainConfig { mode, ..tiny_cfg() }, &data).unwrap().into_checkpoint();
            let (m, scores) = predict_with_scores(&ckpt, &data[0].x, &data[0].y).unwrap();
            assert!(m.is_valid());
            assert_eq!(scores.shape(), &[12, 12]);
            assert_eq!(m, hungarian_max(&scores).unwrap(), "{mode}");
            assert_eq!(evaluate(&ckpt, &data, &[0]).unwrap().pairs.len(), 2);
        }
    }

    #[test]
    fn evaluation_sweep_is_monotone_and_repeatable() {
        let data = pairs(12, 4);
        let ckpt = train(TrainConfig { phase1_epochs: 1, phase2_epochs: 0, ..tiny_cfg() }, &data).unwrap().checkpoint;
        let a = evaluate(&ckpt, &data, &[0, 1, 2, 4]).unwrap();
        for w in a.mean.relaxed.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
        assert_eq!(a, evaluate(&ckpt, &data, &[0, 1, 2, 4]).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = pairs(12, 4);
        let ckpt = train(TrainConfig { phase1_epochs: 1, phase2_epochs: 0, ..tiny_cfg() }, &data).unwrap().checkpoint;
        assert!(matches!(evaluate(&ckpt, &pairs(16, 2), &[0]), Err(Error::Input(_))));
        assert!(Trainer::new(tiny_cfg(), &pairs(16, 2)).is_err());
    }

    #[test]
    fn divergence_keeps_last_good_epoch() {
        let data = pairs(12, 4);
        let mut cfg = tiny_cfg();
        cfg.adam.lr = 1e300;
        let r = train(cfg, &data).unwrap();
        match r.status {
            TrainStatus::Diverged { epoch, .. } => {
                assert_eq!(r.checkpoint.epoch, epoch);
                assert_eq!(r.checkpoint.history.len(), epoch);
                assert!(r.checkpoint.params.tensors().iter().all(Tensor::all_finite));
            }
            TrainStatus::Completed => panic!("expected divergence"),
        }
    }
}
