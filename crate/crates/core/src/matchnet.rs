//! The matching layer: descriptors, similarity, Gumbel-Sinkhorn and the
//! Hungarian projection, with the straight-through backward pass.

use std::fmt;
use std::str::FromStr;

use crate::assignment::{hungarian_max, PermutationMatrix};
use crate::cloud::PointCloud;
use crate::error::{config, contract, Error, Result};
use crate::features::{describe, BoundParams, FeatureConfig, FeatureParams};
use crate::gradcore::{Gradients, NodeId, Tape, Tensor};
use crate::sinkhorn::{gumbel_sinkhorn, sample_gumbel, SinkhornConfig, SinkhornNodes};

/// Where the Hungarian projection sits and what the loss supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchMode {
    /// Sinkhorn then Hungarian; the gradient skips the assignment and lands on P.
    TwoStage,
    /// Hungarian directly on S; the gradient lands on S.
    OneStage,
    /// Sinkhorn only while training, Hungarian at evaluation.
    PostProcess,
}

impl MatchMode {
    pub const ALL: [MatchMode; 3] = [MatchMode::TwoStage, MatchMode::OneStage, MatchMode::PostProcess];

    pub fn name(self) -> &'static str {
        match self {
            MatchMode::TwoStage => "two-stage",
            MatchMode::OneStage => "one-stage",
            MatchMode::PostProcess => "post-process",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "two-stage" | "twostage" => Ok(MatchMode::TwoStage),
            "one-stage" | "onestage" => Ok(MatchMode::OneStage),
            "post-process" | "postprocess" => Ok(MatchMode::PostProcess),
            other => Err(config(format!("unknown match mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Gumbel noise on, Hungarian skipped in post-process mode.
    Train,
    /// No noise, always projects to a permutation.
    Eval,
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LossKind {
    /// `−(1/N) Σ m_pred m_gt`.
    #[default]
    Product,
    /// `−(1/N) Σ_i log p[i, gt(i)]`. Experimental; not used by default.
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "product" => Ok(LossKind::Product),
            "cross-entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(config(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Product => "product",
            LossKind::CrossEntropy => "cross-entropy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub features: FeatureConfig,
    pub sinkhorn: SinkhornConfig,
    pub loss: LossKind,
    /// Add Gumbel noise during training.
    pub gumbel: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            loss: LossKind::Product,
            gumbel: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.sinkhorn.validate()
    }
}

/// Plain values of one forward pass.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub s: Tensor,
    /// Unset in one-stage mode.
    pub p: Option<Tensor>,
    /// Unset in post-process training.
    pub m: Option<PermutationMatrix>,
    /// Set when a ground truth was supplied.
    pub loss: Option<f64>,
}

/// A forward pass together with the tape that recorded it.
pub struct MatchForward {
    tape: Tape,
    params: BoundParams,
    mode: MatchMode,
    phase: Phase,
    loss_kind: LossKind,
    s: NodeId,
    sinkhorn: Option<SinkhornNodes>,
    m: Option<PermutationMatrix>,
}

impl fmt::Debug for MatchForward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchForward")
            .field("mode", &self.mode)
            .field("phase", &self.phase)
            .field("nodes", &self.tape.len())
            .field("m", &self.m)
            .finish()
    }
}

/// Runs descriptors, similarity and the mode's assignment path on a fresh tape.
///
/// `seed` drives the Gumbel noise; it is ignored in the evaluation phase.
pub fn forward(
    x: &PointCloud,
    y: &PointCloud,
    params: &FeatureParams,
    cfg: &MatchConfig,
    mode: MatchMode,
    phase: Phase,
    seed: u64,
) -> Result<MatchForward> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("cloud sizes differ: {} vs {}", x.len(), y.len())));
    }
    cfg.validate()?;
    cfg.features.validate_for(x.len())?;
    let n = x.len();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &cfg.features);
    let desc = describe(&mut tape, &bound, &cfg.features, x, y)?;
    let s = desc.similarity;

    let (sinkhorn, m) = match mode {
        MatchMode::OneStage => (None, Some(hungarian_max(tape.value(s))?)),
        MatchMode::TwoStage | MatchMode::PostProcess => {
            let noise = (phase == Phase::Train && cfg.gumbel).then(|| sample_gumbel(n, seed));
            let nodes = gumbel_sinkhorn(&mut tape, s, noise.as_ref(), cfg.sinkhorn)?;
            let m = if mode == MatchMode::PostProcess && phase == Phase::Train {
                None
            } else {
                Some(hungarian_max(tape.value(nodes.p))?)
            };
            (Some(nodes), m)
        }
    };
    Ok(MatchForward { tape, params: bound, mode, phase, loss_kind: cfg.loss, s, sinkhorn, m })
}

impl MatchForward {
    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn n(&self) -> usize {
        self.similarity().rows()
    }

    pub fn similarity(&self) -> &Tensor {
        self.tape.value(self.s)
    }

    pub fn dsm(&self) -> Option<&Tensor> {
        self.sinkhorn.map(|nodes| self.tape.value(nodes.p))
    }

    pub fn permutation(&self) -> Option<&PermutationMatrix> {
        self.m.as_ref()
    }

    /// Loss of this pass: on M when an assignment was made, on P otherwise.
    pub fn loss(&self, gt: &PermutationMatrix) -> Result<f64> {
        if let (LossKind::CrossEntropy, Some(p)) = (self.loss_kind, self.dsm()) {
            return cross_entropy(p, gt);
        }
        match (&self.m, self.dsm()) {
            (Some(m), _) => permutation_loss(m, gt),
            (None, Some(p)) => loss(p, gt),
            (None, None) => unreachable!("every mode produces P or M"),
        }
    }

    pub fn output(&self, gt: Option<&PermutationMatrix>) -> Result<MatchOutput> {
        Ok(MatchOutput {
            s: self.similarity().clone(),
            p: self.dsm().cloned(),
            m: self.m.clone(),
            loss: gt.map(|g| self.loss(g)).transpose()?,
        })
    }

    /// Gradient of the mode's loss w.r.t. every feature parameter, in layout order.
    pub fn backward(&self, gt: &PermutationMatrix) -> Result<Vec<Tensor>> {
        match self.mode {
            MatchMode::OneStage => self.backward_one_stage(gt),
            MatchMode::TwoStage | MatchMode::PostProcess => self.backward_to_dsm(gt),
        }
    }

    /// Seeds `∂L/∂P := ∂L/∂M` and backpropagates through Sinkhorn.
    pub fn backward_straight_through(&self, gt: &PermutationMatrix) -> Result<Vec<Tensor>> {
        if self.mode != MatchMode::TwoStage {
            return Err(contract(format!("straight-through backward needs two-stage mode, ran {}", self.mode)));
        }
        self.backward_to_dsm(gt)
    }

    /// Seeds `∂L/∂S := ∂L/∂M` on the similarity matrix.
    pub fn backward_one_stage(&self, gt: &PermutationMatrix) -> Result<Vec<Tensor>> {
        if self.mode != MatchMode::OneStage {
            return Err(contract(format!("one-stage backward needs one-stage mode, ran {}", self.mode)));
        }
        let grads = self.tape.backward_from(self.s, self.seed_gradient(gt)?)?;
        Ok(self.collect(grads))
    }

    /// The gradient injected by [`MatchForward::backward`]: w.r.t. S in
    /// one-stage mode, w.r.t. P otherwise.
    pub fn seed_gradient(&self, gt: &PermutationMatrix) -> Result<Tensor> {
        match (self.mode, self.loss_kind, self.sinkhorn) {
            (MatchMode::OneStage, _, _) | (_, LossKind::Product, _) => straight_through_seed(gt, self.n()),
            (_, LossKind::CrossEntropy, Some(nodes)) => cross_entropy_seed(self.tape.value(nodes.p), gt),
            (_, LossKind::CrossEntropy, None) => unreachable!("sinkhorn modes record P"),
        }
    }

    fn backward_to_dsm(&self, gt: &PermutationMatrix) -> Result<Vec<Tensor>> {
        let nodes = self.sinkhorn.expect("sinkhorn modes record P");
        let grads = self.tape.backward_from(nodes.p, self.seed_gradient(gt)?)?;
        Ok(self.collect(grads))
    }

    fn collect(&self, mut grads: Gradients) -> Vec<Tensor> {
        self.params
            .ids
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(self.tape.value(id).shape())))
            .collect()
    }
}

fn check_gt(gt: &PermutationMatrix, n: usize) -> Result<()> {
    if gt.n() != n {
        return Err(Error::Input(format!("ground truth has {} rows, prediction is {n}x{n}", gt.n())));
    }
    Ok(())
}

/// `−(1/N) Σ m_pred m_gt`, where `m_pred` may be a permutation or a DSM.
pub fn loss(m_pred: &Tensor, gt: &PermutationMatrix) -> Result<f64> {
    let n = m_pred.rows();
    if m_pred.shape().len() != 2 || m_pred.cols() != n {
        return Err(Error::Input(format!("prediction must be square, got {:?}", m_pred.shape())));
    }
    check_gt(gt, n)?;
    let hit: f64 = (0..n).map(|i| m_pred.get(i, gt.col_of(i))).sum();
    Ok(-hit / n as f64)
}

/// [`loss`] for a permutation prediction: minus the fraction of agreeing rows.
pub fn permutation_loss(m_pred: &PermutationMatrix, gt: &PermutationMatrix) -> Result<f64> {
    check_gt(gt, m_pred.n())?;
    Ok(-(m_pred.agreement(gt) as f64) / m_pred.n() as f64)
}

fn cross_entropy(p: &Tensor, gt: &PermutationMatrix) -> Result<f64> {
    let n = p.rows();
    check_gt(gt, n)?;
    Ok(-(0..n).map(|i| p.get(i, gt.col_of(i)).ln()).sum::<f64>() / n as f64)
}

fn cross_entropy_seed(p: &Tensor, gt: &PermutationMatrix) -> Result<Tensor> {
    let n = p.rows();
    check_gt(gt, n)?;
    let mut seed = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let j = gt.col_of(i);
        seed.set(i, j, -1.0 / (n as f64 * p.get(i, j)));
    }
    Ok(seed)
}

/// `∂L/∂M = −(1/N)·M_gt`; depends on nothing but the ground truth.
pub fn straight_through_seed(gt: &PermutationMatrix, n: usize) -> Result<Tensor> {
    check_gt(gt, n)?;
    Ok(gt.to_dense().map(|v| -v / n as f64))
}
