//! The few-shot learning phase.
//!
//! Optimizes the trainable head parameters with full-batch momentum SGD on
//! `ldam + lambda * l_pi` (plus the distillation term in the baseline arm).
//! Support pixels provide the only label supervision; query images enter the
//! objective solely through the proportion regularizer, whose target follows
//! the early-estimate schedule. Ground-truth query labels are used for trace
//! metrics only, never for gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{
    base_posterior, merged_logits, predict, HeadInit, HeadParams, HeadVars, MergeConfig,
};
use crate::loss::{
    estimate_class_prior, kd_loss, ldam_loss, ldam_margins, mask_from_labels, pi_regularizer,
    pi_schedule, query_proportions, total_loss,
};
use crate::metrics::{iou_per_class, mean_iou_present, ConfusionMatrix};
use crate::synth::Episode;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

/// Which training arm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Two-branch head: classification + similarity transition.
    #[default]
    Transition,
    /// Classification branch only (transition parameters frozen out).
    ClassifierOnly,
    /// Classification branch plus the knowledge-distillation term.
    DistillationBaseline,
}

impl Arm {
    pub fn trains_transition(&self) -> bool {
        matches!(self, Arm::Transition)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Transition => "transition",
            Arm::ClassifierOnly => "classifier-only",
            Arm::DistillationBaseline => "distillation-baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of the proportion regularizer.
    pub lambda: f64,
    /// Margin scale C in `delta_k = C / n_k^(1/4)`.
    pub margin_scale: f64,
    /// Last epoch (inclusive) that still uses the epoch-0 proportion target.
    pub t_pi: usize,
    pub trace_every: usize,
    pub merge: MergeConfig,
    pub arm: Arm,
    pub head: HeadInit,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            epochs: 800,
            lr: 0.01,
            momentum: 0.9,
            lambda: 1.0,
            margin_scale: 0.5,
            t_pi: 20,
            trace_every: 10,
            merge: MergeConfig::default(),
            arm: Arm::Transition,
            head: HeadInit::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.margin_scale < 0.0 {
            return Err(Error::config("margin scale must be >= 0"));
        }
        if self.t_pi >= self.epochs {
            return Err(Error::config(format!(
                "t_pi ({}) must be smaller than epochs ({})",
                self.t_pi, self.epochs
            )));
        }
        if self.trace_every == 0 {
            return Err(Error::config("trace_every must be >= 1"));
        }
        self.merge.validate()
    }

    /// Merge settings actually in force: only the transition arm keeps the
    /// transition branch.
    pub fn effective_merge(&self) -> MergeConfig {
        if self.arm.trains_transition() {
            self.merge
        } else {
            MergeConfig {
                gamma: 0.0,
                ..self.merge
            }
        }
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub total_loss: f64,
    pub ldam_loss: f64,
    pub pi_loss: f64,
    pub kd_loss: f64,
    pub support_miou: f64,
    pub query_miou: f64,
    /// Proportion target in force at this epoch.
    pub pi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub rows: Vec<TraceRow>,
}

impl AdaptationTrace {
    /// Epoch of the maximum query mIoU (earliest on ties) and its value.
    pub fn peak_query_miou(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for row in &self.rows {
            if best.is_none() || row.query_miou > best.unwrap().1 {
                best = Some((row.epoch, row.query_miou));
            }
        }
        best
    }
}

/// Momentum SGD update: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd_step: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        *v = v.scale(momentum).add(g)?;
        *p = p.sub(&v.scale(lr))?;
    }
    Ok(())
}

/// Proportion-target bookkeeping for the schedule: the epoch-0 estimate and
/// the snapshot taken at `t_pi`.
struct PiState {
    t_pi: usize,
    initial: Option<Vec<f64>>,
    snapshot: Option<Vec<f64>>,
}

impl PiState {
    fn new(t_pi: usize) -> Self {
        PiState {
            t_pi,
            initial: None,
            snapshot: None,
        }
    }

    fn observe(&mut self, epoch: usize, proportions: &[f64]) {
        if epoch == 0 {
            self.initial = Some(proportions.to_vec());
        }
        if epoch == self.t_pi {
            self.snapshot = Some(proportions.to_vec());
        }
    }

    fn target(&self, epoch: usize) -> Result<Vec<f64>> {
        let initial = self
            .initial
            .as_ref()
            .ok_or_else(|| Error::contract("no initial proportion estimate recorded"))?;
        pi_schedule(epoch, self.t_pi, initial, self.snapshot.as_deref())
    }
}

struct StackedPixels {
    features: Tensor,
    labels: Vec<u16>,
}

fn stack_support(episode: &Episode) -> Result<StackedPixels> {
    let mut features: Option<Tensor> = None;
    let mut labels = Vec::new();
    for s in &episode.support {
        features = Some(match features {
            Some(f) => f.concat_rows(&s.map.features)?,
            None => s.map.features.clone(),
        });
        labels.extend_from_slice(&s.labels);
    }
    let features = features.ok_or_else(|| Error::contract("episode has no support images"))?;
    Ok(StackedPixels { features, labels })
}

fn stack_query(episode: &Episode) -> Result<StackedPixels> {
    let mut features: Option<Tensor> = None;
    let mut labels = Vec::new();
    for q in &episode.query {
        features = Some(match features {
            Some(f) => f.concat_rows(&q.map.features)?,
            None => q.map.features.clone(),
        });
        labels.extend_from_slice(&q.labels);
    }
    let features = features.ok_or_else(|| Error::contract("episode has no query images"))?;
    Ok(StackedPixels { features, labels })
}

fn miou_of(preds: &[usize], labels: &[u16], num_classes: usize) -> Result<f64> {
    let pred_u16: Vec<u16> = preds.iter().map(|&p| p as u16).collect();
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(&pred_u16, labels, IGNORE_LABEL)?;
    Ok(mean_iou_present(&iou_per_class(&cm)))
}

/// Run the few-shot learning phase on one episode.
///
/// Deterministic for a fixed seed. The frozen classifier `w_b_t` is copied
/// into the head and never updated.
pub fn run_adaptation(
    episode: &Episode,
    w_b_t: &Tensor,
    cfg: &AdaptationConfig,
) -> Result<(HeadParams, AdaptationTrace)> {
    cfg.validate()?;
    if episode.support.is_empty() {
        return Err(Error::contract("episode has no support images"));
    }
    let partition = episode.partition;
    let support = stack_support(episode)?;
    let query = stack_query(episode)?;
    let feature_dim = support.features.cols();

    let support_mask = mask_from_labels(&support.labels);
    if !support_mask.iter().any(|&m| m) {
        return Err(Error::contract("support set has no supervised pixels"));
    }

    let masks: Vec<(&[u16], u16)> = episode
        .support
        .iter()
        .map(|s| (s.labels.as_slice(), s.novel_class))
        .collect();
    let prior = estimate_class_prior(&episode.train_histogram, &masks, partition)?;
    let margins = ldam_margins(&prior, cfg.margin_scale)?;

    let posterior_support = base_posterior(&support.features, w_b_t)?;
    let posterior_query = base_posterior(&query.features, w_b_t)?;

    let mut params = HeadParams::init(partition, feature_dim, w_b_t.clone(), &cfg.head, cfg.seed)?;
    let train_transition = cfg.arm.trains_transition();
    let merge = cfg.effective_merge();

    let mut trainable = crate::head::collect_trainable(&params, train_transition);
    let mut velocity: Vec<Tensor> = trainable
        .iter()
        .map(|t| Tensor::zeros(t.rows(), t.cols()))
        .collect();
    let mut pi_state = PiState::new(cfg.t_pi);
    let mut trace = AdaptationTrace::default();

    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let vars = HeadVars::build(&tape, &params, train_transition);
        let support_feats = tape.constant(support.features.clone());
        let support_post = tape.constant(posterior_support.clone());
        let query_feats = tape.constant(query.features.clone());
        let query_post = tape.constant(posterior_query.clone());

        let support_logits = merged_logits(support_feats, support_post, &vars, &merge)?;
        let l_ldam = ldam_loss(support_logits, &support.labels, &margins, &support_mask)?;

        let query_probs = predict(query_feats, query_post, &vars, &merge)?;
        let props = query_proportions(query_probs)?;
        pi_state.observe(epoch, props.value().data());
        let pi_target = pi_state.target(epoch)?;
        let l_pi = pi_regularizer(props, &pi_target)?;

        let mut loss = total_loss(l_ldam, l_pi, cfg.lambda)?;
        let mut kd_value = 0.0;
        if cfg.arm == Arm::DistillationBaseline {
            let support_probs = support_logits.softmax_rows()?;
            let l_kd = kd_loss(support_probs, support_post, partition)?;
            kd_value = l_kd.scalar_value()?;
            loss = loss.add(&l_kd)?;
        }

        let loss_value = loss.scalar_value()?;
        if !loss_value.is_finite() || loss_value > 1e6 {
            return Err(Error::Numeric(format!(
                "loss {loss_value} at epoch {epoch}; lower the learning rate"
            )));
        }

        if epoch % cfg.trace_every == 0 || epoch + 1 == cfg.epochs {
            let support_preds = support_logits.value().argmax_rows();
            let query_preds = query_probs.value().argmax_rows();
            trace.rows.push(TraceRow {
                epoch,
                total_loss: loss_value,
                ldam_loss: l_ldam.scalar_value()?,
                pi_loss: l_pi.scalar_value()?,
                kd_loss: kd_value,
                support_miou: miou_of(&support_preds, &support.labels, partition.num_classes())?,
                query_miou: miou_of(&query_preds, &query.labels, partition.num_classes())?,
                pi: pi_target.clone(),
            });
        }

        let grads = loss.backward()?;
        let grad_tensors: Vec<Tensor> = vars
            .trainable()
            .iter()
            .zip(&trainable)
            .map(|(v, p)| match grads.wrt(*v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.rows(), p.cols()),
            })
            .collect();
        sgd_step(
            &mut trainable,
            &grad_tensors,
            &mut velocity,
            cfg.lr,
            cfg.momentum,
        )?;
        crate::head::install_trainable(&mut params, train_transition, &trainable)?;
    }

    Ok((params, trace))
}

/// Final query-set predictions of an adapted head (argmax labels).
pub fn query_predictions(
    episode: &Episode,
    params: &HeadParams,
    merge: &MergeConfig,
) -> Result<Vec<u16>> {
    let query = stack_query(episode)?;
    let posterior = base_posterior(&query.features, &params.w_b_t)?;
    let tape = Tape::new();
    let vars = HeadVars::build(&tape, params, false);
    let probs = predict(
        tape.constant(query.features.clone()),
        tape.constant(posterior),
        &vars,
        merge,
    )?;
    Ok(probs
        .value()
        .argmax_rows()
        .iter()
        .map(|&p| p as u16)
        .collect())
}

/// Confusion matrix of an adapted head over the episode's query set.
pub fn query_confusion(
    episode: &Episode,
    params: &HeadParams,
    merge: &MergeConfig,
) -> Result<ConfusionMatrix> {
    let query = stack_query(episode)?;
    let preds = query_predictions(episode, params, merge)?;
    let mut cm = ConfusionMatrix::new(episode.partition.num_classes());
    cm.accumulate(&preds, &query.labels, IGNORE_LABEL)?;
    Ok(cm)
}

/// Confusion matrix of the frozen base classifier alone on the query set
/// (predictions never leave the base side).
pub fn frozen_classifier_confusion(episode: &Episode, w_b_t: &Tensor) -> Result<ConfusionMatrix> {
    let query = stack_query(episode)?;
    let posterior = base_posterior(&query.features, w_b_t)?;
    let preds: Vec<u16> = posterior.argmax_rows().iter().map(|&p| p as u16).collect();
    let mut cm = ConfusionMatrix::new(episode.partition.num_classes());
    cm.accumulate(&preds, &query.labels, IGNORE_LABEL)?;
    Ok(cm)
}
