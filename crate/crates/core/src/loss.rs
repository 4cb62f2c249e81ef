//! Training objectives for the few-shot learning phase.
//!
//! The main loss is a margin-rectified cross-entropy whose per-class margin
//! shrinks with the fourth root of the class pixel count, so rare classes
//! incur amplified loss. A transductive regularizer penalizes the divergence
//! between predicted query class proportions and a target proportion frozen
//! early in adaptation. A distillation term (KL to the frozen base
//! classifier through a novel-to-background projection) is kept as the
//! baseline comparison arm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ClassPartition;
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

/// Where the pixel counts behind a prior came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    TrainHistogram,
    SupportMasks,
    Merged,
}

/// Per-class pixel counts over the full class set, floored at one pixel so
/// margins stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub counts: Vec<f64>,
    pub source: PriorSource,
    /// Classes whose count was clamped up to 1 because no pixel was found.
    pub clamped: Vec<usize>,
}

/// Merge the base-phase histogram (background + base classes) with novel
/// pixel counts taken from the support masks.
pub fn estimate_class_prior(
    train_histogram: &[u64],
    support_masks: &[(&[u16], u16)],
    partition: ClassPartition,
) -> Result<ClassPrior> {
    if train_histogram.len() != partition.base_side() {
        return Err(Error::shape(format!(
            "train histogram covers {} classes, expected {}",
            train_histogram.len(),
            partition.base_side()
        )));
    }
    let k = partition.num_classes();
    let mut counts = vec![0.0; k];
    for (c, &n) in train_histogram.iter().enumerate() {
        counts[c] = n as f64;
    }
    for (labels, novel_class) in support_masks {
        let nc = *novel_class as usize;
        if !partition.is_novel(nc) {
            return Err(Error::Data(format!(
                "support mask labeled with non-novel class {nc}"
            )));
        }
        counts[nc] += labels.iter().filter(|&&l| l as usize == nc).count() as f64;
    }
    let mut clamped = Vec::new();
    for (c, count) in counts.iter_mut().enumerate() {
        if *count < 1.0 {
            *count = 1.0;
            clamped.push(c);
        }
    }
    Ok(ClassPrior {
        counts,
        source: PriorSource::Merged,
        clamped,
    })
}

/// Per-class margins `delta_k = C / n_k^(1/4)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginVector {
    pub deltas: Vec<f64>,
    pub scale: f64,
}

pub fn ldam_margins(prior: &ClassPrior, scale: f64) -> Result<MarginVector> {
    if scale < 0.0 {
        return Err(Error::contract(format!(
            "margin scale must be >= 0, got {scale}"
        )));
    }
    let deltas = prior.counts.iter().map(|&n| scale / n.powf(0.25)).collect();
    Ok(MarginVector { deltas, scale })
}

impl MarginVector {
    pub fn zero(num_classes: usize) -> Self {
        MarginVector {
            deltas: vec![0.0; num_classes],
            scale: 0.0,
        }
    }
}

fn supervised_indices(labels: &[u16], mask: &[bool], num_classes: usize) -> Result<Vec<usize>> {
    if labels.len() != mask.len() {
        return Err(Error::shape(format!(
            "labels ({}) and mask ({}) lengths differ",
            labels.len(),
            mask.len()
        )));
    }
    let mut idx = Vec::new();
    for (i, (&l, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::Data(format!("label {l} out of range at pixel {i}")));
        }
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(Error::contract("no supervised pixels in mask"));
    }
    Ok(idx)
}

fn one_hot_rows(labels: &[u16], indices: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(indices.len(), num_classes);
    for (r, &i) in indices.iter().enumerate() {
        t.set(r, labels[i] as usize, 1.0);
    }
    t
}

/// Margin-rectified cross-entropy: subtract `delta_y` from the true-class
/// logit, then take the mean negative log-softmax at the labels over the
/// masked pixels.
pub fn ldam_loss<'t>(
    logits: Var<'t>,
    labels: &[u16],
    margins: &MarginVector,
    mask: &[bool],
) -> Result<Var<'t>> {
    let tape = logits.tape();
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    if margins.deltas.len() != k {
        return Err(Error::shape(format!(
            "{} margins for {k} classes",
            margins.deltas.len()
        )));
    }
    let idx = supervised_indices(labels, mask, k)?;

    let picked = logits.gather_rows(&idx)?;
    let mut margin_matrix = Tensor::zeros(idx.len(), k);
    for (r, &i) in idx.iter().enumerate() {
        let y = labels[i] as usize;
        margin_matrix.set(r, y, margins.deltas[y]);
    }
    let rectified = picked.sub(&tape.constant(margin_matrix))?;
    let log_probs = rectified.log_softmax_rows()?;
    let one_hot = tape.constant(one_hot_rows(labels, &idx, k));
    log_probs
        .mul(&one_hot)?
        .sum()?
        .mul_scalar(-1.0 / idx.len() as f64)
}

/// Plain cross-entropy over the masked pixels. Deliberately composed through
/// `softmax` + `ln` rather than the fused log-softmax so it is an
/// independent route against [`ldam_loss`] with zero margins.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[u16], mask: &[bool]) -> Result<Var<'t>> {
    let tape = logits.tape();
    let (n, k) = logits.shape();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    let idx = supervised_indices(labels, mask, k)?;
    let picked = logits.gather_rows(&idx)?;
    let log_probs = picked.softmax_rows()?.ln()?;
    let one_hot = tape.constant(one_hot_rows(labels, &idx, k));
    log_probs
        .mul(&one_hot)?
        .sum()?
        .mul_scalar(-1.0 / idx.len() as f64)
}

/// Convenience: supervision mask straight from the ignore sentinel.
pub fn mask_from_labels(labels: &[u16]) -> Vec<bool> {
    labels.iter().map(|&l| l != IGNORE_LABEL).collect()
}

/// A distribution over the full class set.
#[derive(Debug, Clone, PartialEq)]
pub struct Proportions(pub Vec<f64>);

impl Proportions {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&p| p < 0.0) {
            return Err(Error::Data("proportions must be non-negative".into()));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("proportions sum to {total}")));
        }
        Ok(())
    }
}

/// Mean soft probability per class over all pixels (differentiable).
pub fn query_proportions<'t>(prob_map: Var<'t>) -> Result<Var<'t>> {
    prob_map.col_means()
}

/// Floor a target distribution at 1e-6 and renormalize, so the divergence
/// below never divides by zero mass.
pub fn floor_and_normalize(pi: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = pi.iter().map(|&p| p.max(1e-6)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|p| p / total).collect()
}

/// KL-style penalty `sum_k p_k * ln(p_k / pi_k)` with `0 * ln 0 = 0`.
/// `pi` is treated as a constant: no gradient flows into it.
pub fn pi_regularizer<'t>(proportions: Var<'t>, pi: &[f64]) -> Result<Var<'t>> {
    let tape = proportions.tape();
    let (r, k) = proportions.shape();
    if r != 1 || k != pi.len() {
        return Err(Error::shape(format!(
            "proportions {r}x{k} vs pi length {}",
            pi.len()
        )));
    }
    let pi = floor_and_normalize(pi);
    let values = proportions.value();
    let nonzero: Vec<usize> = (0..k).filter(|&i| values.data()[i] > 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::contract("proportions carry no mass"));
    }
    let p = proportions.t()?.gather_rows(&nonzero)?;
    let log_pi = tape.constant(Tensor::column(
        &nonzero.iter().map(|&i| pi[i].ln()).collect::<Vec<_>>(),
    ));
    p.mul(&p.ln()?.sub(&log_pi)?)?.sum()
}

/// Target proportion schedule: the epoch-0 estimate until `t_pi`
/// (inclusive), the recorded snapshot afterwards.
pub fn pi_schedule(
    t: usize,
    t_pi: usize,
    initial: &[f64],
    snapshot: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if t <= t_pi {
        Ok(initial.to_vec())
    } else {
        snapshot.map(|s| s.to_vec()).ok_or_else(|| {
            Error::contract(format!(
                "no proportion snapshot recorded for t = {t} > t_pi = {t_pi}"
            ))
        })
    }
}

/// Constant projection matrix folding novel probability mass into the
/// background coordinate: `num_classes x base_side`.
fn new2old_matrix(partition: ClassPartition) -> Tensor {
    let k = partition.num_classes();
    let b = partition.base_side();
    let mut m = Tensor::zeros(k, b);
    m.set(0, 0, 1.0);
    for c in 1..b {
        m.set(c, c, 1.0);
    }
    for c in partition.novel_classes() {
        m.set(c, 0, 1.0);
    }
    m
}

/// Project full-class probability rows onto the base side: background
/// absorbs all novel mass, base entries pass through.
pub fn project_new2old<'t>(prob_map: Var<'t>, partition: ClassPartition) -> Result<Var<'t>> {
    let tape = prob_map.tape();
    let (_, k) = prob_map.shape();
    if k != partition.num_classes() {
        return Err(Error::shape(format!(
            "prob map has {k} classes, expected {}",
            partition.num_classes()
        )));
    }
    prob_map.matmul(&tape.constant(new2old_matrix(partition)))
}

/// Mean over pixels of `KL(project(P_j) || base_j)`; the knowledge
/// distillation term of the baseline arm.
pub fn kd_loss<'t>(
    prob_map: Var<'t>,
    base_prob_map: Var<'t>,
    partition: ClassPartition,
) -> Result<Var<'t>> {
    let (n, _) = prob_map.shape();
    let (bn, bk) = base_prob_map.shape();
    if bn != n || bk != partition.base_side() {
        return Err(Error::shape(format!(
            "base prob map must be {n}x{}, got {bn}x{bk}",
            partition.base_side()
        )));
    }
    let projected = project_new2old(prob_map, partition)?;
    let log_ratio = projected.ln()?.sub(&base_prob_map.ln()?)?;
    projected.mul(&log_ratio)?.sum()?.mul_scalar(1.0 / n as f64)
}

/// `ldam + lambda * l_pi`.
pub fn total_loss<'t>(ldam: Var<'t>, l_pi: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if lambda < 0.0 {
        return Err(Error::contract(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    ldam.add(&l_pi.mul_scalar(lambda)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{loss_fn, value_and_grad, Tape};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn partition() -> ClassPartition {
        ClassPartition::new(2, 2).unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    // ---- prior -------------------------------------------------------

    #[test]
    fn prior_counts_histogram_and_masks() {
        let p = ClassPartition::new(1, 1).unwrap();
        let mask = vec![2u16, 2, 2, 2, 2, 2, 2, 2, 2, 2];
        let prior = estimate_class_prior(&[100, 900], &[(&mask, 2)], p).unwrap();
        assert_eq!(prior.counts, vec![100.0, 900.0, 10.0]);
        assert!(prior.clamped.is_empty());
    }

    #[test]
    fn prior_clamps_missing_novel_class() {
        let p = ClassPartition::new(1, 1).unwrap();
        let empty: Vec<u16> = vec![0, 0, 0];
        let prior = estimate_class_prior(&[5, 5], &[(&empty, 2)], p).unwrap();
        assert_eq!(prior.counts[2], 1.0);
        assert_eq!(prior.clamped, vec![2]);
    }

    #[test]
    fn prior_adds_masks_of_same_class() {
        let p = ClassPartition::new(1, 1).unwrap();
        let m1 = vec![2u16, 2, 2, 0];
        let m2 = vec![2u16, 2, 2, 2, 2, 2, 2, 0];
        let prior = estimate_class_prior(&[1, 1], &[(&m1, 2), (&m2, 2)], p).unwrap();
        assert_eq!(prior.counts[2], 10.0);
    }

    // ---- margins -----------------------------------------------------

    #[test]
    fn margins_zero_scale() {
        let prior = ClassPrior {
            counts: vec![7.0, 3.0],
            source: PriorSource::Merged,
            clamped: vec![],
        };
        let m = ldam_margins(&prior, 0.0).unwrap();
        assert_eq!(m.deltas, vec![0.0, 0.0]);
    }

    #[test]
    fn margin_of_sixteen_pixels() {
        let prior = ClassPrior {
            counts: vec![16.0],
            source: PriorSource::Merged,
            clamped: vec![],
        };
        let m = ldam_margins(&prior, 2.0).unwrap();
        assert_close(m.deltas[0], 1.0, 1e-15);
    }

    #[test]
    fn margin_values_and_monotonicity() {
        let prior = ClassPrior {
            counts: vec![10000.0, 10.0],
            source: PriorSource::Merged,
            clamped: vec![],
        };
        let m = ldam_margins(&prior, 0.5).unwrap();
        assert_close(m.deltas[0], 0.05, 1e-12);
        assert_close(m.deltas[1], 0.28117066259517456, 1e-12);
        // fewer pixels -> strictly larger margin
        assert!(m.deltas[1] > m.deltas[0]);
    }

    // ---- ldam / cross-entropy ------------------------------------------

    #[test]
    fn ldam_with_zero_margins_matches_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 6;
            let k = 5;
            let logits = Tensor::new(
                n,
                k,
                (0..n * k)
                    .map(|_| rng.random::<f64>() * 4.0 - 2.0)
                    .collect(),
            )
            .unwrap();
            let labels: Vec<u16> = (0..n)
                .map(|_| (rng.random::<f64>() * k as f64) as u16)
                .collect();
            let mask = vec![true; n];
            let tape = Tape::new();
            let lv = tape.constant(logits.clone());
            let a = ldam_loss(lv, &labels, &MarginVector::zero(k), &mask)
                .unwrap()
                .scalar_value()
                .unwrap();
            let b = cross_entropy(lv, &labels, &mask)
                .unwrap()
                .scalar_value()
                .unwrap();
            assert_close(a, b, 1e-12);
        }
    }

    #[test]
    fn ldam_uniform_logits_is_ln_k() {
        let k = 7;
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(4, k));
        let labels = vec![0u16, 2, 4, 6];
        let loss = ldam_loss(logits, &labels, &MarginVector::zero(k), &[true; 4])
            .unwrap()
            .scalar_value()
            .unwrap();
        assert_close(loss, (k as f64).ln(), 1e-12);
    }

    #[test]
    fn ldam_scalar_example() {
        // logits [1,0,0], y = 0, delta_0 = 0.5
        let tape = Tape::new();
        let logits = tape.constant(Tensor::row(&[1.0, 0.0, 0.0]));
        let margins = MarginVector {
            deltas: vec![0.5, 0.0, 0.0],
            scale: 0.5,
        };
        let loss = ldam_loss(logits, &[0], &margins, &[true])
            .unwrap()
            .scalar_value()
            .unwrap();
        let expected = -(0.5f64.exp() / (0.5f64.exp() + 2.0)).ln();
        assert_close(loss, expected, 1e-12);
        assert_close(loss, 0.7944, 1e-4);
    }

    #[test]
    fn ldam_empty_mask_is_contract_error() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(3, 2));
        let err = ldam_loss(logits, &[0, 1, 0], &MarginVector::zero(2), &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn ldam_ignores_unmasked_out_of_range_labels() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 3));
        let labels = vec![1u16, IGNORE_LABEL];
        let mask = mask_from_labels(&labels);
        assert!(ldam_loss(logits, &labels, &MarginVector::zero(3), &mask).is_ok());
    }

    #[test]
    fn larger_margin_pulls_harder() {
        // d(loss)/dz_y is strictly more negative with a larger margin at
        // identical logits.
        let grad_at = |delta: f64| {
            let logits = Tensor::row(&[0.8, -0.4]);
            let margins = MarginVector {
                deltas: vec![delta, 0.0],
                scale: delta,
            };
            let (_, grads) =
                value_and_grad(|_, vs| ldam_loss(vs[0], &[0], &margins, &[true]), &[logits])
                    .unwrap();
            grads[0].data()[0]
        };
        let g_small = grad_at(0.1);
        let g_large = grad_at(0.9);
        assert!(g_small < 0.0 && g_large < 0.0);
        assert!(g_large < g_small, "{g_large} vs {g_small}");
    }

    // ---- proportions ---------------------------------------------------

    #[test]
    fn proportions_of_constant_map() {
        let tape = Tape::new();
        let mut probs = Tensor::zeros(5, 3);
        for r in 0..5 {
            probs.set(r, 2, 1.0);
        }
        let p = query_proportions(tape.constant(probs)).unwrap().value();
        assert_eq!(p.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn proportions_average_rows() {
        let tape = Tape::new();
        let probs = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = query_proportions(tape.constant(probs)).unwrap().value();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn proportions_random_row_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probs = Tensor::new(6, 4, (0..24).map(|_| rng.random::<f64>()).collect())
            .unwrap()
            .softmax_rows();
        let tape = Tape::new();
        let p = query_proportions(tape.constant(probs.clone()))
            .unwrap()
            .value();
        for c in 0..4 {
            let mean: f64 = (0..6).map(|r| probs.get(r, c)).sum::<f64>() / 6.0;
            assert_close(p.data()[c], mean, 1e-15);
        }
    }

    // ---- pi regularizer -------------------------------------------------

    #[test]
    fn pi_regularizer_self_divergence_is_zero() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::row(&[0.25, 0.5, 0.25]));
        let v = pi_regularizer(p, &[0.25, 0.5, 0.25])
            .unwrap()
            .scalar_value()
            .unwrap();
        assert_close(v, 0.0, 1e-15);
    }

    #[test]
    fn pi_regularizer_one_hot_against_uniform() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::row(&[1.0, 0.0]));
        let v = pi_regularizer(p, &[0.5, 0.5])
            .unwrap()
            .scalar_value()
            .unwrap();
        assert_close(v, 2f64.ln(), 1e-9);
    }

    #[test]
    fn pi_regularizer_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = Tensor::new(1, 5, (0..5).map(|_| rng.random::<f64>()).collect())
                .unwrap()
                .softmax_rows();
            let pi = Tensor::new(1, 5, (0..5).map(|_| rng.random::<f64>()).collect())
                .unwrap()
                .softmax_rows();
            let tape = Tape::new();
            let v = pi_regularizer(tape.constant(p), pi.data())
                .unwrap()
                .scalar_value()
                .unwrap();
            assert!(v >= -1e-12, "negative divergence {v}");
        }
    }

    // ---- schedule --------------------------------------------------------

    #[test]
    fn schedule_boundary_is_inclusive() {
        let initial = vec![0.5, 0.5];
        let snap = vec![0.9, 0.1];
        assert_eq!(pi_schedule(0, 3, &initial, None).unwrap(), initial);
        assert_eq!(pi_schedule(3, 3, &initial, Some(&snap)).unwrap(), initial);
        assert_eq!(pi_schedule(4, 3, &initial, Some(&snap)).unwrap(), snap);
    }

    #[test]
    fn schedule_missing_snapshot_is_contract_error() {
        assert!(matches!(
            pi_schedule(4, 3, &[1.0], None),
            Err(Error::Contract(_))
        ));
    }

    // ---- projection -------------------------------------------------------

    #[test]
    fn projection_folds_novel_mass_into_background() {
        let p = partition();
        let tape = Tape::new();
        let probs = tape.constant(Tensor::row(&[0.1, 0.2, 0.3, 0.25, 0.15]));
        let out = project_new2old(probs, p).unwrap().value();
        assert_eq!(out.shape(), (1, 3));
        assert_close(out.data()[0], 0.5, 1e-12);
        assert_close(out.data()[1], 0.2, 1e-12);
        assert_close(out.data()[2], 0.3, 1e-12);
    }

    #[test]
    fn projection_fixes_base_one_hot() {
        let p = partition();
        let tape = Tape::new();
        let probs = tape.constant(Tensor::row(&[0.0, 1.0, 0.0, 0.0, 0.0]));
        let out = project_new2old(probs, p).unwrap().value();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn projection_sends_novel_one_hot_to_background() {
        let p = partition();
        let tape = Tape::new();
        let probs = tape.constant(Tensor::row(&[0.0, 0.0, 0.0, 0.0, 1.0]));
        let out = project_new2old(probs, p).unwrap().value();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_preserves_mass_exactly_on_dyadic_input() {
        let p = partition();
        let tape = Tape::new();
        let row = [0.25, 0.125, 0.125, 0.25, 0.25];
        let probs = tape.constant(Tensor::row(&row));
        let out = project_new2old(probs, p).unwrap().value();
        assert_eq!(out.data().iter().sum::<f64>(), row.iter().sum::<f64>());
    }

    // ---- kd --------------------------------------------------------------

    #[test]
    fn kd_zero_for_lifted_frozen_prediction() {
        let p = partition();
        let base = Tensor::from_rows(&[&[0.6, 0.3, 0.1], &[0.2, 0.5, 0.3]]).unwrap();
        // Lift with zero novel mass.
        let mut lifted = Tensor::zeros(2, 5);
        for r in 0..2 {
            for c in 0..3 {
                lifted.set(r, c, base.get(r, c));
            }
        }
        let tape = Tape::new();
        let v = kd_loss(tape.constant(lifted), tape.constant(base), p)
            .unwrap()
            .scalar_value()
            .unwrap();
        assert_close(v, 0.0, 1e-15);
    }

    #[test]
    fn kd_single_pixel_matches_scalar_kl() {
        let p = partition();
        let probs = Tensor::row(&[0.1, 0.2, 0.3, 0.25, 0.15]);
        let base = Tensor::row(&[0.3, 0.4, 0.3]);
        let tape = Tape::new();
        let v = kd_loss(tape.constant(probs), tape.constant(base.clone()), p)
            .unwrap()
            .scalar_value()
            .unwrap();
        let q = [0.5, 0.2, 0.3];
        let expected: f64 = q
            .iter()
            .zip(base.data())
            .map(|(&qi, &bi)| qi * (qi / bi).ln())
            .sum();
        assert_close(v, expected, 1e-12);
    }

    #[test]
    fn kd_is_nonnegative() {
        let p = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..25 {
            let probs = Tensor::new(3, 5, (0..15).map(|_| rng.random::<f64>()).collect())
                .unwrap()
                .softmax_rows();
            let base = Tensor::new(3, 3, (0..9).map(|_| rng.random::<f64>()).collect())
                .unwrap()
                .softmax_rows();
            let tape = Tape::new();
            let v = kd_loss(tape.constant(probs), tape.constant(base), p)
                .unwrap()
                .scalar_value()
                .unwrap();
            assert!(v >= -1e-12);
        }
    }

    // ---- total -------------------------------------------------------------

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let ldam = tape.constant(Tensor::scalar(1.0));
        let l_pi = tape.constant(Tensor::scalar(0.5));
        let v = total_loss(ldam, l_pi, 4.0).unwrap().scalar_value().unwrap();
        assert_close(v, 3.0, 1e-15);

        let v0 = total_loss(ldam, l_pi, 0.0).unwrap().scalar_value().unwrap();
        assert_eq!(v0, 1.0);
    }

    #[test]
    fn total_loss_composition_of_earlier_oracles() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::row(&[1.0, 0.0, 0.0]));
        let margins = MarginVector {
            deltas: vec![0.5, 0.0, 0.0],
            scale: 0.5,
        };
        let ldam = ldam_loss(logits, &[0], &margins, &[true]).unwrap();
        let props = tape.constant(Tensor::row(&[1.0, 0.0]));
        let l_pi = pi_regularizer(props, &[0.5, 0.5]).unwrap();
        let v = total_loss(ldam, l_pi, 1.0).unwrap().scalar_value().unwrap();
        assert_close(v, 1.4875, 1e-3);
    }

    // ---- gradient blocking ---------------------------------------------------

    #[test]
    fn no_gradient_flows_into_pi_or_frozen_classifier() {
        // pi enters as plain f64 constants; the frozen classifier enters as a
        // tape constant. Neither gets a gradient buffer.
        let tape = Tape::new();
        let w_b_t = tape.constant(Tensor::from_rows(&[&[0.5, -0.2], &[0.1, 0.9]]).unwrap());
        let feats = tape.input(Tensor::from_rows(&[&[1.0, 2.0], &[0.3, -0.4]]).unwrap());
        let posterior = feats
            .matmul(&w_b_t.t().unwrap())
            .unwrap()
            .softmax_rows()
            .unwrap();
        let props = query_proportions(posterior).unwrap();
        let l = pi_regularizer(props, &[0.7, 0.3]).unwrap();
        let grads = l.backward().unwrap();
        assert!(grads.wrt(w_b_t).is_none());
        assert!(grads.wrt(feats).is_some());
    }

    #[test]
    fn ldam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 4;
        let k = 5;
        let logits = Tensor::new(
            n,
            k,
            (0..n * k)
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap();
        let labels: Vec<u16> = vec![0, 2, 4, 1];
        let margins = MarginVector {
            deltas: vec![0.3, 0.1, 0.05, 0.4, 0.2],
            scale: 0.5,
        };
        let mask = vec![true, true, false, true];
        let f =
            loss_fn(move |_t: &Tape, vs: &[Var<'_>]| ldam_loss(vs[0], &labels, &margins, &mask));
        let report = crate::tape::finite_difference_check(&f, &[logits], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
