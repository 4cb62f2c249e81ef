//! The two-branch prediction head.
//!
//! The classification branch is a plain linear classifier over base and novel
//! classes. The transition branch estimates, per pixel, a column-stochastic
//! matrix mapping the frozen base classifier's posterior onto the full class
//! set; its product with that posterior yields transition probabilities that
//! are merged with the classification logits before the final row softmax.
//!
//! The per-pixel matrix is built from the outer product of two small MLP
//! heads plus a learnable bias, then normalized column-wise with softmax so
//! every column is a probability distribution. The bias carries a
//! diagonally-dominant block over the base-side rows at initialization, which
//! keeps base predictions intact until the optimizer decides otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index layout of the prediction vector: background at 0, base classes at
/// `1..=n_base`, novel classes after that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    n_base: usize,
    n_novel: usize,
}

impl ClassPartition {
    pub fn new(n_base: usize, n_novel: usize) -> Result<Self> {
        if n_base == 0 || n_novel == 0 {
            return Err(Error::config(
                "partition needs at least one base and one novel class",
            ));
        }
        Ok(ClassPartition { n_base, n_novel })
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_novel(&self) -> usize {
        self.n_novel
    }

    /// Total class count: background + base + novel.
    pub fn num_classes(&self) -> usize {
        1 + self.n_base + self.n_novel
    }

    /// Background + base classes; the frozen classifier's output dimension.
    pub fn base_side(&self) -> usize {
        1 + self.n_base
    }

    pub fn background(&self) -> usize {
        0
    }

    pub fn is_base_side(&self, class: usize) -> bool {
        class < self.base_side()
    }

    pub fn is_novel(&self, class: usize) -> bool {
        class >= self.base_side() && class < self.num_classes()
    }

    pub fn novel_classes(&self) -> std::ops::Range<usize> {
        self.base_side()..self.num_classes()
    }

    pub fn base_classes(&self) -> std::ops::Range<usize> {
        1..self.base_side()
    }
}

/// One-hidden-layer MLP: `in_dim -> hidden (tanh) -> out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Tensor, // hidden x in
    pub b1: Tensor, // 1 x hidden
    pub w2: Tensor, // out x hidden
    pub b2: Tensor, // 1 x out
}

impl MlpParams {
    /// First layer at ~1/sqrt(in) scale, output layer near zero so the raw
    /// transition scores start tiny relative to the bias.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gauss = |r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng| {
            let data = (0..r * c)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Tensor::new(r, c, data).expect("sized data")
        };
        let w1_std = 1.0 / (in_dim as f64).sqrt();
        MlpParams {
            w1: gauss(hidden, in_dim, w1_std, rng),
            b1: Tensor::zeros(1, hidden),
            w2: gauss(out_dim, hidden, out_std, rng),
            b2: Tensor::zeros(1, out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Plain (non-recorded) forward pass over a batch of row features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let ones = Tensor::filled(x.rows(), 1, 1.0);
        let h = x
            .matmul(&self.w1.transpose())?
            .add(&ones.outer(&self.b1)?)?
            .tanh();
        h.matmul(&self.w2.transpose())?.add(&ones.outer(&self.b2)?)
    }
}

/// Tape handles for one MLP's parameters.
#[derive(Clone, Copy)]
pub struct MlpVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> MlpVars<'t> {
    /// Recorded forward pass; biases are broadcast with an outer product
    /// against a ones column so their gradients reduce correctly.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let ones = tape.constant(Tensor::filled(x.shape().0, 1, 1.0));
        let h = x
            .matmul(&self.w1.t()?)?
            .add(&ones.outer(&self.b1)?)?
            .tanh()?;
        h.matmul(&self.w2.t()?)?.add(&ones.outer(&self.b2)?)
    }
}

/// How classification logits and transition probabilities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// `logits + gamma * ln(probs + epsilon)`; keeps both terms on log scale.
    #[default]
    LogProbSum,
    /// `logits + gamma * probs`; literal elementwise addition.
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub mode: MergeMode,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            mode: MergeMode::LogProbSum,
            gamma: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::config(format!(
                "merge gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::config(format!(
                "merge epsilon must lie in (0, 1e-3], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Initialization knobs for [`HeadParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadInit {
    /// Hidden width of the two MLP heads; `None` means `feature_dim / 4`.
    pub hidden_dim: Option<usize>,
    /// Diagonal magnitude of the base-to-base bias block at initialization.
    pub kappa: f64,
    /// Std of the novel classifier rows at initialization.
    pub novel_std: f64,
    /// Std of the MLP output layers at initialization.
    pub mlp_out_std: f64,
}

impl Default for HeadInit {
    fn default() -> Self {
        HeadInit {
            hidden_dim: None,
            kappa: 4.0,
            novel_std: 0.01,
            mlp_out_std: 0.01,
        }
    }
}

/// All head parameters. `w_b_t` is the frozen base classifier and is never
/// touched by adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub partition: ClassPartition,
    /// Frozen base classifier, `base_side x F`.
    pub w_b_t: Tensor,
    /// Trainable base classifier, `base_side x F`.
    pub w_b_f: Tensor,
    /// Trainable novel classifier, `n_novel x F`.
    pub w_n_f: Tensor,
    /// MLP producing the column axis of the transition matrix (length `base_side`).
    pub mlp_r: MlpParams,
    /// MLP producing the row axis of the transition matrix (length `num_classes`).
    pub mlp_c: MlpParams,
    /// Learnable bias, `num_classes x base_side`.
    pub beta: Tensor,
}

impl HeadParams {
    pub fn init(
        partition: ClassPartition,
        feature_dim: usize,
        w_b_t: Tensor,
        cfg: &HeadInit,
        seed: u64,
    ) -> Result<Self> {
        if w_b_t.shape() != (partition.base_side(), feature_dim) {
            return Err(Error::shape(format!(
                "frozen classifier must be {}x{}, got {}x{}",
                partition.base_side(),
                feature_dim,
                w_b_t.rows(),
                w_b_t.cols()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = cfg.hidden_dim.unwrap_or((feature_dim / 4).max(1));
        let k = partition.num_classes();
        let b = partition.base_side();

        let w_n_f = {
            let data = (0..partition.n_novel() * feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * cfg.novel_std
                })
                .collect();
            Tensor::new(partition.n_novel(), feature_dim, data)?
        };
        let mlp_r = MlpParams::init(feature_dim, hidden, b, cfg.mlp_out_std, &mut rng);
        let mlp_c = MlpParams::init(feature_dim, hidden, k, cfg.mlp_out_std, &mut rng);

        // kappa * I on the base-to-base block, zero on the novel rows.
        let beta = Tensor::diagonal(k, b, cfg.kappa);

        Ok(HeadParams {
            partition,
            w_b_f: w_b_t.clone(),
            w_b_t,
            w_n_f,
            mlp_r,
            mlp_c,
            beta,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_b_t.cols()
    }
}

/// Tape handles for the head. `w_b_t` is always a constant; the rest are
/// differentiable leaves only when the corresponding flag is set.
pub struct HeadVars<'t> {
    pub w_b_t: Var<'t>,
    pub w_b_f: Var<'t>,
    pub w_n_f: Var<'t>,
    pub mlp_r: MlpVars<'t>,
    pub mlp_c: MlpVars<'t>,
    pub beta: Var<'t>,
    trainable: Vec<Var<'t>>,
}

impl<'t> HeadVars<'t> {
    /// Registers the head on `tape`. `train_transition` controls whether the
    /// transition-branch parameters become differentiable leaves.
    pub fn build(tape: &'t Tape, params: &HeadParams, train_transition: bool) -> Self {
        let mut trainable = Vec::new();
        let mut reg = |t: &Tensor, train: bool| -> Var<'t> {
            if train {
                let v = tape.input(t.clone());
                trainable.push(v);
                v
            } else {
                tape.constant(t.clone())
            }
        };
        let w_b_f = reg(&params.w_b_f, true);
        let w_n_f = reg(&params.w_n_f, true);
        let mlp_r = MlpVars {
            w1: reg(&params.mlp_r.w1, train_transition),
            b1: reg(&params.mlp_r.b1, train_transition),
            w2: reg(&params.mlp_r.w2, train_transition),
            b2: reg(&params.mlp_r.b2, train_transition),
        };
        let mlp_c = MlpVars {
            w1: reg(&params.mlp_c.w1, train_transition),
            b1: reg(&params.mlp_c.b1, train_transition),
            w2: reg(&params.mlp_c.w2, train_transition),
            b2: reg(&params.mlp_c.b2, train_transition),
        };
        let beta = reg(&params.beta, train_transition);
        let w_b_t = tape.constant(params.w_b_t.clone());
        HeadVars {
            w_b_t,
            w_b_f,
            w_n_f,
            mlp_r,
            mlp_c,
            beta,
            trainable,
        }
    }

    /// Differentiable leaves in registration order, mirrored by
    /// [`collect_trainable`] / [`install_trainable`].
    pub fn trainable(&self) -> &[Var<'t>] {
        &self.trainable
    }
}

/// Snapshot of the trainable tensors in the same order as
/// [`HeadVars::trainable`].
pub fn collect_trainable(params: &HeadParams, train_transition: bool) -> Vec<Tensor> {
    let mut out = vec![params.w_b_f.clone(), params.w_n_f.clone()];
    if train_transition {
        out.extend([
            params.mlp_r.w1.clone(),
            params.mlp_r.b1.clone(),
            params.mlp_r.w2.clone(),
            params.mlp_r.b2.clone(),
            params.mlp_c.w1.clone(),
            params.mlp_c.b1.clone(),
            params.mlp_c.w2.clone(),
            params.mlp_c.b2.clone(),
            params.beta.clone(),
        ]);
    }
    out
}

pub fn install_trainable(
    params: &mut HeadParams,
    train_transition: bool,
    tensors: &[Tensor],
) -> Result<()> {
    let expected = if train_transition { 11 } else { 2 };
    if tensors.len() != expected {
        return Err(Error::contract(format!(
            "expected {expected} trainable tensors, got {}",
            tensors.len()
        )));
    }
    params.w_b_f = tensors[0].clone();
    params.w_n_f = tensors[1].clone();
    if train_transition {
        params.mlp_r.w1 = tensors[2].clone();
        params.mlp_r.b1 = tensors[3].clone();
        params.mlp_r.w2 = tensors[4].clone();
        params.mlp_r.b2 = tensors[5].clone();
        params.mlp_c.w1 = tensors[6].clone();
        params.mlp_c.b1 = tensors[7].clone();
        params.mlp_c.w2 = tensors[8].clone();
        params.mlp_c.b2 = tensors[9].clone();
        params.beta = tensors[10].clone();
    }
    Ok(())
}

/// A per-pixel column-stochastic transition matrix,
/// `num_classes x base_side`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Tensor);

impl TransitionMatrix {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        for c in 0..t.cols() {
            let mut total = 0.0;
            for r in 0..t.rows() {
                let v = t.get(r, c);
                if v <= 0.0 {
                    return Err(Error::Data(format!(
                        "transition entry ({r},{c}) = {v} not positive"
                    )));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "transition column {c} sums to {total}"
                )));
            }
        }
        Ok(TransitionMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

// ---- head operations -----------------------------------------------------

/// Linear classification logits from the concatenated base+novel classifier.
pub fn classification_logits<'t>(
    features: Var<'t>,
    w_b_f: Var<'t>,
    w_n_f: Var<'t>,
) -> Result<Var<'t>> {
    let combined = w_b_f.concat_rows(&w_n_f)?;
    features.matmul(&combined.t()?)
}

/// Column-stochastic transition matrix for a single pixel feature (1×F).
pub fn transition_matrix_at<'t>(
    feature: Var<'t>,
    mlp_r: &MlpVars<'t>,
    mlp_c: &MlpVars<'t>,
    beta: Var<'t>,
) -> Result<Var<'t>> {
    let row_axis = mlp_r.forward(feature)?; // 1 x base_side
    let col_axis = mlp_c.forward(feature)?; // 1 x num_classes
    let raw = col_axis.outer(&row_axis)?.add(&beta)?;
    raw.softmax_cols()
}

/// Frozen base-classifier posterior over a feature batch (plain math).
pub fn base_posterior(features: &Tensor, w_b_t: &Tensor) -> Result<Tensor> {
    Ok(features.matmul(&w_b_t.transpose())?.softmax_rows())
}

/// Per-pixel transition probabilities for a whole feature batch:
/// row j holds `S(x_j) * posterior_j`, a distribution over all classes.
///
/// Vectorized over pixels by walking the base-side columns: for column q the
/// pre-softmax scores of every pixel are `col_axis * row_axis[q] + beta[:,q]`,
/// an elementwise expression over the batch.
pub fn transition_probs<'t>(
    features: Var<'t>,
    posterior: Var<'t>,
    mlp_r: &MlpVars<'t>,
    mlp_c: &MlpVars<'t>,
    beta: Var<'t>,
) -> Result<Var<'t>> {
    let tape = features.tape();
    let n = features.shape().0;
    let (k, b) = beta.shape();
    if posterior.shape() != (n, b) {
        return Err(Error::shape(format!(
            "posterior must be {n}x{b}, got {}x{}",
            posterior.shape().0,
            posterior.shape().1
        )));
    }

    let row_axis = mlp_r.forward(features)?; // N x base_side
    let col_axis = mlp_c.forward(features)?; // N x num_classes
    let ones_k = tape.constant(Tensor::filled(1, k, 1.0));

    let mut acc: Option<Var<'t>> = None;
    for q in 0..b {
        let mut e = Tensor::zeros(b, 1);
        e.set(q, 0, 1.0);
        let e_q = tape.constant(e);

        let r_q = row_axis.matmul(&e_q)?; // N x 1
        let scale = r_q.outer(&ones_k)?; // N x K, rows r_q[j]
        let beta_q = beta.matmul(&e_q)?; // K x 1
        let ones_n = tape.constant(Tensor::filled(n, 1, 1.0));
        let bias = ones_n.outer(&beta_q.t()?)?; // N x K, rows beta[:,q]
        let scores = col_axis.mul(&scale)?.add(&bias)?;
        let col_q = scores.softmax_rows()?; // per-pixel column q of S

        let p_q = posterior.matmul(&e_q)?; // N x 1
        let weighted = col_q.mul(&p_q.outer(&ones_k)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("base_side >= 1"))
}

/// Merge classification logits with transition probabilities.
pub fn merge_logits<'t>(cls: Var<'t>, tr: Var<'t>, cfg: &MergeConfig) -> Result<Var<'t>> {
    if cls.shape() != tr.shape() {
        return Err(Error::shape(format!(
            "merge: {:?} vs {:?}",
            cls.shape(),
            tr.shape()
        )));
    }
    let term = match cfg.mode {
        MergeMode::LogProbSum => tr.add_scalar(cfg.epsilon)?.ln()?,
        MergeMode::RawSum => tr,
    };
    cls.add(&term.mul_scalar(cfg.gamma)?)
}

/// Full head forward pass over a feature batch: merged logits, one row per
/// pixel. With `gamma == 0` the transition branch is skipped entirely, which
/// also keeps its parameters out of the gradient.
pub fn merged_logits<'t>(
    features: Var<'t>,
    posterior: Var<'t>,
    head: &HeadVars<'t>,
    cfg: &MergeConfig,
) -> Result<Var<'t>> {
    let cls = classification_logits(features, head.w_b_f, head.w_n_f)?;
    if cfg.gamma == 0.0 {
        return Ok(cls);
    }
    let tr = transition_probs(features, posterior, &head.mlp_r, &head.mlp_c, head.beta)?;
    merge_logits(cls, tr, cfg)
}

/// Per-pixel probability map: row-softmax of the merged logits.
pub fn predict<'t>(
    features: Var<'t>,
    posterior: Var<'t>,
    head: &HeadVars<'t>,
    cfg: &MergeConfig,
) -> Result<Var<'t>> {
    merged_logits(features, posterior, head, cfg)?.softmax_rows()
}

/// Mean transition matrix over a feature batch (plain math, for reporting).
pub fn mean_transition_matrix(features: &Tensor, params: &HeadParams) -> Result<Tensor> {
    let row_axis = params.mlp_r.forward(features)?;
    let col_axis = params.mlp_c.forward(features)?;
    let k = params.partition.num_classes();
    let b = params.partition.base_side();
    let mut acc = Tensor::zeros(k, b);
    for j in 0..features.rows() {
        let raw = Tensor::row(col_axis.row_slice(j))
            .outer(&Tensor::row(row_axis.row_slice(j)))?
            .add(&params.beta)?;
        acc = acc.add(&raw.softmax_cols())?;
    }
    Ok(acc.scale(1.0 / features.rows() as f64))
}
