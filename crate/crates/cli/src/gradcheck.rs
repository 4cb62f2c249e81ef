//! Finite-difference verification of every differentiable composition the
//! adaptation loop uses: margin loss, proportion regularizer, distillation
//! term, the transition branch, and the full objective.

use gfss_core::head::{
    base_posterior, merge_logits, transition_probs, ClassPartition, MergeConfig, MlpVars,
};
use gfss_core::loss::{
    floor_and_normalize, kd_loss, ldam_loss, pi_regularizer, query_proportions, total_loss,
    MarginVector,
};
use gfss_core::tape::{finite_difference_check, loss_fn, Var};
use gfss_core::tensor::Tensor;
use gfss_core::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl SuiteResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn ldam_suite(rng: &mut ChaCha8Rng, instances: usize, epsilon: f64) -> Result<SuiteResult> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let n = 3 + (rng.random::<u32>() % 4) as usize;
        let k = 4 + (rng.random::<u32>() % 3) as usize;
        let logits = rand_tensor(rng, n, k, 2.0);
        let labels: Vec<u16> = (0..n)
            .map(|_| (rng.random::<u32>() % k as u32) as u16)
            .collect();
        let deltas: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 0.5).collect();
        let margins = MarginVector { deltas, scale: 0.5 };
        let mask: Vec<bool> = (0..n)
            .map(|i| i == 0 || rng.random::<f64>() > 0.25)
            .collect();
        let f = loss_fn(move |_t, vs: &[Var<'_>]| ldam_loss(vs[0], &labels, &margins, &mask));
        worst = worst.max(finite_difference_check(&f, &[logits], epsilon)?.max_rel_err);
    }
    Ok(SuiteResult {
        name: "ldam",
        instances,
        max_rel_err: worst,
    })
}

fn pi_suite(rng: &mut ChaCha8Rng, instances: usize, epsilon: f64) -> Result<SuiteResult> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let n = 4 + (rng.random::<u32>() % 4) as usize;
        let k = 3 + (rng.random::<u32>() % 4) as usize;
        let logits = rand_tensor(rng, n, k, 2.0);
        let pi = floor_and_normalize(&simplex(rng, k));
        let f = loss_fn(move |_t, vs: &[Var<'_>]| {
            let probs = vs[0].softmax_rows()?;
            pi_regularizer(query_proportions(probs)?, &pi)
        });
        worst = worst.max(finite_difference_check(&f, &[logits], epsilon)?.max_rel_err);
    }
    Ok(SuiteResult {
        name: "pi-regularizer",
        instances,
        max_rel_err: worst,
    })
}

fn kd_suite(rng: &mut ChaCha8Rng, instances: usize, epsilon: f64) -> Result<SuiteResult> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let partition = ClassPartition::new(2, 2)?;
        let n = 3 + (rng.random::<u32>() % 4) as usize;
        let logits = rand_tensor(rng, n, partition.num_classes(), 2.0);
        let base = rand_tensor(rng, n, partition.base_side(), 2.0).softmax_rows();
        let f = loss_fn(move |t, vs: &[Var<'_>]| {
            let probs = vs[0].softmax_rows()?;
            kd_loss(probs, t.constant(base.clone()), partition)
        });
        worst = worst.max(finite_difference_check(&f, &[logits], epsilon)?.max_rel_err);
    }
    Ok(SuiteResult {
        name: "kd",
        instances,
        max_rel_err: worst,
    })
}

/// Parameter order shared by the transition and full-objective suites:
/// `[w_b_f, w_n_f, r.w1, r.b1, r.w2, r.b2, c.w1, c.b1, c.w2, c.b2, beta]`.
fn head_params(
    rng: &mut ChaCha8Rng,
    partition: ClassPartition,
    f: usize,
    hidden: usize,
) -> Vec<Tensor> {
    let k = partition.num_classes();
    let b = partition.base_side();
    vec![
        rand_tensor(rng, b, f, 1.0),
        rand_tensor(rng, partition.n_novel(), f, 1.0),
        rand_tensor(rng, hidden, f, 0.7),
        rand_tensor(rng, 1, hidden, 0.3),
        rand_tensor(rng, b, hidden, 0.7),
        rand_tensor(rng, 1, b, 0.3),
        rand_tensor(rng, hidden, f, 0.7),
        rand_tensor(rng, 1, hidden, 0.3),
        rand_tensor(rng, k, hidden, 0.7),
        rand_tensor(rng, 1, k, 0.3),
        rand_tensor(rng, k, b, 0.8),
    ]
}

fn mlps<'t>(vs: &[Var<'t>]) -> (MlpVars<'t>, MlpVars<'t>) {
    (
        MlpVars {
            w1: vs[2],
            b1: vs[3],
            w2: vs[4],
            b2: vs[5],
        },
        MlpVars {
            w1: vs[6],
            b1: vs[7],
            w2: vs[8],
            b2: vs[9],
        },
    )
}

fn transition_suite(rng: &mut ChaCha8Rng, instances: usize, epsilon: f64) -> Result<SuiteResult> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let partition = ClassPartition::new(2, 2)?;
        let f = 6;
        let n = 3 + (rng.random::<u32>() % 3) as usize;
        let params = head_params(rng, partition, f, 2);
        let features = rand_tensor(rng, n, f, 1.0);
        let w_b_t = rand_tensor(rng, partition.base_side(), f, 1.0);
        let posterior = base_posterior(&features, &w_b_t)?;
        let weight = rand_tensor(rng, n, partition.num_classes(), 1.0);
        let fcheck = loss_fn(move |t, vs: &[Var<'_>]| {
            let (mlp_r, mlp_c) = mlps(vs);
            let tr = transition_probs(
                t.constant(features.clone()),
                t.constant(posterior.clone()),
                &mlp_r,
                &mlp_c,
                vs[10],
            )?;
            tr.mul(&t.constant(weight.clone()))?.sum()
        });
        worst = worst.max(finite_difference_check(&fcheck, &params, epsilon)?.max_rel_err);
    }
    Ok(SuiteResult {
        name: "transition-branch",
        instances,
        max_rel_err: worst,
    })
}

fn full_objective_suite(
    rng: &mut ChaCha8Rng,
    instances: usize,
    epsilon: f64,
) -> Result<SuiteResult> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let partition = ClassPartition::new(2, 2)?;
        let f = 6;
        let k = partition.num_classes();
        let n_support = 4 + (rng.random::<u32>() % 3) as usize;
        let n_query = 4;
        let params = head_params(rng, partition, f, 2);
        let support = rand_tensor(rng, n_support, f, 1.0);
        let query = rand_tensor(rng, n_query, f, 1.0);
        let w_b_t = rand_tensor(rng, partition.base_side(), f, 1.0);
        let support_post = base_posterior(&support, &w_b_t)?;
        let query_post = base_posterior(&query, &w_b_t)?;
        let labels: Vec<u16> = (0..n_support)
            .map(|_| (rng.random::<u32>() % k as u32) as u16)
            .collect();
        let deltas: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 0.4).collect();
        let margins = MarginVector { deltas, scale: 0.4 };
        let mask = vec![true; n_support];
        let pi = floor_and_normalize(&simplex(rng, k));
        let merge = MergeConfig::default();
        let lambda = 0.5 + rng.random::<f64>();

        let fcheck = loss_fn(move |t, vs: &[Var<'_>]| {
            let (mlp_r, mlp_c) = mlps(vs);
            let cls_s =
                gfss_core::head::classification_logits(t.constant(support.clone()), vs[0], vs[1])?;
            let tr_s = transition_probs(
                t.constant(support.clone()),
                t.constant(support_post.clone()),
                &mlp_r,
                &mlp_c,
                vs[10],
            )?;
            let merged_s = merge_logits(cls_s, tr_s, &merge)?;
            let l_ldam = ldam_loss(merged_s, &labels, &margins, &mask)?;

            let cls_q =
                gfss_core::head::classification_logits(t.constant(query.clone()), vs[0], vs[1])?;
            let tr_q = transition_probs(
                t.constant(query.clone()),
                t.constant(query_post.clone()),
                &mlp_r,
                &mlp_c,
                vs[10],
            )?;
            let probs_q = merge_logits(cls_q, tr_q, &merge)?.softmax_rows()?;
            let l_pi = pi_regularizer(query_proportions(probs_q)?, &pi)?;
            total_loss(l_ldam, l_pi, lambda)
        });
        worst = worst.max(finite_difference_check(&fcheck, &params, epsilon)?.max_rel_err);
    }
    Ok(SuiteResult {
        name: "full-objective",
        instances,
        max_rel_err: worst,
    })
}

/// Run all five composition suites with central differences at `epsilon`.
pub fn run_all(seed: u64, instances: usize, epsilon: f64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        ldam_suite(&mut rng, instances, epsilon)?,
        pi_suite(&mut rng, instances, epsilon)?,
        kd_suite(&mut rng, instances, epsilon)?,
        transition_suite(&mut rng, instances, epsilon)?,
        full_objective_suite(&mut rng, instances, epsilon)?,
    ])
}
