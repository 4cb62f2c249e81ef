use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gfss_core::adapt::{run_adaptation, AdaptationConfig, Arm};
use gfss_core::head::ClassPartition;
use gfss_core::head::{base_posterior, transition_probs, HeadInit, HeadParams, HeadVars};
use gfss_core::metrics::ConfusionMatrix;
use gfss_core::synth::{generate_task, train_base_classifier, SimilaritySpec, TaskSpec};
use gfss_core::tape::Tape;
use gfss_core::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect(),
    )
    .unwrap()
}

fn bench_matmul_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 64, 64);
    let b = rand_tensor(&mut rng, 64, 64);
    c.bench_function("matmul_64x64_value_and_grad", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let av = tape.input(black_box(a.clone()));
            let bv = tape.input(black_box(b.clone()));
            let out = av.matmul(&bv).unwrap().sum().unwrap();
            black_box(out.backward().unwrap());
        })
    });
}

fn bench_transition_forward(c: &mut Criterion) {
    let partition = ClassPartition::new(3, 2).unwrap();
    let f = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w_b_t = rand_tensor(&mut rng, partition.base_side(), f);
    let head = HeadParams::init(partition, f, w_b_t, &HeadInit::default(), 3).unwrap();
    let feats = rand_tensor(&mut rng, 392, f);
    let posterior = base_posterior(&feats, &head.w_b_t).unwrap();
    c.bench_function("transition_probs_392px", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let vars = HeadVars::build(&tape, &head, true);
            let out = transition_probs(
                tape.constant(black_box(feats.clone())),
                tape.constant(posterior.clone()),
                &vars.mlp_r,
                &vars.mlp_c,
                vars.beta,
            )
            .unwrap();
            black_box(out.value());
        })
    });
}

fn bench_adaptation_epochs(c: &mut Criterion) {
    let spec = TaskSpec {
        feature_dim: 24,
        n_base: 3,
        n_novel: 2,
        similarity: vec![SimilaritySpec {
            novel_class: 4,
            anchor_class: 1,
            cosine: 0.8,
        }],
        noise_std: 0.3,
        image_height: 14,
        image_width: 14,
        pixels_per_class: vec![100, 36, 20, 14, 14, 12],
        n_support_images: 2,
        n_query_images: 4,
        n_base_images: 6,
        seed: 4,
    };
    let (episode, base) = generate_task(&spec).unwrap();
    let trained = train_base_classifier(&base, spec.partition().unwrap(), 40, 0.5, 5).unwrap();
    let cfg = AdaptationConfig {
        epochs: 10,
        lr: 0.05,
        t_pi: 2,
        trace_every: 10,
        arm: Arm::Transition,
        ..AdaptationConfig::default()
    };
    c.bench_function("adaptation_10_epochs", |bench| {
        bench.iter(|| black_box(run_adaptation(&episode, &trained.weights, &cfg).unwrap()))
    });
}

fn bench_confusion_accumulate(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred: Vec<u16> = (0..10_000)
        .map(|_| (rng.random::<u32>() % 6) as u16)
        .collect();
    let gt: Vec<u16> = (0..10_000)
        .map(|_| (rng.random::<u32>() % 6) as u16)
        .collect();
    c.bench_function("confusion_accumulate_10k", |bench| {
        bench.iter(|| {
            let mut cm = ConfusionMatrix::new(6);
            cm.accumulate(black_box(&pred), black_box(&gt), u16::MAX)
                .unwrap();
            black_box(cm);
        })
    });
}

criterion_group!(
    benches,
    bench_matmul_backward,
    bench_transition_forward,
    bench_adaptation_epochs,
    bench_confusion_accumulate
);
criterion_main!(benches);
