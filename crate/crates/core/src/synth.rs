//! Synthetic episode generation.
//!
//! Class prototypes live on the unit sphere of the feature space; each novel
//! prototype is placed at a controlled cosine similarity to a designated base
//! anchor (orthogonal to everything when unspecified). Pixel features are the
//! class prototype plus isotropic Gaussian noise, and every image is tiled by
//! contiguous scanline runs whose per-class pixel budgets follow a long-tail
//! profile, so the base-phase dataset is imbalanced by construction.
//!
//! The base training phase fits a plain linear classifier with cross-entropy
//! on the base-phase dataset, where novel pixels are relabeled background.
//! Its weights are the frozen classifier consumed by adaptation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ClassPartition;
use crate::loss::{cross_entropy, mask_from_labels};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::IGNORE_LABEL;

/// Placement of one novel prototype relative to a base anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySpec {
    /// Global class index of the novel class (`n_base + 1 ..`).
    pub novel_class: usize,
    /// Global class index of the base anchor (`1 ..= n_base`).
    pub anchor_class: usize,
    /// Cosine similarity between the two prototypes, in [0, 1].
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub feature_dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub similarity: Vec<SimilaritySpec>,
    pub noise_std: f64,
    pub image_height: usize,
    pub image_width: usize,
    /// Per-image pixel budget per class (background, base..., novel...);
    /// must sum to exactly `image_height * image_width`.
    pub pixels_per_class: Vec<usize>,
    pub n_support_images: usize,
    pub n_query_images: usize,
    pub n_base_images: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        let (h, w) = (24, 24);
        let n_base = 4;
        let n_novel = 2;
        TaskSpec {
            feature_dim: 32,
            n_base,
            n_novel,
            similarity: Vec::new(),
            noise_std: 0.25,
            image_height: h,
            image_width: w,
            pixels_per_class: fitted_long_tail(h * w, 0.6, 1 + n_base + n_novel),
            n_support_images: 2 * n_novel,
            n_query_images: 4,
            n_base_images: 8,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn partition(&self) -> Result<ClassPartition> {
        ClassPartition::new(self.n_base, self.n_novel)
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_height * self.image_width
    }

    pub fn validate(&self) -> Result<()> {
        let partition = self.partition()?;
        let k = partition.num_classes();
        if self.feature_dim < k + 1 {
            return Err(Error::config(format!(
                "feature_dim {} too small to place {k} separable prototypes",
                self.feature_dim
            )));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.pixels_per_class.len() != k {
            return Err(Error::config(format!(
                "pixels_per_class has {} entries for {k} classes",
                self.pixels_per_class.len()
            )));
        }
        if self.pixels_per_class.contains(&0) {
            return Err(Error::config(
                "every class needs at least one pixel per image",
            ));
        }
        let total: usize = self.pixels_per_class.iter().sum();
        if total != self.pixels_per_image() {
            return Err(Error::config(format!(
                "pixel budgets sum to {total} but each image has {} pixels",
                self.pixels_per_image()
            )));
        }
        if self.n_support_images == 0 || self.n_query_images == 0 || self.n_base_images == 0 {
            return Err(Error::config("image counts must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be non-negative"));
        }
        for s in &self.similarity {
            if !partition.is_novel(s.novel_class) {
                return Err(Error::config(format!(
                    "{} is not a novel class",
                    s.novel_class
                )));
            }
            if !(1..partition.base_side()).contains(&s.anchor_class) {
                return Err(Error::config(format!(
                    "{} is not a base class",
                    s.anchor_class
                )));
            }
            if !(0.0..=1.0).contains(&s.cosine) {
                return Err(Error::config(format!("cosine {} outside [0, 1]", s.cosine)));
            }
        }
        Ok(())
    }
}

/// Geometric long-tail budgets: `head, head*ratio, head*ratio^2, ...`
/// (rounded down, floored at one pixel).
pub fn geometric_budgets(head: usize, ratio: f64, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| ((head as f64 * ratio.powi(c as i32)) as usize).max(1))
        .collect()
}

/// Geometric profile rescaled to sum exactly to `total` via largest-remainder
/// rounding, every class keeping at least one pixel.
pub fn fitted_long_tail(total: usize, ratio: f64, classes: usize) -> Vec<usize> {
    let raw: Vec<f64> = (0..classes).map(|c| ratio.powi(c as i32)).collect();
    let norm: f64 = raw.iter().sum();
    let mut budgets: Vec<usize> = raw
        .iter()
        .map(|r| ((r / norm) * total as f64).floor() as usize)
        .map(|b| b.max(1))
        .collect();
    // Largest remainders first until the total matches.
    let mut remainders: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, (r / norm) * total as f64 - budgets[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = budgets.iter().sum();
    let mut cursor = 0;
    while assigned < total {
        budgets[remainders[cursor % classes].0] += 1;
        assigned += 1;
        cursor += 1;
    }
    while assigned > total {
        let idx = remainders[cursor % classes].0;
        if budgets[idx] > 1 {
            budgets[idx] -= 1;
            assigned -= 1;
        }
        cursor += 1;
    }
    budgets
}

/// Per-pixel feature vectors for one image, row-major over pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportImage {
    pub map: FeatureMap,
    /// Per-pixel labels: the image's novel class and explicit background;
    /// everything else is ignored.
    pub labels: Vec<u16>,
    pub novel_class: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub map: FeatureMap,
    /// Full ground truth, used for evaluation only.
    pub labels: Vec<u16>,
}

/// One GFSS task: support set, query set, class layout and the base-phase
/// pixel histogram used for the class prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportImage>,
    pub query: Vec<QueryImage>,
    pub partition: ClassPartition,
    /// Pixel counts per base-side class over the base-phase dataset.
    pub train_histogram: Vec<u64>,
}

/// Base training data: novel pixels are labeled background.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePhaseDataset {
    pub images: Vec<(FeatureMap, Vec<u16>)>,
    pub histogram: Vec<u64>,
}

struct Prototypes {
    vectors: Vec<Vec<f64>>, // one unit vector per class
}

fn sample_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// A unit vector orthogonal to every vector in `against` (two rounds of
/// Gram-Schmidt for numerical hygiene).
fn orthogonal_unit(dim: usize, against: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = sample_gaussian(dim, rng);
    for _ in 0..2 {
        for basis in against {
            let proj = dot(&v, basis);
            for (x, b) in v.iter_mut().zip(basis) {
                *x -= proj * b;
            }
        }
    }
    normalize(&mut v);
    v
}

fn build_prototypes(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Result<Prototypes> {
    let partition = spec.partition()?;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(partition.num_classes());

    // Background + base classes: mutually orthonormal.
    for _ in 0..partition.base_side() {
        vectors.push(orthogonal_unit(spec.feature_dim, &vectors, rng));
    }
    // Novel classes: anchored at the requested similarity, orthogonal to all
    // earlier prototypes otherwise.
    for novel in partition.novel_classes() {
        let placement = spec.similarity.iter().find(|s| s.novel_class == novel);
        let fresh = orthogonal_unit(spec.feature_dim, &vectors, rng);
        let proto = match placement {
            Some(s) if s.cosine > 0.0 => {
                let anchor = &vectors[s.anchor_class];
                let tangent = (1.0 - s.cosine * s.cosine).sqrt();
                anchor
                    .iter()
                    .zip(&fresh)
                    .map(|(&a, &f)| s.cosine * a + tangent * f)
                    .collect()
            }
            _ => fresh,
        };
        vectors.push(proto);
    }
    Ok(Prototypes { vectors })
}

/// Per-pixel class layout for one image: contiguous scanline runs, one per
/// class, in a shuffled order.
fn image_layout(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let mut order: Vec<u16> = (0..spec.pixels_per_class.len() as u16).collect();
    order.shuffle(rng);
    let mut labels = Vec::with_capacity(spec.pixels_per_image());
    for &class in &order {
        labels.extend(std::iter::repeat_n(class, spec.pixels_per_class[class as usize]));
    }
    labels
}

fn render_features(
    spec: &TaskSpec,
    labels: &[u16],
    protos: &Prototypes,
    rng: &mut ChaCha8Rng,
) -> FeatureMap {
    let f = spec.feature_dim;
    let mut data = Vec::with_capacity(labels.len() * f);
    for &class in labels {
        let proto = &protos.vectors[class as usize];
        for &p in proto {
            let noise: f64 = if spec.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                z * spec.noise_std
            } else {
                0.0
            };
            data.push(p + noise);
        }
    }
    FeatureMap {
        height: spec.image_height,
        width: spec.image_width,
        features: Tensor::new(labels.len(), f, data).expect("sized feature payload"),
    }
}

/// Generate one episode plus its base-phase dataset, deterministically per
/// seed.
pub fn generate_task(spec: &TaskSpec) -> Result<(Episode, BasePhaseDataset)> {
    spec.validate()?;
    let partition = spec.partition()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = build_prototypes(spec, &mut rng)?;

    // Base-phase dataset: full layouts with novel classes pushed to
    // background.
    let mut base_images = Vec::with_capacity(spec.n_base_images);
    let mut histogram = vec![0u64; partition.base_side()];
    for _ in 0..spec.n_base_images {
        let gt = image_layout(spec, &mut rng);
        let map = render_features(spec, &gt, &protos, &mut rng);
        let labels: Vec<u16> = gt
            .iter()
            .map(|&c| if partition.is_novel(c as usize) { 0 } else { c })
            .collect();
        for &c in &labels {
            histogram[c as usize] += 1;
        }
        base_images.push((map, labels));
    }

    // Support set: each image annotates exactly one novel class; true
    // background is labeled, everything else is ignored.
    let mut support = Vec::with_capacity(spec.n_support_images);
    for i in 0..spec.n_support_images {
        let novel_class = (partition.base_side() + i % partition.n_novel()) as u16;
        let gt = image_layout(spec, &mut rng);
        let map = render_features(spec, &gt, &protos, &mut rng);
        let labels: Vec<u16> = gt
            .iter()
            .map(|&c| {
                if c == novel_class {
                    c
                } else if c == 0 {
                    0
                } else {
                    IGNORE_LABEL
                }
            })
            .collect();
        support.push(SupportImage {
            map,
            labels,
            novel_class,
        });
    }

    // Query set: full ground truth kept for evaluation.
    let mut query = Vec::with_capacity(spec.n_query_images);
    for _ in 0..spec.n_query_images {
        let gt = image_layout(spec, &mut rng);
        let map = render_features(spec, &gt, &protos, &mut rng);
        query.push(QueryImage { map, labels: gt });
    }

    let episode = Episode {
        support,
        query,
        partition,
        train_histogram: histogram.clone(),
    };
    Ok((
        episode,
        BasePhaseDataset {
            images: base_images,
            histogram,
        },
    ))
}

/// Result of the base training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBase {
    /// Frozen linear classifier, `base_side x feature_dim`.
    pub weights: Tensor,
    /// Final full-batch training accuracy.
    pub train_accuracy: f64,
}

/// Fit the base-side linear classifier with cross-entropy and momentum SGD
/// over the full base-phase dataset.
pub fn train_base_classifier(
    dataset: &BasePhaseDataset,
    partition: ClassPartition,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainedBase> {
    if dataset.images.is_empty() {
        return Err(Error::contract("base-phase dataset is empty"));
    }
    let feature_dim = dataset.images[0].0.features.cols();
    let b = partition.base_side();
    for (c, &n) in dataset.histogram.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!(
                "base-side class {c} absent from base dataset"
            )));
        }
    }

    let mut features = dataset.images[0].0.features.clone();
    let mut labels = dataset.images[0].1.clone();
    for (map, lab) in &dataset.images[1..] {
        features = features.concat_rows(&map.features)?;
        labels.extend_from_slice(lab);
    }
    let mask = mask_from_labels(&labels);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = {
        let data = (0..b * feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.01
            })
            .collect();
        Tensor::new(b, feature_dim, data)?
    };
    let mut velocity = Tensor::zeros(b, feature_dim);
    let momentum = 0.9;

    for _ in 0..epochs {
        let tape = Tape::new();
        let w = tape.input(weights.clone());
        let x = tape.constant(features.clone());
        let logits = x.matmul(&w.t()?)?;
        let loss = cross_entropy(logits, &labels, &mask)?;
        let value = loss.scalar_value()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("base training loss became {value}")));
        }
        let grads = loss.backward()?;
        let g = grads.wrt(w).expect("weights require grad");
        velocity = velocity.scale(momentum).add(g)?;
        weights = weights.sub(&velocity.scale(lr))?;
    }

    let logits = features.matmul(&weights.transpose())?;
    let preds = logits.argmax_rows();
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(TrainedBase {
        weights,
        train_accuracy: correct as f64 / labels.len() as f64,
    })
}
