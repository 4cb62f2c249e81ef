//! Command implementations: episode generation, adaptation runs, ablations
//! and the gradient-check suite.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gfss_core::adapt::{
    frozen_classifier_confusion, query_confusion, run_adaptation, AdaptationConfig,
    AdaptationTrace, Arm,
};
use gfss_core::head::{mean_transition_matrix, ClassPartition};
use gfss_core::metrics::{heatmap_rows, report_from_confusion, MetricsReport};
use gfss_core::synth::{generate_task, train_base_classifier, Episode, QueryImage, SupportImage};
use gfss_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::feature_file::{read_feature_map, read_matrix, write_feature_map, write_matrix};
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const EPISODE_DIR: &str = "episode";

#[derive(Debug, Serialize, Deserialize)]
pub struct SupportEntry {
    pub file: String,
    pub novel_class: u16,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
}

/// On-disk description of a generated episode.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_base: usize,
    pub n_novel: usize,
    pub feature_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub train_histogram: Vec<u64>,
    pub support: Vec<SupportEntry>,
    pub query: Vec<FileEntry>,
    pub base_phase: Vec<FileEntry>,
    pub classifier: String,
    pub base_train_accuracy: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Generate an episode, train the frozen classifier, and persist everything
/// under `<out>/episode/`.
pub fn cmd_generate(cfg: &RunConfig, config_hash: &str, out: &Path) -> Result<Manifest, CliError> {
    let spec = cfg.task.to_spec(cfg.seed);
    let (episode, base) = generate_task(&spec)?;
    let partition = episode.partition;
    let trained = train_base_classifier(
        &base,
        partition,
        cfg.base_training.epochs,
        cfg.base_training.lr,
        cfg.seed.wrapping_add(1),
    )?;

    let dir = out.join(EPISODE_DIR);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let mut manifest = Manifest {
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
        n_base: partition.n_base(),
        n_novel: partition.n_novel(),
        feature_dim: spec.feature_dim,
        image_height: spec.image_height,
        image_width: spec.image_width,
        train_histogram: episode.train_histogram.clone(),
        support: Vec::new(),
        query: Vec::new(),
        base_phase: Vec::new(),
        classifier: "w_b_t.gfss".into(),
        base_train_accuracy: trained.train_accuracy,
    };

    for (i, s) in episode.support.iter().enumerate() {
        let name = format!("support_{i:03}.gfss");
        let path = dir.join(&name);
        write_feature_map(&path, &s.map, Some(&s.labels)).map_err(|e| io_err(&path, e))?;
        manifest.support.push(SupportEntry {
            file: name,
            novel_class: s.novel_class,
        });
    }
    for (i, q) in episode.query.iter().enumerate() {
        let name = format!("query_{i:03}.gfss");
        let path = dir.join(&name);
        write_feature_map(&path, &q.map, Some(&q.labels)).map_err(|e| io_err(&path, e))?;
        manifest.query.push(FileEntry { file: name });
    }
    for (i, (map, labels)) in base.images.iter().enumerate() {
        let name = format!("base_{i:03}.gfss");
        let path = dir.join(&name);
        write_feature_map(&path, map, Some(labels)).map_err(|e| io_err(&path, e))?;
        manifest.base_phase.push(FileEntry { file: name });
    }
    let wpath = dir.join(&manifest.classifier);
    write_matrix(&wpath, &trained.weights).map_err(|e| io_err(&wpath, e))?;

    let mpath = dir.join(MANIFEST_NAME);
    write_text(
        &mpath,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// Load an episode (and the frozen classifier) persisted by `cmd_generate`.
pub fn load_episode(out: &Path) -> Result<(Episode, Tensor, Manifest), CliError> {
    let dir = out.join(EPISODE_DIR);
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", mpath.display())))?;
    let partition = ClassPartition::new(manifest.n_base, manifest.n_novel)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut support = Vec::new();
    for entry in &manifest.support {
        let path = dir.join(&entry.file);
        let (map, mask) = read_feature_map(&path).map_err(|e| io_err(&path, e))?;
        let labels = mask.ok_or_else(|| {
            CliError::Io(format!(
                "{}: support file has no mask section",
                path.display()
            ))
        })?;
        support.push(SupportImage {
            map,
            labels,
            novel_class: entry.novel_class,
        });
    }
    let mut query = Vec::new();
    for entry in &manifest.query {
        let path = dir.join(&entry.file);
        let (map, mask) = read_feature_map(&path).map_err(|e| io_err(&path, e))?;
        let labels = mask.ok_or_else(|| {
            CliError::Io(format!(
                "{}: query file has no mask section",
                path.display()
            ))
        })?;
        query.push(QueryImage { map, labels });
    }
    let wpath = dir.join(&manifest.classifier);
    let w_b_t = read_matrix(&wpath).map_err(|e| io_err(&wpath, e))?;

    let episode = Episode {
        support,
        query,
        partition,
        train_histogram: manifest.train_histogram.clone(),
    };
    Ok((episode, w_b_t, manifest))
}

/// Serialized metrics of one adaptation run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub arm: String,
    pub lambda: f64,
    pub margin_scale: f64,
    pub metrics: MetricsReport,
    pub frozen_base_miou: f64,
}

fn lambda_tag(lambda: f64) -> String {
    format!("lambda{}", format!("{lambda}").replace('.', "_"))
}

fn run_dir_name(arm: Arm, lambda: f64, sweeping: bool) -> String {
    if sweeping {
        format!("{}-{}", arm.name(), lambda_tag(lambda))
    } else {
        arm.name().to_string()
    }
}

fn write_trace_csv(path: &Path, trace: &AdaptationTrace, provenance: &str) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("# {provenance}\n"));
    text.push_str("epoch,total_loss,ldam_loss,pi_loss,kd_loss,support_miou,query_miou\n");
    for row in &trace.rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch,
            row.total_loss,
            row.ldam_loss,
            row.pi_loss,
            row.kd_loss,
            row.support_miou,
            row.query_miou
        ));
    }
    write_text(path, &text)
}

fn write_heatmap_csv(
    path: &Path,
    mean_transition: &Tensor,
    provenance: &str,
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("# {provenance}\n"));
    text.push_str("row_class,col_class,value\n");
    for (r, c, v) in heatmap_rows(mean_transition) {
        text.push_str(&format!("{r},{c},{v}\n"));
    }
    write_text(path, &text)
}

/// One adaptation run: returns the record and writes metrics, trace and
/// heatmap into `dir`.
fn one_run(
    episode: &Episode,
    w_b_t: &Tensor,
    cfg: &RunConfig,
    adaptation: &AdaptationConfig,
    config_hash: &str,
    dir: &Path,
) -> Result<RunRecord, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (params, trace) = run_adaptation(episode, w_b_t, adaptation)?;

    let merge = adaptation.effective_merge();
    let cm = query_confusion(episode, &params, &merge)?;
    let metrics = report_from_confusion(&cm, episode.partition, &cfg.aggregate)?;
    let frozen = report_from_confusion(
        &frozen_classifier_confusion(episode, w_b_t)?,
        episode.partition,
        &cfg.aggregate,
    )?;

    let provenance = format!(
        "config_hash={config_hash} seed={} arm={} lambda={}",
        adaptation.seed,
        adaptation.arm.name(),
        adaptation.lambda
    );
    write_trace_csv(&dir.join("trace.csv"), &trace, &provenance)?;

    let query_features = episode
        .query
        .iter()
        .map(|q| q.map.features.clone())
        .reduce(|a, b| a.concat_rows(&b).expect("same feature dim"))
        .expect("episode has query images");
    let mean_s = mean_transition_matrix(&query_features, &params)?;
    write_heatmap_csv(&dir.join("heatmap.csv"), &mean_s, &provenance)?;

    let record = RunRecord {
        config_hash: config_hash.to_string(),
        seed: adaptation.seed,
        arm: adaptation.arm.name().to_string(),
        lambda: adaptation.lambda,
        margin_scale: adaptation.margin_scale,
        metrics,
        frozen_base_miou: frozen.base_miou,
    };
    write_text(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&record).expect("record serializes"),
    )?;
    Ok(record)
}

fn run_many(
    episode: &Episode,
    w_b_t: &Tensor,
    cfg: &RunConfig,
    runs: Vec<(AdaptationConfig, PathBuf)>,
    config_hash: &str,
    parallel: bool,
) -> Result<Vec<RunRecord>, CliError> {
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = runs
                .iter()
                .map(|(adaptation, dir)| {
                    scope.spawn(move || one_run(episode, w_b_t, cfg, adaptation, config_hash, dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("run thread"))
                .collect()
        })
    } else {
        runs.iter()
            .map(|(adaptation, dir)| one_run(episode, w_b_t, cfg, adaptation, config_hash, dir))
            .collect()
    }
}

/// Adaptation over the configured arms (and lambda sweep when present).
pub fn cmd_adapt(
    cfg: &RunConfig,
    config_hash: &str,
    out: &Path,
    parallel: bool,
) -> Result<Vec<RunRecord>, CliError> {
    let (episode, w_b_t, _) = load_episode(out)?;
    let lambdas: Vec<f64> = if cfg.sweep.lambda.is_empty() {
        vec![cfg.adaptation.lambda]
    } else {
        cfg.sweep.lambda.clone()
    };
    let sweeping = !cfg.sweep.lambda.is_empty();

    let mut runs = Vec::new();
    for &arm in &cfg.arms {
        for &lambda in &lambdas {
            let adaptation = AdaptationConfig {
                arm,
                lambda,
                seed: cfg.seed,
                ..cfg.adaptation.clone()
            };
            let dir = out.join(run_dir_name(arm, lambda, sweeping));
            runs.push((adaptation, dir));
        }
    }
    let records = run_many(&episode, &w_b_t, cfg, runs, config_hash, parallel)?;
    for r in &records {
        println!(
            "{} lambda={}: base {:.2} novel {:.2} average {:.2} weighted {:.2}",
            r.arm,
            r.lambda,
            r.metrics.base_miou * 100.0,
            r.metrics.novel_miou * 100.0,
            r.metrics.average_miou * 100.0,
            r.metrics.weighted_miou * 100.0
        );
    }
    Ok(records)
}

/// Component ablation: the full head, the head without the transition
/// branch, and the head without class-frequency margins.
pub fn cmd_ablate(
    cfg: &RunConfig,
    config_hash: &str,
    out: &Path,
    parallel: bool,
) -> Result<Vec<RunRecord>, CliError> {
    let (episode, w_b_t, _) = load_episode(out)?;
    let arms: Vec<(&str, AdaptationConfig)> = vec![
        (
            "full",
            AdaptationConfig {
                arm: Arm::Transition,
                seed: cfg.seed,
                ..cfg.adaptation.clone()
            },
        ),
        (
            "no-transition",
            AdaptationConfig {
                arm: Arm::ClassifierOnly,
                seed: cfg.seed,
                ..cfg.adaptation.clone()
            },
        ),
        (
            "no-ldam",
            AdaptationConfig {
                arm: Arm::Transition,
                margin_scale: 0.0,
                seed: cfg.seed,
                ..cfg.adaptation.clone()
            },
        ),
    ];

    let runs: Vec<(AdaptationConfig, PathBuf)> = arms
        .iter()
        .map(|(name, adaptation)| (adaptation.clone(), out.join(format!("ablate-{name}"))))
        .collect();
    let records = run_many(&episode, &w_b_t, cfg, runs, config_hash, parallel)?;

    let mut table = String::new();
    table.push_str(&format!("# config_hash={config_hash} seed={}\n", cfg.seed));
    table.push_str("arm,base_miou,novel_miou,average_miou,weighted_miou\n");
    for ((name, _), record) in arms.iter().zip(&records) {
        table.push_str(&format!(
            "{name},{},{},{},{}\n",
            record.metrics.base_miou,
            record.metrics.novel_miou,
            record.metrics.average_miou,
            record.metrics.weighted_miou
        ));
        println!(
            "{name}: base {:.2} novel {:.2} average {:.2} weighted {:.2}",
            record.metrics.base_miou * 100.0,
            record.metrics.novel_miou * 100.0,
            record.metrics.average_miou * 100.0,
            record.metrics.weighted_miou * 100.0
        );
    }
    write_text(&out.join("ablation.csv"), &table)?;
    Ok(records)
}

/// Gradient verification; returns false when any suite exceeds tolerance.
pub fn cmd_check_gradients(seed: u64, instances: usize) -> Result<bool, CliError> {
    let results = crate::gradcheck::run_all(seed, instances, 1e-5)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed(1e-4) { "ok" } else { "FAIL" };
        println!(
            "{:<18} instances={:<4} max_rel_err={:.3e}  {status}",
            r.name, r.instances, r.max_rel_err
        );
        ok &= r.passed(1e-4);
    }
    Ok(ok)
}
