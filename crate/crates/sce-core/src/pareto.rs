//! Hyperparameter sweeps with cached results and Pareto-front extraction
//! over (peak memory down, NDCG@10 up).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SequenceDataset;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::memory::BYTES_PER_ELEMENT;
use crate::train::{resolve_loss, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub config_id: String,
    pub loss: String,
    pub s: usize,
    pub l: usize,
    pub params: String,
    /// Measured peak loss-stage bytes (4 bytes/element accounting).
    pub peak_bytes: u64,
    pub seconds: f64,
    pub ndcg10: f64,
    pub metrics: MetricsReport,
    pub epochs_to_best: usize,
    pub seconds_per_epoch: f64,
}

/// Short deterministic id of a config (prefix of the SHA-256 of its JSON).
pub fn config_id(config: &TrainConfig) -> String {
    let body = serde_json::to_string(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(body.as_bytes());
    format!("{:x}", h.finalize())[..16].to_string()
}

fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.peak_bytes <= b.peak_bytes
        && a.ndcg10 >= b.ndcg10
        && (a.peak_bytes < b.peak_bytes || a.ndcg10 > b.ndcg10)
}

/// Indices of the non-dominated points, sorted by memory ascending.
/// Sort-and-sweep implementation.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .peak_bytes
            .cmp(&points[b].peak_bytes)
            .then(points[b].ndcg10.partial_cmp(&points[a].ndcg10).unwrap())
            .then(a.cmp(&b))
    });
    let mut front = Vec::new();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut best_mem = u64::MAX;
    for &i in &order {
        let p = &points[i];
        if p.ndcg10 > best_ndcg {
            best_ndcg = p.ndcg10;
            best_mem = p.peak_bytes;
            front.push(i);
        } else if p.ndcg10 == best_ndcg && p.peak_bytes == best_mem {
            // Exact tie: mutually non-dominated, keep it.
            front.push(i);
        }
    }
    front
}

/// O(n^2) dominance filter; the oracle the sweep output is checked against.
pub fn brute_force_front(points: &[ParetoPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !(0..points.len()).any(|j| j != i && dominates(&points[j], &points[i])))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<ParetoPoint>,
    pub front: Vec<ParetoPoint>,
    /// Config id -> error message for failed runs.
    pub failures: BTreeMap<String, String>,
}

/// Run every config (reusing cached results keyed by config hash), then
/// extract the front. Individual failures are recorded and skipped.
pub fn sweep(
    configs: &[TrainConfig],
    dataset: &SequenceDataset,
    cache_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    if configs.is_empty() {
        return Err(Error::Param("sweep needs at least one config".into()));
    }
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut points = Vec::new();
    let mut failures = BTreeMap::new();
    for config in configs {
        let id = config_id(config);
        let cache_path: Option<PathBuf> = cache_dir.map(|d| d.join(format!("{id}.json")));
        if let Some(path) = &cache_path {
            if path.exists() {
                let cached: ParetoPoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                points.push(cached);
                continue;
            }
        }
        match train(config, dataset) {
            Ok(result) => {
                let resolved = resolve_loss(
                    &config.loss,
                    config.s,
                    config.backbone.max_len,
                    dataset.avg_train_len,
                );
                let point = ParetoPoint {
                    config_id: id.clone(),
                    loss: config.loss.kind().name().to_string(),
                    s: config.s,
                    l: config.backbone.max_len,
                    params: resolved.params_string(),
                    peak_bytes: result.peak_loss_elements * BYTES_PER_ELEMENT,
                    seconds: result.train_seconds,
                    ndcg10: result.test_metrics.ndcg(10),
                    metrics: result.test_metrics.clone(),
                    epochs_to_best: result.epochs_to_best,
                    seconds_per_epoch: result.seconds_per_epoch,
                };
                if let Some(path) = &cache_path {
                    // Atomic commit: write sidecar then rename into place.
                    let tmp = path.with_extension("json.tmp");
                    std::fs::write(&tmp, serde_json::to_string_pretty(&point)?)?;
                    std::fs::rename(&tmp, path)?;
                }
                points.push(point);
            }
            Err(e) => {
                failures.insert(id, e.to_string());
            }
        }
    }
    let front_idx = pareto_front(&points);
    let front = front_idx.iter().map(|&i| points[i].clone()).collect();
    Ok(SweepOutcome { points, front, failures })
}

pub fn results_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from(
        "config_id,loss,s,l,params,peak_bytes,seconds,ndcg@1,ndcg@5,ndcg@10,hr@5,hr@10,cov@1,cov@5,cov@10\n",
    );
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            p.config_id,
            p.loss,
            p.s,
            p.l,
            p.params.replace(',', ";"),
            p.peak_bytes,
            p.seconds,
            p.metrics.ndcg(1),
            p.metrics.ndcg(5),
            p.metrics.ndcg(10),
            p.metrics.hr(5),
            p.metrics.hr(10),
            p.metrics.cov(1),
            p.metrics.cov(5),
            p.metrics.cov(10),
        ));
    }
    out
}
