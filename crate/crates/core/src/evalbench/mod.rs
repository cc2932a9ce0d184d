//! Recall@K evaluation, ground truth, synthetic data and experiment drivers.

mod accounting;
mod experiment;
mod synth;

pub use accounting::{account_storage_time, median, time_queries, StorageTime, MIN_TIMING_REPS};
pub use experiment::{
    ablate, build_vocabulary, local_feature_baseline, run_experiment, AblationRow, ExperimentOutput,
    LocalBaselineConfig, RunConfig,
};
pub use synth::{synth_generate, write_synth, SynthDataset, SynthImage, SynthSpec};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{DatasetManifest, Split};
use crate::pipeline::QueryResult;

/// Correct reference ids per query id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub matches: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtMode {
    /// Euclidean distance between manifest positions, inclusive.
    MetricRadius(f64),
    /// Absolute frame index difference, inclusive.
    FrameRadius(u64),
    /// Explicit `(query_id, reference_id)` pairs.
    Pairs(Vec<(String, String)>),
}

pub fn make_gt(manifest: &DatasetManifest, mode: &GtMode) -> Result<GroundTruth> {
    let refs = manifest.entries(Split::Reference);
    let queries = manifest.entries(Split::Query);
    let mut matches: BTreeMap<String, BTreeSet<String>> =
        queries.iter().map(|q| (q.image_id.clone(), BTreeSet::new())).collect();
    match mode {
        GtMode::MetricRadius(r) => {
            if !(r.is_finite() && *r >= 0.0) {
                return Err(Error::GroundTruth(format!("invalid metric radius {r}")));
            }
            let pos = |e: &crate::io::ManifestEntry| {
                e.position.ok_or_else(|| {
                    Error::GroundTruth(format!("{} has no position for metric ground truth", e.image_id))
                })
            };
            let ref_pos: Vec<[f64; 2]> = refs.iter().map(pos).collect::<Result<_>>()?;
            for q in queries {
                let qp = pos(q)?;
                let set = matches.get_mut(&q.image_id).expect("query present");
                for (e, p) in refs.iter().zip(&ref_pos) {
                    if (qp[0] - p[0]).hypot(qp[1] - p[1]) <= *r {
                        set.insert(e.image_id.clone());
                    }
                }
            }
        }
        GtMode::FrameRadius(r) => {
            let frame = |e: &crate::io::ManifestEntry| {
                e.frame_index.ok_or_else(|| {
                    Error::GroundTruth(format!("{} has no frame_index for frame ground truth", e.image_id))
                })
            };
            let ref_frames: Vec<i64> = refs.iter().map(frame).collect::<Result<_>>()?;
            for q in queries {
                let qf = frame(q)?;
                let set = matches.get_mut(&q.image_id).expect("query present");
                for (e, &f) in refs.iter().zip(&ref_frames) {
                    if qf.abs_diff(f) <= *r {
                        set.insert(e.image_id.clone());
                    }
                }
            }
        }
        GtMode::Pairs(pairs) => {
            let ref_ids: HashSet<&str> = refs.iter().map(|e| e.image_id.as_str()).collect();
            for (q, r) in pairs {
                if !ref_ids.contains(r.as_str()) {
                    return Err(Error::GroundTruth(format!("unknown reference id {r:?}")));
                }
                matches
                    .get_mut(q)
                    .ok_or_else(|| Error::GroundTruth(format!("unknown query id {q:?}")))?
                    .insert(r.clone());
            }
        }
    }
    for (q, set) in &matches {
        if set.is_empty() {
            log::warn!("query {q} has no ground-truth reference");
        }
    }
    Ok(GroundTruth { matches })
}

/// Reads `query_id,reference_id` rows (with a header) into pairs.
pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::GroundTruth(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::GroundTruth(format!("{}: {e}", path.display()))))
        .collect()
}

/// Run parameters recorded next to the recall numbers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub order: Option<u32>,
    pub method: Option<String>,
    pub clusters: Option<usize>,
    pub pca_dim: Option<usize>,
    pub iou_threshold: Option<f64>,
    pub k_prime: Option<usize>,
    pub ranking: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// One-based rank of the first correct image.
    pub first_correct_rank: Option<usize>,
    /// Whether the top-K contains a correct image, aligned with `ks`.
    pub hits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub num_queries: usize,
    pub per_query: Vec<QueryOutcome>,
    pub config: ConfigSnapshot,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `k,recall` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "recall"]).map_err(csv_err)?;
        for (k, r) in self.ks.iter().zip(&self.recall) {
            w.write_record([k.to_string(), r.to_string()]).map_err(csv_err)?;
        }
        into_string(w)
    }

    /// One row per query with its first correct rank and per-K hit flags.
    pub fn per_query_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["query_id".to_string(), "first_correct_rank".to_string()];
        header.extend(self.ks.iter().map(|k| format!("hit@{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for q in &self.per_query {
            let mut row = vec![
                q.query_id.clone(),
                q.first_correct_rank.map_or(String::new(), |r| r.to_string()),
            ];
            row.extend(q.hits.iter().map(|h| u8::from(*h).to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        into_string(w)
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>.queries.csv`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (ext, body) in [
            ("json", self.to_json()?),
            ("csv", self.to_csv()?),
            ("queries.csv", self.per_query_csv()?),
        ] {
            let path = stem.with_extension(ext);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Malformed(format!("csv: {e}"))
}

pub(crate) fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Malformed(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
}

/// Fraction of queries whose top-K holds at least one correct image.
pub fn recall_at_k(
    results: &[QueryResult],
    gt: &GroundTruth,
    ks: &[usize],
    config: ConfigSnapshot,
) -> Result<RecallReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("Ks must be nonempty and positive".into()));
    }
    let mut per_query = Vec::with_capacity(results.len());
    let mut counts = vec![0usize; ks.len()];
    for r in results {
        let correct = gt
            .matches
            .get(&r.query_id)
            .ok_or_else(|| Error::GroundTruth(format!("query {} missing from ground truth", r.query_id)))?;
        let first = r
            .ranking
            .entries
            .iter()
            .position(|e| correct.contains(&e.image_id))
            .map(|p| p + 1);
        let hits: Vec<bool> = ks.iter().map(|&k| first.is_some_and(|f| f <= k)).collect();
        for (c, &h) in counts.iter_mut().zip(&hits) {
            *c += usize::from(h);
        }
        per_query.push(QueryOutcome {
            query_id: r.query_id.clone(),
            first_correct_rank: first,
            hits,
        });
    }
    let n = results.len();
    Ok(RecallReport {
        ks: ks.to_vec(),
        recall: counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        num_queries: n,
        per_query,
        config,
    })
}
