use serde::{Deserialize, Serialize};

use crate::aggregate::DescriptorSet;
use crate::error::Result;
use crate::pipeline::run_queries;
use crate::retrieval::{FlatIndex, RankingMethod};

pub const MIN_TIMING_REPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageTime {
    pub descriptor_count: usize,
    pub dim: usize,
    /// `descriptor_count · dim · 4`.
    pub payload_bytes: u64,
    /// Size of the provenance JSON written next to the index.
    pub provenance_bytes: u64,
    pub total_bytes: u64,
    /// Mean over queries of each query's median search-and-rank time.
    pub mean_query_ms: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-query median time over at least [`MIN_TIMING_REPS`] repetitions.
pub fn time_queries(
    index: &FlatIndex,
    queries: &DescriptorSet,
    query_ids: &[String],
    k_prime: usize,
    ranking: RankingMethod,
    reps: usize,
) -> Result<Vec<f64>> {
    let reps = reps.max(MIN_TIMING_REPS);
    let mut samples = vec![Vec::with_capacity(reps); query_ids.len()];
    for _ in 0..reps {
        for (s, r) in samples
            .iter_mut()
            .zip(run_queries(index, queries, query_ids, k_prime, ranking)?)
        {
            s.push(r.elapsed_ms);
        }
    }
    Ok(samples.iter().map(|s| median(s)).collect())
}

pub fn account_storage_time(index: &FlatIndex, per_query_ms: &[f64]) -> Result<StorageTime> {
    let payload_bytes = (index.len() * index.dim() * 4) as u64;
    let provenance_bytes = if index.is_empty() {
        0
    } else {
        index.provenance_json()?.len() as u64
    };
    let mean_query_ms = if per_query_ms.is_empty() {
        0.0
    } else {
        per_query_ms.iter().sum::<f64>() / per_query_ms.len() as f64
    };
    Ok(StorageTime {
        descriptor_count: index.len(),
        dim: index.dim(),
        payload_bytes,
        provenance_bytes,
        total_bytes: payload_bytes + provenance_bytes,
        mean_query_ms,
    })
}
