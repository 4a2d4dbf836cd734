//! Geometry diagnostics of the shared latent space: cross-modal retrieval and
//! silhouette by modality label.

use std::collections::BTreeMap;
use std::io::Write;

use mga_nn::{dot, norm2};

use crate::encoder::{LatentEmbedding, Source};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub query_mod: usize,
    pub target_mod: usize,
    pub k: usize,
    pub recall: f64,
    pub queries: usize,
    pub pool: usize,
}

impl Retrieval {
    /// Hit rate of a uniformly random ranking, `k / pool`.
    pub fn random_baseline(&self) -> f64 {
        (self.k as f64 / self.pool as f64).min(1.0)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm2(a) * norm2(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn encoded_by_stay(embeddings: &[LatentEmbedding], modality: usize) -> BTreeMap<u64, &[f64]> {
    embeddings
        .iter()
        .filter(|e| e.modality == modality && e.source == Source::Encoded)
        .map(|e| (e.stay_id, e.vector.as_slice()))
        .collect()
}

/// Recall@k of retrieving a stay's `target_mod` embedding from its
/// `query_mod` embedding, among all encoded `target_mod` embeddings.
/// Equal similarities rank in ascending stay-id order.
pub fn recall_at_k(embeddings: &[LatentEmbedding], query_mod: usize, target_mod: usize, k: usize) -> Result<Retrieval> {
    if k == 0 {
        return Err(CoreError::config("recall@k needs k >= 1"));
    }
    let queries = encoded_by_stay(embeddings, query_mod);
    let targets = encoded_by_stay(embeddings, target_mod);
    let eligible: Vec<u64> = queries.keys().filter(|s| targets.contains_key(s)).copied().collect();
    if eligible.len() < 2 {
        return Err(CoreError::data(format!(
            "recall@k for modalities {query_mod}->{target_mod} needs 2 stays holding both, found {}",
            eligible.len()
        )));
    }
    let pool: Vec<(u64, &[f64])> = targets.iter().map(|(&s, &v)| (s, v)).collect();
    let mut hits = 0usize;
    for stay in &eligible {
        let q = queries[stay];
        let own = cosine(q, targets[stay]);
        let mut rank = 0usize;
        for &(other, v) in &pool {
            if other == *stay {
                continue;
            }
            let s = cosine(q, v);
            if s > own || (s == own && other < *stay) {
                rank += 1;
                if rank >= k {
                    break;
                }
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(Retrieval {
        query_mod,
        target_mod,
        k,
        recall: hits as f64 / eligible.len() as f64,
        queries: eligible.len(),
        pool: pool.len(),
    })
}

/// Retrieval for every ordered modality pair where it is defined.
pub fn all_pairs(embeddings: &[LatentEmbedding], n_modalities: usize, ks: &[usize]) -> Result<Vec<Retrieval>> {
    let mut out = Vec::new();
    for q in 0..n_modalities {
        for t in 0..n_modalities {
            if q == t {
                continue;
            }
            for &k in ks {
                match recall_at_k(embeddings, q, t, k) {
                    Ok(r) => out.push(r),
                    Err(CoreError::Data(msg)) => {
                        log::warn!("skipping retrieval pair: {msg}");
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

/// Mean recall and mean random baseline over pairs, for one `k`.
pub fn macro_recall(results: &[Retrieval], k: usize) -> Option<(f64, f64)> {
    let sel: Vec<&Retrieval> = results.iter().filter(|r| r.k == k).collect();
    if sel.is_empty() {
        return None;
    }
    let n = sel.len() as f64;
    Some((
        sel.iter().map(|r| r.recall).sum::<f64>() / n,
        sel.iter().map(|r| r.random_baseline()).sum::<f64>() / n,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Silhouette {
    pub overall: f64,
    pub per_label: BTreeMap<usize, f64>,
}

/// Silhouette with cosine distance; singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<Silhouette> {
    if points.len() != labels.len() {
        return Err(CoreError::data(format!("{} points for {} labels", points.len(), labels.len())));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(CoreError::data("silhouette needs at least two labels"));
    }
    let n = points.len();
    let norms: Vec<f64> = points.iter().map(|p| norm2(p)).collect();
    let mut scores = vec![0.0; n];
    let mut sums = BTreeMap::new();
    for i in 0..n {
        sums.clear();
        for j in 0..n {
            if i == j {
                continue;
            }
            let denom = norms[i] * norms[j];
            let cos = if denom == 0.0 { 0.0 } else { dot(&points[i], &points[j]) / denom };
            *sums.entry(labels[j]).or_insert(0.0) += 1.0 - cos;
        }
        let own = &members[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let a = sums.get(&labels[i]).copied().unwrap_or(0.0) / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(l, m)| sums.get(l).copied().unwrap_or(0.0) / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let d = a.max(b);
        scores[i] = if d > 0.0 { (b - a) / d } else { 0.0 };
    }
    let per_label = members
        .iter()
        .map(|(&l, m)| (l, m.iter().map(|&i| scores[i]).sum::<f64>() / m.len() as f64))
        .collect();
    Ok(Silhouette {
        overall: scores.iter().sum::<f64>() / n as f64,
        per_label,
    })
}

/// Silhouette of embeddings labelled by modality. Missing-token and dropped
/// embeddings are excluded unless `include_tokens`.
pub fn modality_silhouette(embeddings: &[LatentEmbedding], include_tokens: bool) -> Result<Silhouette> {
    let sel: Vec<&LatentEmbedding> = embeddings
        .iter()
        .filter(|e| include_tokens || e.source == Source::Encoded)
        .collect();
    let points: Vec<Vec<f64>> = sel.iter().map(|e| e.vector.clone()).collect();
    let labels: Vec<usize> = sel.iter().map(|e| e.modality).collect();
    silhouette(&points, &labels)
}

/// Retrieval CSV: `metric,query_mod,target_mod,k,value`, including the
/// random baseline and the macro average over pairs.
pub fn write_retrieval_csv<W: Write>(results: &[Retrieval], names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["metric", "query_mod", "target_mod", "k", "value"])?;
    for r in results {
        let (q, t, k) = (&names[r.query_mod], &names[r.target_mod], r.k.to_string());
        wr.write_record(["recall", q, t, &k, &r.recall.to_string()])?;
        wr.write_record(["random_baseline", q, t, &k, &r.random_baseline().to_string()])?;
    }
    let mut ks: Vec<usize> = results.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    for k in ks {
        if let Some((rec, base)) = macro_recall(results, k) {
            wr.write_record(["recall", "macro", "macro", &k.to_string(), &rec.to_string()])?;
            wr.write_record(["random_baseline", "macro", "macro", &k.to_string(), &base.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Silhouette CSV: `silhouette,label,value` with an `overall` row.
pub fn write_silhouette_csv<W: Write>(s: &Silhouette, names: &[String], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["silhouette", "label", "value"])?;
    wr.write_record(["silhouette", "overall", &s.overall.to_string()])?;
    for (l, v) in &s.per_label {
        wr.write_record(["silhouette", &names[*l], &v.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}
