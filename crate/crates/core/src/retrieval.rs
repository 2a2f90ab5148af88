//! Exact nearest-neighbor retrieval and top-k accuracy.
//!
//! Rankings order index items by ascending squared Euclidean distance with
//! exact ties broken by ascending item id, so results never depend on the
//! order in which the index is stored.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean, Matrix};
use crate::net::Embedder;
use crate::synth::{Dataset, Split, VerticalSet};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Query items probed against index items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    queries: Vec<usize>,
    index: Vec<usize>,
}

impl EvalSplit {
    pub fn new(queries: Vec<usize>, index: Vec<usize>) -> Result<Self> {
        if queries.is_empty() || index.is_empty() {
            return Err(Error::Usage("evaluation split needs queries and index items".into()));
        }
        let idx: BTreeSet<usize> = index.iter().copied().collect();
        if let Some(q) = queries.iter().find(|q| idx.contains(q)) {
            return Err(Error::Usage(format!("item {q} is both query and index")));
        }
        Ok(EvalSplit { queries, index })
    }

    /// Uses each item's stored split.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        EvalSplit::new(
            dataset.ids_where(|it| it.split == Split::Query),
            dataset.ids_where(|it| it.split == Split::Index),
        )
    }

    /// Keeps only queries and index items of the given verticals.
    pub fn restricted_to(&self, dataset: &Dataset, verticals: &VerticalSet) -> Result<Self> {
        let keep = |ids: &[usize]| -> Vec<usize> {
            ids.iter()
                .copied()
                .filter(|&i| verticals.contains(&dataset.item(i).vertical))
                .collect()
        };
        EvalSplit::new(keep(&self.queries), keep(&self.index))
    }

    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }
}

#[inline]
fn rank_order(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest index ids, nearest first. Returns the whole ranked index
/// when `k` exceeds its size.
pub fn knn(query: &[f64], index: &[(usize, &[f64])], k: usize) -> Result<Vec<usize>> {
    if index.is_empty() {
        return Err(Error::Usage("knn over an empty index".into()));
    }
    if k == 0 {
        return Err(Error::Usage("knn needs k >= 1".into()));
    }
    let mut scored = Vec::with_capacity(index.len());
    for &(id, emb) in index {
        if emb.len() != query.len() {
            return Err(Error::shape("knn embedding", query.len(), emb.len()));
        }
        scored.push((squared_euclidean(query, emb), id));
    }
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank_order(*a, *b));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KAccuracy {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerticalAccuracy {
    pub n_queries: usize,
    pub accuracy: Vec<KAccuracy>,
}

/// Per-vertical top-k accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub format_version: u32,
    pub ks: Vec<usize>,
    pub verticals: BTreeMap<String, VerticalAccuracy>,
}

impl RetrievalReport {
    pub fn accuracy(&self, vertical: &str, k: usize) -> Option<f64> {
        self.verticals
            .get(vertical)?
            .accuracy
            .iter()
            .find(|a| a.k == k)
            .map(|a| a.accuracy)
    }

    pub fn top1(&self, vertical: &str) -> Option<f64> {
        self.accuracy(vertical, 1)
    }

    /// Unweighted mean over verticals.
    pub fn mean_accuracy(&self, k: usize) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.verticals.keys().map(|v| self.accuracy(v, k)).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RetrievalReport = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Version {
                found: report.format_version.to_string(),
                expected: REPORT_FORMAT_VERSION,
            });
        }
        Ok(report)
    }

    /// `vertical,k,accuracy,n_queries` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("vertical,k,accuracy,n_queries\n");
        for (v, acc) in &self.verticals {
            for a in &acc.accuracy {
                out.push_str(&format!("{v},{},{},{}\n", a.k, a.accuracy, acc.n_queries));
            }
        }
        out
    }
}

/// Evaluates `model` on `split`; the index pool spans every vertical present
/// in the split, so cross-vertical confusions count as misses.
pub fn top_k_accuracy<M: Embedder + ?Sized>(
    model: &M,
    dataset: &Dataset,
    split: &EvalSplit,
    ks: &[usize],
) -> Result<RetrievalReport> {
    top_k_accuracy_threaded(model, dataset, split, ks, 1)
}

pub fn top_k_accuracy_threaded<M: Embedder + ?Sized>(
    model: &M,
    dataset: &Dataset,
    split: &EvalSplit,
    ks: &[usize],
    threads: usize,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("ks must be non-empty and each k >= 1".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let query_emb = model.embed(&dataset.feature_matrix(split.queries()))?;
    let index_emb = model.embed(&dataset.feature_matrix(split.index()))?;
    let hit_ranks = first_hit_ranks(dataset, split, &query_emb, &index_emb, threads.max(1));

    let mut tallies: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for (&q, rank) in split.queries().iter().zip(hit_ranks) {
        let entry = tallies
            .entry(dataset.item(q).vertical.clone())
            .or_insert_with(|| (0, vec![0; ks.len()]));
        entry.0 += 1;
        if let Some(r) = rank {
            for (hits, &k) in entry.1.iter_mut().zip(&ks) {
                if r < k {
                    *hits += 1;
                }
            }
        }
    }
    let verticals = tallies
        .into_iter()
        .map(|(v, (n, hits))| {
            let accuracy = ks
                .iter()
                .zip(hits)
                .map(|(&k, h)| KAccuracy {
                    k,
                    accuracy: h as f64 / n as f64,
                })
                .collect();
            (v, VerticalAccuracy { n_queries: n, accuracy })
        })
        .collect();
    Ok(RetrievalReport {
        format_version: REPORT_FORMAT_VERSION,
        ks,
        verticals,
    })
}

/// For each query, the 0-based rank of its best-ranked same-product index
/// item (`None` when its product is not indexed).
fn first_hit_ranks(
    dataset: &Dataset,
    split: &EvalSplit,
    query_emb: &Matrix,
    index_emb: &Matrix,
    threads: usize,
) -> Vec<Option<usize>> {
    let mut product_codes: HashMap<&str, usize> = HashMap::new();
    let mut code = |id: usize| {
        let next = product_codes.len();
        *product_codes
            .entry(dataset.item(id).product_id.as_str())
            .or_insert(next)
    };
    let index_products: Vec<usize> = split.index().iter().map(|&i| code(i)).collect();
    let query_products: Vec<usize> = split.queries().iter().map(|&q| code(q)).collect();
    let index_ids = split.index();

    let rank_one = |qi: usize| -> Option<usize> {
        let q = query_emb.row(qi);
        let dists: Vec<f64> = index_emb.row_iter().map(|e| squared_euclidean(q, e)).collect();
        let best = (0..index_ids.len())
            .filter(|&j| index_products[j] == query_products[qi])
            .map(|j| (dists[j], index_ids[j]))
            .min_by(|a, b| rank_order(*a, *b))?;
        Some(
            dists
                .iter()
                .zip(index_ids)
                .filter(|(d, id)| rank_order((**d, **id), best) == Ordering::Less)
                .count(),
        )
    };

    let n = split.queries().len();
    if threads <= 1 || n < 2 * threads {
        return (0..n).map(rank_one).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let rank_one = &rank_one;
                s.spawn(move || (start..(start + chunk).min(n)).map(rank_one).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("retrieval worker panicked"))
            .collect()
    })
}

/// Elementwise `a − b` per vertical and k, plus the mean delta per k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub format_version: u32,
    pub ks: Vec<usize>,
    pub deltas: BTreeMap<String, Vec<f64>>,
    pub mean_delta: Vec<f64>,
}

pub fn compare_reports(a: &RetrievalReport, b: &RetrievalReport) -> Result<ReportComparison> {
    if a.ks != b.ks {
        return Err(Error::Comparison(format!("k lists differ: {:?} vs {:?}", a.ks, b.ks)));
    }
    let va: Vec<&String> = a.verticals.keys().collect();
    let vb: Vec<&String> = b.verticals.keys().collect();
    if va != vb {
        return Err(Error::Comparison(format!("vertical sets differ: {va:?} vs {vb:?}")));
    }
    let mut deltas = BTreeMap::new();
    for (v, acc_a) in &a.verticals {
        let acc_b = &b.verticals[v];
        let row = acc_a
            .accuracy
            .iter()
            .zip(&acc_b.accuracy)
            .map(|(x, y)| x.accuracy - y.accuracy)
            .collect();
        deltas.insert(v.clone(), row);
    }
    let n = deltas.len().max(1) as f64;
    let mean_delta = (0..a.ks.len())
        .map(|j| deltas.values().map(|row: &Vec<f64>| row[j]).sum::<f64>() / n)
        .collect();
    Ok(ReportComparison {
        format_version: REPORT_FORMAT_VERSION,
        ks: a.ks.clone(),
        deltas,
        mean_delta,
    })
}
