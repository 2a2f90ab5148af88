//! Brute-force references shared by the oracle and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use uniembed::linalg::squared_euclidean;
use uniembed::{Dataset, Embedder, EmbeddingNet, EvalSplit, Matrix, RetrievalReport, Triplet};

/// Row-at-a-time forward pass with explicit loops.
pub fn naive_forward(net: &EmbeddingNet, inputs: &Matrix) -> Vec<Vec<f64>> {
    let cfg = net.config();
    let last = net.layers().len() - 1;
    inputs
        .row_iter()
        .map(|x| {
            let mut h = x.to_vec();
            for (l, layer) in net.layers().iter().enumerate() {
                let mut z = vec![0.0; layer.out_dim()];
                for (o, zo) in z.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (i, hi) in h.iter().enumerate() {
                        acc += layer.weight.get(o, i) * hi;
                    }
                    *zo = acc;
                }
                if l < last || cfg.activate_output {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                h = z;
            }
            if cfg.normalize_output {
                let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm >= 1e-12 {
                    h.iter_mut().for_each(|v| *v /= norm);
                }
            }
            h
        })
        .collect()
}

/// Enumerates every anchor/positive pair and every candidate negative.
pub fn brute_force_mine(emb: &Matrix, products: &[usize], verticals: &[usize], alpha: f64) -> Vec<Triplet> {
    let n = emb.rows();
    let d = |i: usize, j: usize| squared_euclidean(emb.row(i), emb.row(j));
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || products[p] != products[a] {
                continue;
            }
            let mut candidates: Vec<(f64, usize)> = (0..n)
                .filter(|&c| products[c] != products[a] && verticals[c] == verticals[a])
                .map(|c| (d(a, c), c))
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let d_ap = d(a, p);
            let mut semi: Vec<(f64, usize)> = candidates
                .iter()
                .copied()
                .filter(|&(dn, _)| dn > d_ap && dn <= d_ap + alpha)
                .collect();
            let negative = if !semi.is_empty() {
                semi.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                semi[0].1
            } else {
                candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                candidates[0].1
            };
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    out
}

/// Snaps another embedder's output to a coarse grid, producing distance ties.
pub struct Quantized<'a>(pub &'a EmbeddingNet, pub f64);

impl Embedder for Quantized<'_> {
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn embedding_dim(&self) -> usize {
        self.0.embedding_dim()
    }
    fn embed(&self, inputs: &Matrix) -> uniembed::Result<Matrix> {
        let mut m = self.0.embed(inputs)?;
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = (*v / self.1).round() * self.1);
        Ok(m)
    }
}

/// Sorts the full distance matrix and scans the first k entries per query.
pub fn brute_force_top_k(
    model: &dyn Embedder,
    ds: &Dataset,
    split: &EvalSplit,
    ks: &[usize],
) -> Vec<(String, usize, f64, usize)> {
    let embed = |id: usize| {
        model
            .embed(&Matrix::from_rows(&[ds.features(id)]).unwrap())
            .unwrap()
            .row(0)
            .to_vec()
    };
    let index: Vec<(usize, Vec<f64>)> = split.index().iter().map(|&i| (i, embed(i))).collect();
    let mut per_vertical: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for &q in split.queries() {
        let fq = embed(q);
        let mut ranked: Vec<(f64, usize)> = index.iter().map(|(id, e)| (squared_euclidean(&fq, e), *id)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let entry = per_vertical
            .entry(ds.item(q).vertical.clone())
            .or_insert_with(|| (0, vec![0; ks.len()]));
        entry.0 += 1;
        for (slot, &k) in ks.iter().enumerate() {
            if ranked
                .iter()
                .take(k)
                .any(|(_, id)| ds.item(*id).product_id == ds.item(q).product_id)
            {
                entry.1[slot] += 1;
            }
        }
    }
    per_vertical
        .into_iter()
        .flat_map(|(v, (n, hits))| {
            ks.iter()
                .zip(hits)
                .map(move |(&k, h)| (v.clone(), k, h as f64 / n as f64, n))
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn flatten(report: &RetrievalReport) -> Vec<(String, usize, f64, usize)> {
    report
        .verticals
        .iter()
        .flat_map(|(v, acc)| {
            acc.accuracy
                .iter()
                .map(move |a| (v.clone(), a.k, a.accuracy, acc.n_queries))
        })
        .collect()
}

/// Per-sample silhouette straight from its definition.
pub fn brute_force_silhouette(groups: &[(String, Matrix)]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| squared_euclidean(a, b).sqrt();
    let mut total = 0.0;
    let mut count = 0;
    for (ci, (_, mi)) in groups.iter().enumerate() {
        for r in 0..mi.rows() {
            let x = mi.row(r);
            let mut own = 0.0;
            for s in 0..mi.rows() {
                if s != r {
                    own += dist(x, mi.row(s));
                }
            }
            let a = own / (mi.rows() - 1) as f64;
            let mut b = f64::INFINITY;
            for (cj, (_, mj)) in groups.iter().enumerate() {
                if cj != ci {
                    let mut sum = 0.0;
                    for y in mj.row_iter() {
                        sum += dist(x, y);
                    }
                    b = b.min(sum / mj.rows() as f64);
                }
            }
            total += if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
            count += 1;
        }
    }
    total / count as f64
}
