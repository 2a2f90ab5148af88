//! Triplet-loss training of vertical specialists.
//!
//! `D` is the squared Euclidean distance and the per-triplet loss is the hinge
//! `max{0, α + D(a,p) − D(a,n)}`. Negatives are mined online within each
//! batch, restricted to other products of the anchor's vertical.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_euclidean, Matrix};
use crate::net::{EmbeddingNet, NetConfig};
use crate::optim::Sgd;
use crate::retrieval::{top_k_accuracy, EvalSplit};
use crate::rng::{self, Rng};
use crate::synth::{Dataset, VerticalSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub alpha: f64,
    pub batch_products: usize,
    pub images_per_product: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            alpha: 0.2,
            batch_products: 8,
            images_per_product: 4,
            steps: 2000,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Spec(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.batch_products < 2 || self.images_per_product < 2 {
            return Err(Error::Spec(
                "batches need at least 2 products and 2 images per product".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Spec("checkpoint_every must be at least 1".into()));
        }
        Sgd::new(self.lr, self.momentum).map(|_| ())
    }
}

/// Row indices into one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Squared Euclidean distance.
pub fn distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("distance", x.len(), y.len()));
    }
    Ok(squared_euclidean(x, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

pub fn triplet_loss(fa: &[f64], fp: &[f64], fneg: &[f64], alpha: f64) -> Result<TripletLoss> {
    let d_ap = distance(fa, fp)?;
    let d_an = distance(fa, fneg)?;
    let hinge = alpha + d_ap - d_an;
    let dim = fa.len();
    if hinge <= 0.0 {
        return Ok(TripletLoss {
            loss: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        });
    }
    // ∂/∂a = 2(n − p), ∂/∂p = 2(p − a), ∂/∂n = 2(a − n)
    Ok(TripletLoss {
        loss: hinge,
        grad_anchor: (0..dim).map(|i| 2.0 * (fneg[i] - fp[i])).collect(),
        grad_positive: (0..dim).map(|i| 2.0 * (fp[i] - fa[i])).collect(),
        grad_negative: (0..dim).map(|i| 2.0 * (fa[i] - fneg[i])).collect(),
    })
}

/// Mean hinge loss over `triplets` and its gradient w.r.t. every embedding row.
/// An empty triplet list gives zero loss and a zero gradient.
pub fn batch_triplet_loss(embeddings: &Matrix, triplets: &[Triplet], alpha: f64) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    if triplets.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    for t in triplets {
        let out = triplet_loss(
            embeddings.row(t.anchor),
            embeddings.row(t.positive),
            embeddings.row(t.negative),
            alpha,
        )?;
        if out.loss == 0.0 {
            continue;
        }
        total += out.loss;
        for (row, g) in [
            (t.anchor, &out.grad_anchor),
            (t.positive, &out.grad_positive),
            (t.negative, &out.grad_negative),
        ] {
            for (dst, v) in grad.row_mut(row).iter_mut().zip(g) {
                *dst += scale * v;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Online semi-hard mining over one batch.
///
/// Every ordered anchor/positive pair sharing a product yields one triplet.
/// Its negative (other product, same vertical) is the closest one with
/// `D(a,p) < D(a,n) ≤ D(a,p) + α`; when that band is empty, the farthest
/// eligible negative. Ties go to the lowest row. Pairs without any eligible
/// negative are skipped.
pub fn mine_semi_hard<P: PartialEq, V: PartialEq>(
    embeddings: &Matrix,
    products: &[P],
    verticals: &[V],
    alpha: f64,
) -> Result<Vec<Triplet>> {
    let n = embeddings.rows();
    if products.len() != n || verticals.len() != n {
        return Err(Error::shape(
            "mining labels",
            n,
            format!("{} products, {} verticals", products.len(), verticals.len()),
        ));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_euclidean(embeddings.row(i), embeddings.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut triplets = Vec::new();
    for a in 0..n {
        let negatives: Vec<usize> = (0..n)
            .filter(|&c| products[c] != products[a] && verticals[c] == verticals[a])
            .collect();
        if negatives.is_empty() {
            continue;
        }
        for p in (0..n).filter(|&p| p != a && products[p] == products[a]) {
            let d_ap = dist[a * n + p];
            let mut band: Option<(f64, usize)> = None;
            let mut farthest: Option<(f64, usize)> = None;
            for &c in &negatives {
                let d_an = dist[a * n + c];
                if d_an > d_ap && d_an <= d_ap + alpha && band.is_none_or(|(d, _)| d_an < d) {
                    band = Some((d_an, c));
                }
                if farthest.is_none_or(|(d, _)| d_an > d) {
                    farthest = Some((d_an, c));
                }
            }
            let (_, negative) = band.or(farthest).expect("negatives non-empty");
            triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative,
            });
        }
    }
    Ok(triplets)
}

fn scope_label(scope: &VerticalSet) -> String {
    scope.iter().cloned().collect::<Vec<_>>().join(",")
}

/// Draws `P` distinct products × `K` distinct items from the training
/// (index-split) items of a vertical scope.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    products: Vec<Vec<usize>>,
    batch_products: usize,
    images_per_product: usize,
}

impl BatchSampler {
    pub fn new(
        dataset: &Dataset,
        scope: &VerticalSet,
        batch_products: usize,
        images_per_product: usize,
    ) -> Result<Self> {
        let sampling_error = |message: String| Error::Sampling {
            scope: scope_label(scope),
            message,
        };
        if scope.is_empty() {
            return Err(sampling_error("empty vertical scope".into()));
        }
        let known = dataset.vertical_set();
        if let Some(v) = scope.iter().find(|v| !known.contains(*v)) {
            return Err(sampling_error(format!("vertical `{v}` is not in the dataset")));
        }

        let mut order: Vec<&str> = Vec::new();
        let mut members: std::collections::HashMap<&str, Vec<usize>> = Default::default();
        for &id in &dataset.training_ids() {
            let item = dataset.item(id);
            if !scope.contains(&item.vertical) {
                continue;
            }
            members
                .entry(item.product_id.as_str())
                .or_insert_with(|| {
                    order.push(item.product_id.as_str());
                    Vec::new()
                })
                .push(id);
        }
        let products: Vec<Vec<usize>> = order
            .into_iter()
            .filter_map(|p| members.remove(p))
            .filter(|ids| ids.len() >= images_per_product)
            .collect();
        if products.len() < batch_products {
            return Err(sampling_error(format!(
                "{} products with at least {images_per_product} training items, {batch_products} required",
                products.len()
            )));
        }
        Ok(BatchSampler {
            products,
            batch_products,
            images_per_product,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_products * self.images_per_product
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.batch_size());
        for p in index::sample(rng, self.products.len(), self.batch_products) {
            let items = &self.products[p];
            batch.extend(
                index::sample(rng, items.len(), self.images_per_product)
                    .into_iter()
                    .map(|i| items[i]),
            );
        }
        batch
    }
}

pub fn sample_batch(
    dataset: &Dataset,
    scope: &VerticalSet,
    batch_products: usize,
    images_per_product: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    Ok(BatchSampler::new(dataset, scope, batch_products, images_per_product)?.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub mean_loss: f64,
    pub top1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub checkpoints: Vec<Checkpoint>,
    /// Loss of every step; `None` where nothing was mined.
    pub step_losses: Vec<Option<f64>>,
}

impl TrainHistory {
    /// `step,mean_loss,top1`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_loss,top1\n");
        for c in &self.checkpoints {
            let top1 = c.top1.map(|t| t.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", c.step, c.mean_loss, top1).unwrap();
        }
        out
    }

    pub(crate) fn record(&mut self, loss: Option<f64>) {
        self.step_losses.push(loss);
    }

    /// Closes a checkpoint over the steps since the previous one.
    pub(crate) fn checkpoint(&mut self, top1: Option<f64>) {
        let step = self.step_losses.len();
        let since = self.checkpoints.last().map_or(0, |c| c.step);
        let window: Vec<f64> = self.step_losses[since..step].iter().flatten().copied().collect();
        let mean_loss = if window.is_empty() {
            0.0
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        self.checkpoints.push(Checkpoint { step, mean_loss, top1 });
    }
}

/// Trains a fresh specialist (initialized from `net_config.seed`) on `scope`.
pub fn train_specialist(
    dataset: &Dataset,
    scope: &VerticalSet,
    net_config: &NetConfig,
    config: &TripletConfig,
) -> Result<(EmbeddingNet, TrainHistory)> {
    let net = EmbeddingNet::new(net_config.clone())?;
    train_triplet(net, dataset, scope, config, None)
}

/// Continues triplet training of `net` on `scope`; this is also the
/// fine-tuning entry point. With `eval`, each checkpoint records the mean
/// top-1 over the scope's verticals.
pub fn train_triplet(
    mut net: EmbeddingNet,
    dataset: &Dataset,
    scope: &VerticalSet,
    config: &TripletConfig,
    eval: Option<&EvalSplit>,
) -> Result<(EmbeddingNet, TrainHistory)> {
    config.validate()?;
    if net.config().input_dim != dataset.input_dim() {
        return Err(Error::shape(
            "specialist input dim",
            dataset.input_dim(),
            net.config().input_dim,
        ));
    }
    let sampler = BatchSampler::new(dataset, scope, config.batch_products, config.images_per_product)?;
    let eval = eval.map(|s| s.restricted_to(dataset, scope)).transpose()?;
    let mut rng = rng::seeded(config.seed);
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut history = TrainHistory::default();

    for step in 1..=config.steps {
        let batch = sampler.sample(&mut rng);
        let inputs = dataset.feature_matrix(&batch);
        let products: Vec<&str> = batch.iter().map(|&i| dataset.item(i).product_id.as_str()).collect();
        let verticals: Vec<&str> = batch.iter().map(|&i| dataset.item(i).vertical.as_str()).collect();

        let (emb, cache) = net.forward(&inputs)?;
        let triplets = mine_semi_hard(&emb, &products, &verticals, config.alpha)?;
        if triplets.is_empty() {
            history.record(None);
        } else {
            let (loss, grad) = batch_triplet_loss(&emb, &triplets, config.alpha)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step: Some(step),
                    layer: None,
                    message: "non-finite triplet loss".into(),
                });
            }
            let grads = net.backward(&cache, &grad)?;
            opt.step(&mut net, &grads).map_err(|e| at_step(e, step))?;
            history.record(Some(loss));
        }

        if step % config.checkpoint_every == 0 || step == config.steps {
            let top1 = match &eval {
                Some(split) => Some(
                    top_k_accuracy(&net, dataset, split, &[1])?
                        .mean_accuracy(1)
                        .unwrap_or(0.0),
                ),
                None => None,
            };
            history.checkpoint(top1);
        }
    }
    Ok((net, history))
}

pub(crate) fn at_step(err: Error, step: usize) -> Error {
    match err {
        Error::Training { layer, message, .. } => Error::Training {
            step: Some(step),
            layer,
            message,
        },
        other => other,
    }
}
