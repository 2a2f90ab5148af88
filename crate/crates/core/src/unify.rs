//! Unifying specialists: greedy combination of vertical training data, and
//! distillation of a specialist registry into one model by L2 regression
//! onto the specialists' embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model_io::push_real17;
use crate::net::{Embedder, EmbeddingNet, NetConfig};
use crate::optim::Sgd;
use crate::retrieval::{top_k_accuracy, EvalSplit};
use crate::rng;
use crate::synth::{Dataset, VerticalSet};
use crate::triplet::{at_step, train_specialist, TrainHistory, TripletConfig};

pub const UNIFY_FORMAT_VERSION: u32 = 1;

/// Disjoint, non-empty vertical groups covering a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    groups: Vec<Vec<String>>,
}

impl VerticalPartition {
    pub fn new(groups: Vec<Vec<String>>, verticals: &VerticalSet) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (i, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Spec(format!("partition group {i} is empty")));
            }
            for v in g {
                if !seen.insert(v.clone()) {
                    return Err(Error::Spec(format!("vertical `{v}` appears in two groups")));
                }
            }
        }
        if &seen != verticals {
            let missing: Vec<_> = verticals.difference(&seen).collect();
            let extra: Vec<_> = seen.difference(verticals).collect();
            return Err(Error::Spec(format!(
                "partition does not cover the verticals (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(VerticalPartition { groups })
    }

    /// One group per vertical, in dataset order.
    pub fn singletons(dataset: &Dataset) -> Self {
        VerticalPartition {
            groups: dataset.verticals().into_iter().map(|v| vec![v]).collect(),
        }
    }

    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    pub fn group_sets(&self) -> Vec<VerticalSet> {
        self.groups.iter().map(|g| g.iter().cloned().collect()).collect()
    }

    pub fn group_of(&self, vertical: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.iter().any(|v| v == vertical))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "format_version": UNIFY_FORMAT_VERSION,
            "groups": self.groups,
        });
        serde_json::to_string_pretty(&doc).expect("partition serializes") + "\n"
    }

    pub fn from_json(text: &str, verticals: &VerticalSet) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format_version: u32,
            groups: Vec<Vec<String>>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if doc.format_version != UNIFY_FORMAT_VERSION {
            return Err(Error::Version {
                found: doc.format_version.to_string(),
                expected: UNIFY_FORMAT_VERSION,
            });
        }
        VerticalPartition::new(doc.groups, verticals)
    }
}

/// Trained models `M_i`, one per vertical group `V_i`.
#[derive(Clone, Debug)]
pub struct SpecialistRegistry<M = EmbeddingNet> {
    entries: Vec<(VerticalSet, M)>,
}

impl<M: Embedder> SpecialistRegistry<M> {
    pub fn new(entries: Vec<(VerticalSet, M)>) -> Result<Self> {
        let Some(dim) = entries.first().map(|(_, m)| m.embedding_dim()) else {
            return Err(Error::Spec("registry needs at least one specialist".into()));
        };
        let mut seen = BTreeSet::new();
        for (group, model) in &entries {
            if group.is_empty() {
                return Err(Error::Spec("registry group is empty".into()));
            }
            if let Some(v) = group.iter().find(|v| !seen.insert((*v).clone())) {
                return Err(Error::Spec(format!("vertical `{v}` registered twice")));
            }
            if model.embedding_dim() != dim {
                return Err(Error::shape("registry embedding dims", dim, model.embedding_dim()));
            }
        }
        Ok(SpecialistRegistry { entries })
    }

    pub fn entries(&self) -> &[(VerticalSet, M)] {
        &self.entries
    }

    pub fn embedding_dim(&self) -> usize {
        self.entries[0].1.embedding_dim()
    }

    pub fn route(&self, vertical: &str) -> Option<usize> {
        self.entries.iter().position(|(g, _)| g.contains(vertical))
    }
}

/// Distillation targets `f_sj`, keyed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEmbeddingSet {
    dim: usize,
    targets: BTreeMap<usize, Vec<f64>>,
}

impl TargetEmbeddingSet {
    pub fn new(dim: usize, targets: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        if let Some((id, t)) = targets.iter().find(|(_, t)| t.len() != dim) {
            return Err(Error::shape("target length", dim, format!("{} for item {id}", t.len())));
        }
        Ok(TargetEmbeddingSet { dim, targets })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, item: usize) -> Option<&[f64]> {
        self.targets.get(&item).map(Vec::as_slice)
    }

    pub fn item_ids(&self) -> Vec<usize> {
        self.targets.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.targets.iter().map(|(&id, t)| (id, t.as_slice()))
    }

    /// Order-sensitive hash of every id and value bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for (&id, t) in &self.targets {
            for bits in std::iter::once(id as u64).chain(t.iter().map(|v| v.to_bits())) {
                h = (h ^ bits).wrapping_mul(0x1000_0000_01b3).rotate_left(7);
            }
        }
        h
    }

    /// Rows of `item_id` followed by the target reals (17 significant digits).
    pub fn to_csv(&self) -> String {
        let mut out = format!("# uniembed-targets v1 dim={}\nitem_id", self.dim);
        for j in 0..self.dim {
            write!(out, ",t{j}").unwrap();
        }
        out.push('\n');
        for (id, t) in &self.targets {
            write!(out, "{id}").unwrap();
            for &v in t {
                out.push(',');
                push_real17(&mut out, v);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let dim = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# uniembed-targets v1 dim="))
            .and_then(|d| d.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format("missing `# uniembed-targets v1 dim=` line".into()))?;
        match lines.next() {
            Some((_, h)) if h.split(',').count() == dim + 1 && h.starts_with("item_id") => {}
            _ => return Err(Error::Format("bad targets header".into())),
        }
        let mut targets = BTreeMap::new();
        for (line, row) in lines.filter(|(_, l)| !l.is_empty()) {
            let err = |message: String| Error::Parse { line, message };
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(err(format!("expected {} columns, found {}", dim + 1, fields.len())));
            }
            let id: usize = fields[0]
                .parse()
                .map_err(|_| err(format!("bad item_id `{}`", fields[0])))?;
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(format!("bad value `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if targets.insert(id, values).is_some() {
                return Err(err(format!("duplicate item {id}")));
            }
        }
        TargetEmbeddingSet::new(dim, targets)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TargetEmbeddingSet::from_csv(&text)
    }
}

/// Embeds each item with the specialist of its vertical's group, and only that one.
pub fn compute_targets<M: Embedder>(
    registry: &SpecialistRegistry<M>,
    dataset: &Dataset,
    items: &[usize],
) -> Result<TargetEmbeddingSet> {
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); registry.entries().len()];
    for &id in items {
        let vertical = &dataset.item(id).vertical;
        let slot = registry.route(vertical).ok_or_else(|| Error::Routing {
            vertical: vertical.clone(),
            message: "has no registered specialist".into(),
        })?;
        routed[slot].push(id);
    }
    let mut targets = BTreeMap::new();
    for (ids, (_, model)) in routed.iter().zip(registry.entries()) {
        if ids.is_empty() {
            continue;
        }
        let emb = model.embed(&dataset.feature_matrix(ids))?;
        for (r, &id) in ids.iter().enumerate() {
            targets.insert(id, emb.row(r).to_vec());
        }
    }
    TargetEmbeddingSet::new(registry.embedding_dim(), targets)
}

/// `L = Σ_j ‖f_uj − f_sj‖²` and `∂L/∂f_u = 2(f_u − f_s)`; targets are constants.
pub fn distill_loss(unified: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if unified.shape() != targets.shape() {
        return Err(Error::shape(
            "distill_loss",
            format!("{:?}", targets.shape()),
            format!("{:?}", unified.shape()),
        ));
    }
    let mut grad = Matrix::zeros(unified.rows(), unified.cols());
    let mut loss = 0.0;
    for ((g, u), s) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(unified.as_slice())
        .zip(targets.as_slice())
    {
        let d = u - s;
        loss += d * d;
        *g = 2.0 * d;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 4000,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

/// Regresses a fresh unified model onto `targets` with shuffled mini-batches
/// drawn over all target items. Product labels are never consulted. Each step
/// minimizes the batch mean of `‖f_u − f_s‖²`, which is what the history records.
pub fn train_unified(
    dataset: &Dataset,
    targets: &TargetEmbeddingSet,
    net_config: &NetConfig,
    config: &DistillConfig,
) -> Result<(EmbeddingNet, TrainHistory)> {
    if config.batch_size == 0 || config.checkpoint_every == 0 {
        return Err(Error::Spec("batch_size and checkpoint_every must be at least 1".into()));
    }
    if net_config.embedding_dim != targets.dim() {
        return Err(Error::shape(
            "unified embedding dim",
            targets.dim(),
            net_config.embedding_dim,
        ));
    }
    if net_config.input_dim != dataset.input_dim() {
        return Err(Error::shape(
            "unified input dim",
            dataset.input_dim(),
            net_config.input_dim,
        ));
    }
    let mut net = EmbeddingNet::new(net_config.clone())?;
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut rng = rng::seeded(config.seed);
    let mut history = TrainHistory::default();
    let mut order = targets.item_ids();
    if config.steps > 0 && order.is_empty() {
        return Err(Error::Usage("no distillation targets".into()));
    }
    if let Some(&id) = order.iter().find(|&&id| id >= dataset.len()) {
        return Err(Error::Routing {
            vertical: "?".into(),
            message: format!("target item {id} is not in the dataset"),
        });
    }
    let mut cursor = order.len();
    let batch_size = config.batch_size.min(order.len().max(1));

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut want = Vec::with_capacity(batch.len() * targets.dim());
        for &id in &batch {
            want.extend_from_slice(targets.get(id).expect("ids come from targets"));
        }
        let want = Matrix::from_vec(batch.len(), targets.dim(), want)?;

        let (emb, cache) = net.forward(&dataset.feature_matrix(&batch))?;
        let (loss, mut grad) = distill_loss(&emb, &want)?;
        let scale = 1.0 / batch.len() as f64;
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: Some(step),
                layer: None,
                message: "non-finite distillation loss".into(),
            });
        }
        grad.scale(scale);
        let grads = net.backward(&cache, &grad)?;
        opt.step(&mut net, &grads).map_err(|e| at_step(e, step))?;
        history.record(Some(loss));
        if step % config.checkpoint_every == 0 || step == config.steps {
            history.checkpoint(None);
        }
    }
    Ok((net, history))
}

/// Mean over target items of `‖f_u − f_s‖²`.
pub fn mean_target_distance<M: Embedder + ?Sized>(
    model: &M,
    dataset: &Dataset,
    targets: &TargetEmbeddingSet,
) -> Result<f64> {
    let ids = targets.item_ids();
    if ids.is_empty() {
        return Ok(0.0);
    }
    let emb = model.embed(&dataset.feature_matrix(&ids))?;
    let total: f64 = ids
        .iter()
        .enumerate()
        .map(|(r, &id)| crate::linalg::squared_euclidean(emb.row(r), targets.get(id).unwrap()))
        .sum();
    Ok(total / ids.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineStep {
    /// Group members before the candidate was tried.
    pub group: Vec<String>,
    pub candidate: String,
    pub accepted: bool,
    /// Top-1 per vertical with the current group model (candidate: its own model).
    pub before: BTreeMap<String, f64>,
    /// Top-1 per vertical with the tentative model.
    pub after: BTreeMap<String, f64>,
    /// Largest drop below an individually trained model, in top-1 points.
    pub degradation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineReport {
    pub format_version: u32,
    pub epsilon: f64,
    /// Top-1 of each vertical's individually trained model.
    pub baselines: BTreeMap<String, f64>,
    pub steps: Vec<CombineStep>,
}

impl CombineReport {
    pub fn to_json(&self) -> String {
        // serde_json refuses infinities; the threshold is recorded as null then.
        let mut doc = serde_json::to_value(self).expect("report serializes");
        if !self.epsilon.is_finite() {
            doc["epsilon"] = serde_json::Value::Null;
        }
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }
}

/// Verticals by descending training-set size, ties in dataset order.
pub fn default_vertical_order(dataset: &Dataset) -> Vec<String> {
    let train = dataset.training_ids();
    let mut order: Vec<(usize, String)> = dataset
        .verticals()
        .into_iter()
        .map(|v| (train.iter().filter(|&&i| dataset.item(i).vertical == v).count(), v))
        .collect();
    order.sort_by_key(|(n, _)| std::cmp::Reverse(*n));
    order.into_iter().map(|(_, v)| v).collect()
}

/// Greedy grouping driven by an arbitrary evaluator that trains a model on a
/// vertical set and returns top-1 (in `[0, 1]`) for each member vertical.
///
/// A group opens with the first uncovered vertical and tries every later
/// uncovered vertical in order. A candidate joins when no member of the
/// tentative group falls more than `epsilon` points below its individually
/// trained baseline; rejected candidates stay available for later groups.
/// The evaluator is called at most once per distinct vertical set.
pub fn greedy_combine_with<F>(
    order: &[String],
    epsilon: f64,
    mut evaluate: F,
) -> Result<(VerticalPartition, CombineReport)>
where
    F: FnMut(&VerticalSet) -> Result<BTreeMap<String, f64>>,
{
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Spec(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let all: VerticalSet = order.iter().cloned().collect();
    if all.len() != order.len() || order.is_empty() {
        return Err(Error::Spec(
            "vertical order must list each vertical exactly once".into(),
        ));
    }

    let mut cache: BTreeMap<VerticalSet, BTreeMap<String, f64>> = BTreeMap::new();
    let mut eval = |set: &VerticalSet| -> Result<BTreeMap<String, f64>> {
        if let Some(hit) = cache.get(set) {
            return Ok(hit.clone());
        }
        let scores = evaluate(set)?;
        if let Some(v) = set.iter().find(|v| !scores.contains_key(*v)) {
            return Err(Error::Usage(format!("evaluator returned no score for `{v}`")));
        }
        cache.insert(set.clone(), scores.clone());
        Ok(scores)
    };

    let mut baselines = BTreeMap::new();
    if order.len() > 1 {
        for v in order {
            let single: VerticalSet = std::iter::once(v.clone()).collect();
            baselines.insert(v.clone(), eval(&single)?[v]);
        }
    }

    let mut uncovered: Vec<String> = order.to_vec();
    let mut groups = Vec::new();
    let mut steps = Vec::new();
    while !uncovered.is_empty() {
        let seed = uncovered.remove(0);
        let mut group = vec![seed];
        let mut rejected = Vec::new();
        for candidate in std::mem::take(&mut uncovered) {
            let current: VerticalSet = group.iter().cloned().collect();
            let mut tentative = current.clone();
            tentative.insert(candidate.clone());

            let mut before = eval(&current)?;
            before.insert(candidate.clone(), baselines[&candidate]);
            let after = eval(&tentative)?;
            let degradation = tentative
                .iter()
                .map(|v| (baselines[v] - after[v]) * 100.0)
                .fold(f64::NEG_INFINITY, f64::max);
            let accepted = degradation <= epsilon;
            steps.push(CombineStep {
                group: group.clone(),
                candidate: candidate.clone(),
                accepted,
                before,
                after: tentative.iter().map(|v| (v.clone(), after[v])).collect(),
                degradation,
            });
            if accepted {
                group.push(candidate);
            } else {
                rejected.push(candidate);
            }
        }
        uncovered = rejected;
        groups.push(group);
    }

    let partition = VerticalPartition::new(groups, &all)?;
    Ok((
        partition,
        CombineReport {
            format_version: UNIFY_FORMAT_VERSION,
            epsilon,
            baselines,
            steps,
        },
    ))
}

/// Greedy combination with triplet-trained specialists. Each vertical set is
/// trained from the same seeds and scored by top-1 on `split` restricted to
/// that set.
pub fn greedy_combine(
    dataset: &Dataset,
    order: &[String],
    epsilon: f64,
    net_config: &NetConfig,
    triplet_config: &TripletConfig,
    split: &EvalSplit,
) -> Result<(VerticalPartition, CombineReport)> {
    let known = dataset.vertical_set();
    let listed: VerticalSet = order.iter().cloned().collect();
    if listed != known || order.len() != known.len() {
        return Err(Error::Spec(
            "vertical order must be a permutation of the dataset's verticals".into(),
        ));
    }
    greedy_combine_with(order, epsilon, |set| {
        group_top1(dataset, set, net_config, triplet_config, split)
    })
}

/// Trains one specialist on `set` and reports top-1 for each member vertical.
pub fn group_top1(
    dataset: &Dataset,
    set: &VerticalSet,
    net_config: &NetConfig,
    triplet_config: &TripletConfig,
    split: &EvalSplit,
) -> Result<BTreeMap<String, f64>> {
    let (model, _) = train_specialist(dataset, set, net_config, triplet_config)?;
    let report = top_k_accuracy(&model, dataset, &split.restricted_to(dataset, set)?, &[1])?;
    Ok(set.iter().map(|v| (v.clone(), report.top1(v).unwrap_or(0.0))).collect())
}
