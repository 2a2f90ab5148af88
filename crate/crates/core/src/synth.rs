//! Labeled multi-vertical datasets: the item model, a seeded hierarchical
//! Gaussian generator, label-noise injection and the CSV file format.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Rng};

pub type VerticalSet = BTreeSet<String>;

pub const DATASET_MAGIC: &str = "# uniembed-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Index,
    Query,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Index => "index",
            Split::Query => "query",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "index" => Ok(Split::Index),
            "query" => Ok(Split::Query),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub item_id: usize,
    pub vertical: String,
    pub product_id: String,
    pub split: Split,
    pub features: Vec<f64>,
}

#[derive(Debug)]
struct AccessLog(Vec<AtomicU64>);

/// A set of items with dense ids `0..N`.
///
/// Feature reads go through [`Dataset::features`]; when access tracking is on,
/// every read is counted per item.
#[derive(Clone, Debug)]
pub struct Dataset {
    input_dim: usize,
    items: Vec<Item>,
    access: Option<Arc<AccessLog>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim && self.items == other.items
    }
}

impl Dataset {
    pub fn new(input_dim: usize, items: Vec<Item>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Spec("input_dim must be at least 1".into()));
        }
        let mut product_vertical: HashMap<&str, &str> = HashMap::new();
        for (i, item) in items.iter().enumerate() {
            if item.item_id != i {
                return Err(Error::Spec(format!(
                    "item ids must be dense 0..N; position {i} holds id {}",
                    item.item_id
                )));
            }
            if item.features.len() != input_dim {
                return Err(Error::shape("item features", input_dim, item.features.len()));
            }
            if item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("item {i} has non-finite features")));
            }
            for field in [&item.vertical, &item.product_id] {
                if field.is_empty() || field.contains([',', '\n', '\r']) {
                    return Err(Error::Spec(format!("item {i}: invalid label `{field}`")));
                }
            }
            let v = product_vertical
                .entry(item.product_id.as_str())
                .or_insert(item.vertical.as_str());
            if *v != item.vertical {
                return Err(Error::Spec(format!(
                    "product `{}` appears in verticals `{v}` and `{}`",
                    item.product_id, item.vertical
                )));
            }
        }
        Ok(Dataset {
            input_dim,
            items,
            access: None,
        })
    }

    /// Turns on per-item feature-read counters (shared by clones).
    pub fn with_access_tracking(mut self) -> Self {
        self.access = Some(Arc::new(AccessLog(
            (0..self.items.len()).map(|_| AtomicU64::new(0)).collect(),
        )));
        self
    }

    pub fn access_counts(&self) -> Option<Vec<u64>> {
        self.access
            .as_ref()
            .map(|log| log.0.iter().map(|c| c.load(Ordering::Relaxed)).collect())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: usize) -> &Item {
        &self.items[id]
    }

    pub fn features(&self, id: usize) -> &[f64] {
        if let Some(log) = &self.access {
            log.0[id].fetch_add(1, Ordering::Relaxed);
        }
        &self.items[id].features
    }

    pub fn feature_matrix(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.input_dim);
        for &id in ids {
            data.extend_from_slice(self.features(id));
        }
        Matrix::from_vec(ids.len(), self.input_dim, data).expect("features validated on construction")
    }

    /// Verticals in order of first appearance.
    pub fn verticals(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.items
            .iter()
            .filter(|it| seen.insert(it.vertical.as_str()))
            .map(|it| it.vertical.clone())
            .collect()
    }

    pub fn vertical_set(&self) -> VerticalSet {
        self.items.iter().map(|it| it.vertical.clone()).collect()
    }

    /// Products of one vertical in order of first appearance.
    pub fn products_of(&self, vertical: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.items
            .iter()
            .filter(|it| it.vertical == vertical && seen.insert(it.product_id.as_str()))
            .map(|it| it.product_id.clone())
            .collect()
    }

    pub fn ids_where(&self, mut pred: impl FnMut(&Item) -> bool) -> Vec<usize> {
        self.items.iter().filter(|it| pred(it)).map(|it| it.item_id).collect()
    }

    /// Index-split items, the pool every trainer draws from.
    pub fn training_ids(&self) -> Vec<usize> {
        self.ids_where(|it| it.split == Split::Index)
    }

    /// Whether every product with a query item also has an index item.
    pub fn queries_covered(&self) -> bool {
        let indexed: BTreeSet<&str> = self
            .items
            .iter()
            .filter(|it| it.split == Split::Index)
            .map(|it| it.product_id.as_str())
            .collect();
        self.items.iter().all(|it| indexed.contains(it.product_id.as_str()))
    }
}

/// Generator parameters. The three spreads are radial scales: a product
/// center lies about `product_spread` from its vertical center and an item
/// about `sample_noise` from its product center, whatever `input_dim` is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub verticals: usize,
    pub products_per_vertical: usize,
    pub items_per_product: usize,
    pub input_dim: usize,
    pub vertical_spread: f64,
    pub product_spread: f64,
    pub sample_noise: f64,
    pub query_fraction: f64,
    /// Verticals that reuse the first regular vertical's input region with
    /// an incompatible product structure.
    pub conflict_verticals: Vec<usize>,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            verticals: 4,
            products_per_vertical: 20,
            items_per_product: 12,
            input_dim: 32,
            vertical_spread: 10.0,
            product_spread: 2.0,
            sample_noise: 0.3,
            query_fraction: 0.25,
            conflict_verticals: Vec::new(),
            seed: 42,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("verticals", self.verticals),
            ("products_per_vertical", self.products_per_vertical),
            ("items_per_product", self.items_per_product),
            ("input_dim", self.input_dim),
        ];
        for (name, c) in counts {
            if c == 0 {
                return Err(Error::Spec(format!("{name} must be at least 1")));
            }
        }
        let reals = [
            ("vertical_spread", self.vertical_spread),
            ("product_spread", self.product_spread),
            ("sample_noise", self.sample_noise),
        ];
        for (name, r) in reals {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Spec(format!("{name} must be positive, got {r}")));
            }
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Spec(format!(
                "query_fraction must lie in (0, 1), got {}",
                self.query_fraction
            )));
        }
        let mut seen = BTreeSet::new();
        for &c in &self.conflict_verticals {
            if c >= self.verticals || !seen.insert(c) {
                return Err(Error::Spec(format!("invalid conflict vertical index {c}")));
            }
        }
        if !self.conflict_verticals.is_empty() && seen.len() == self.verticals {
            return Err(Error::Spec("at least one vertical must be free of conflicts".into()));
        }
        Ok(())
    }
}

pub fn vertical_name(index: usize) -> String {
    format!("v{index}")
}

/// Rounds to the 9 significant digits the CSV format stores.
pub fn round_to_stored(v: f64) -> f64 {
    format_stored(v).parse().expect("formatted float parses")
}

fn format_stored(v: f64) -> String {
    format!("{v:.8e}")
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `center` plus an isotropic Gaussian whose expected norm² is `radius²`.
fn offset(center: &[f64], radius: f64, rng: &mut Rng) -> Vec<f64> {
    let sd = radius / (center.len() as f64).sqrt();
    center
        .iter()
        .map(|c| c + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Vertical centers at radius `vertical_spread`, mutually orthogonal while
/// there are dimensions to spare (pairwise distance `spread·√2`).
fn vertical_centers(spec: &GenSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(spec.verticals);
    for v in 0..spec.verticals {
        let mut g = gaussian(rng, spec.input_dim);
        if v < spec.input_dim {
            for u in &units {
                let proj: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
                g.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        g.iter_mut().for_each(|x| *x /= norm);
        units.push(g);
    }
    units
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * spec.vertical_spread).collect())
        .collect()
}

/// Draws a dataset. Verticals are `v0..`, products `v<i>/p<NNN>`; ids run
/// vertical-major, then product, then item.
///
/// A conflict vertical sits on top of the first regular vertical. Each of its
/// products alternates items between one of that vertical's product centers
/// and a fresh point of the same region, so the neighborhoods the regular
/// vertical must keep apart are exactly the ones the conflict vertical needs
/// merged.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let centers = vertical_centers(spec, &mut rng);
    let is_conflict = |v: usize| spec.conflict_verticals.contains(&v);

    let mut product_centers: Vec<Vec<Vec<f64>>> = vec![Vec::new(); spec.verticals];
    for v in (0..spec.verticals).filter(|&v| !is_conflict(v)) {
        product_centers[v] = (0..spec.products_per_vertical)
            .map(|_| offset(&centers[v], spec.product_spread, &mut rng))
            .collect();
    }
    let partner = (0..spec.verticals).find(|&v| !is_conflict(v)).expect("validated");

    let mut items = Vec::with_capacity(spec.verticals * spec.products_per_vertical * spec.items_per_product);
    let n = spec.items_per_product;
    let n_query = ((n as f64 * spec.query_fraction).round() as usize).min(n - 1);
    for v in 0..spec.verticals {
        let vertical = vertical_name(v);
        let anchors: Vec<[Vec<f64>; 2]> = if is_conflict(v) {
            let mut order: Vec<usize> = (0..spec.products_per_vertical).collect();
            order.shuffle(&mut rng);
            order
                .into_iter()
                .map(|q| {
                    let shared = product_centers[partner][q].clone();
                    let fresh = offset(&centers[partner], spec.product_spread, &mut rng);
                    [shared, fresh]
                })
                .collect()
        } else {
            product_centers[v].iter().map(|c| [c.clone(), c.clone()]).collect()
        };

        for (p, anchor) in anchors.iter().enumerate() {
            let product_id = format!("{vertical}/p{p:03}");
            let query_slots: BTreeSet<usize> = index::sample(&mut rng, n, n_query).into_iter().collect();
            for i in 0..n {
                let features = offset(&anchor[i % 2], spec.sample_noise, &mut rng)
                    .into_iter()
                    .map(round_to_stored)
                    .collect();
                items.push(Item {
                    item_id: items.len(),
                    vertical: vertical.clone(),
                    product_id: product_id.clone(),
                    split: if query_slots.contains(&i) {
                        Split::Query
                    } else {
                        Split::Index
                    },
                    features,
                });
            }
        }
    }
    Dataset::new(spec.input_dim, items)
}

/// Independently reassigns each item's product, with probability `rate`, to
/// a different product of the same vertical.
pub fn add_label_noise(dataset: &Dataset, rate: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Spec(format!("noise rate must lie in [0, 1], got {rate}")));
    }
    let products: HashMap<String, Vec<String>> = dataset
        .verticals()
        .into_iter()
        .map(|v| {
            let ps = dataset.products_of(&v);
            (v, ps)
        })
        .collect();
    let mut items = dataset.items().to_vec();
    for item in &mut items {
        if rng.random::<f64>() >= rate {
            continue;
        }
        let pool = &products[&item.vertical];
        if pool.len() < 2 {
            return Err(Error::Spec(format!(
                "vertical `{}` needs at least 2 products for label noise",
                item.vertical
            )));
        }
        let own = pool.iter().position(|p| *p == item.product_id).expect("product listed");
        let mut pick = rng.random_range(0..pool.len() - 1);
        if pick >= own {
            pick += 1;
        }
        item.product_id = pool[pick].clone();
    }
    Dataset::new(dataset.input_dim(), items)
}

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let d = dataset.input_dim();
    let mut out = format!("{DATASET_MAGIC} dim={d}\nitem_id,vertical,product_id,split");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for it in dataset.items() {
        out.push_str(&format!(
            "{},{},{},{}",
            it.item_id, it.vertical, it.product_id, it.split
        ));
        for &v in &it.features {
            out.push(',');
            out.push_str(&format_stored(v));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, magic) = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))?;
    let dim = parse_magic(magic)?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["item_id", "vertical", "product_id", "split"] {
        return Err(Error::Format(format!("unexpected header `{header}`")));
    }
    if cols.len() - 4 != dim {
        return Err(Error::Format(format!(
            "header has {} feature columns but declares dim={dim}",
            cols.len() - 4
        )));
    }
    if let Some((j, c)) = cols[4..].iter().enumerate().find(|(j, c)| **c != format!("f{j}")) {
        return Err(Error::Format(format!("feature column {j} is named `{c}`")));
    }

    let mut items = Vec::new();
    for (line, row) in lines {
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 4 + dim {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", 4 + dim, fields.len()),
            });
        }
        let parse_err = |message: String| Error::Parse { line, message };
        let item_id = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad item_id `{}`", fields[0])))?;
        let split = fields[3].parse().map_err(parse_err)?;
        let features = fields[4..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("non-numeric feature `{f}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        items.push(Item {
            item_id,
            vertical: fields[1].to_string(),
            product_id: fields[2].to_string(),
            split,
            features,
        });
    }
    Dataset::new(dim, items).map_err(|e| Error::Format(e.to_string()))
}

fn parse_magic(line: &str) -> Result<usize> {
    let Some(rest) = line.strip_prefix("# uniembed-dataset ") else {
        return Err(Error::Format("missing `# uniembed-dataset` comment line".into()));
    };
    let mut parts = rest.split_whitespace();
    match parts.next() {
        Some("v1") => {}
        Some(v) => {
            return Err(Error::Version {
                found: v.trim_start_matches('v').to_string(),
                expected: 1,
            })
        }
        None => return Err(Error::Format("dataset comment line lacks a version".into())),
    }
    parts
        .next()
        .and_then(|p| p.strip_prefix("dim="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format(format!("bad dimension declaration in `{line}`")))
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_csv(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            verticals: 2,
            products_per_vertical: 3,
            items_per_product: 4,
            input_dim: 4,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn default_spec_counts() {
        let ds = generate(&GenSpec::default()).unwrap();
        assert_eq!(ds.len(), 960);
        assert_eq!(ds.verticals(), vec!["v0", "v1", "v2", "v3"]);
        assert!(ds.queries_covered());
        for v in ds.verticals() {
            assert_eq!(ds.products_of(&v).len(), 20);
        }
    }

    #[test]
    fn split_keeps_an_index_item_per_product() {
        let spec = GenSpec {
            items_per_product: 2,
            query_fraction: 0.9,
            ..small_spec()
        };
        let ds = generate(&spec).unwrap();
        for v in ds.verticals() {
            for p in ds.products_of(&v) {
                assert!(ds
                    .items()
                    .iter()
                    .any(|it| it.product_id == p && it.split == Split::Index));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            GenSpec {
                verticals: 0,
                ..small_spec()
            },
            GenSpec {
                sample_noise: 0.0,
                ..small_spec()
            },
            GenSpec {
                query_fraction: 1.0,
                ..small_spec()
            },
            GenSpec {
                conflict_verticals: vec![2],
                ..small_spec()
            },
            GenSpec {
                conflict_verticals: vec![0, 1],
                ..small_spec()
            },
        ] {
            assert!(matches!(generate(&bad), Err(Error::Spec(_))), "{bad:?}");
        }
    }

    #[test]
    fn noise_rate_bounds() {
        let ds = generate(&small_spec()).unwrap();
        let mut rng = rng::seeded(0);
        assert!(add_label_noise(&ds, 1.5, &mut rng).is_err());
        assert!(add_label_noise(&ds, -0.1, &mut rng).is_err());
        assert_eq!(add_label_noise(&ds, 0.0, &mut rng).unwrap(), ds);
    }

    #[test]
    fn full_noise_moves_every_item_and_nothing_else() {
        let ds = generate(&small_spec()).unwrap();
        let noisy = add_label_noise(&ds, 1.0, &mut rng::seeded(3)).unwrap();
        for (a, b) in ds.items().iter().zip(noisy.items()) {
            assert_ne!(a.product_id, b.product_id);
            assert_eq!(a.vertical, b.vertical);
            assert_eq!(a.features, b.features);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn single_product_vertical_cannot_take_noise() {
        let ds = generate(&GenSpec {
            products_per_vertical: 1,
            ..small_spec()
        })
        .unwrap();
        assert!(add_label_noise(&ds, 1.0, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn csv_rejects_short_rows_and_bad_headers() {
        let ds = generate(&small_spec()).unwrap();
        let csv = dataset_to_csv(&ds);

        let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
        let cut = lines[4].rfind(',').unwrap();
        lines[4].truncate(cut);
        let err = dataset_from_csv(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");

        let no_magic: String = csv.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(matches!(dataset_from_csv(&no_magic), Err(Error::Format(_))));

        let bad_number = csv.replacen(",index,", ",index,abc", 1);
        assert!(matches!(dataset_from_csv(&bad_number), Err(Error::Parse { .. })));
    }

    #[test]
    fn header_dimension_must_match_columns() {
        let item = |id: usize, d: usize| Item {
            item_id: id,
            vertical: "v0".into(),
            product_id: "v0/p000".into(),
            split: Split::Index,
            features: vec![0.5; d],
        };
        let eight = dataset_to_csv(&Dataset::new(8, vec![item(0, 8)]).unwrap());
        assert_eq!(dataset_from_csv(&eight).unwrap().input_dim(), 8);

        let seven = dataset_to_csv(&Dataset::new(7, vec![item(0, 7)]).unwrap()).replacen("dim=7", "dim=8", 1);
        assert!(matches!(dataset_from_csv(&seven), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_rejects_cross_vertical_products() {
        let mk = |id, v: &str| Item {
            item_id: id,
            vertical: v.into(),
            product_id: "shared".into(),
            split: Split::Index,
            features: vec![0.0],
        };
        assert!(Dataset::new(1, vec![mk(0, "a"), mk(1, "b")]).is_err());
    }

    #[test]
    fn access_tracking_counts_feature_reads() {
        let ds = generate(&small_spec()).unwrap().with_access_tracking();
        ds.features(2);
        ds.feature_matrix(&[2, 5]);
        let counts = ds.access_counts().unwrap();
        assert_eq!(counts[2], 2);
        assert_eq!(counts[5], 1);
        assert_eq!(counts.iter().sum::<u64>(), 3);
    }
}
