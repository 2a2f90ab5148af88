//! Central finite-difference verification of the analytic gradients.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{l2_norm, Matrix};
use crate::net::{EmbeddingNet, GradSet};
use crate::rng;
use crate::triplet::{batch_triplet_loss, mine_semi_hard, Triplet};
use crate::unify::distill_loss;

pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to zero count as sitting on a kink.
pub const KINK_WINDOW: f64 = 1e-6;
pub const KINK_NUDGE: f64 = 1e-3;
/// Normalized outputs whose raw norm is below this sit too close to the
/// normalization's singularity at zero for finite differences.
pub const OUTPUT_FLOOR: f64 = 1e-3;
/// Floor on the relative-error denominator for vanishing gradients.
pub const RELATIVE_FLOOR: f64 = 1e-5;
/// Squared distances between unit vectors never exceed 4, so this margin
/// keeps every probe triplet strictly inside the hinge's linear part.
pub const TRIPLET_CHECK_MARGIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Distill,
}

/// A fixed batch the checked loss is evaluated on.
#[derive(Clone, Debug)]
pub struct Probe {
    pub inputs: Matrix,
    pub products: Vec<usize>,
    pub verticals: Vec<usize>,
    pub targets: Matrix,
}

impl Probe {
    /// Eight rows: four products × two items over two verticals, standard
    /// normal inputs and random unit targets.
    pub fn seeded(net: &EmbeddingNet, seed: u64) -> Probe {
        let mut rng = rng::seeded(seed);
        let rows = 8;
        let d = net.config().input_dim;
        let e = net.config().embedding_dim;
        let inputs = (0..rows * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut targets: Vec<f64> = (0..rows * e).map(|_| rng.sample(StandardNormal)).collect();
        for row in targets.chunks_mut(e) {
            let n = l2_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Probe {
            inputs: Matrix::from_vec(rows, d, inputs).expect("sized"),
            products: vec![0, 0, 1, 1, 2, 2, 3, 3],
            verticals: vec![0, 0, 0, 0, 1, 1, 1, 1],
            targets: Matrix::from_vec(rows, e, targets).expect("sized"),
        }
    }
}

/// Shifts every input row that has a pre-activation within [`KINK_WINDOW`]
/// of zero by [`KINK_NUDGE`] in all coordinates, repeating until clean.
pub fn nudge_off_kinks(net: &EmbeddingNet, inputs: &Matrix) -> Result<Matrix> {
    let mut x = inputs.clone();
    for _ in 0..32 {
        let (_, cache) = net.forward(&x)?;
        let mut dirty = vec![false; x.rows()];
        for z in cache.pre_activations() {
            for (r, flag) in dirty.iter_mut().enumerate() {
                *flag |= z.row(r).iter().any(|v| v.abs() < KINK_WINDOW);
            }
        }
        if !dirty.contains(&true) {
            break;
        }
        for (r, _) in dirty.iter().enumerate().filter(|(_, d)| **d) {
            x.row_mut(r).iter_mut().for_each(|v| *v += KINK_NUDGE);
        }
    }
    Ok(x)
}

/// Kink-nudges `inputs` and, for normalized nets, redraws rows whose raw
/// output is near zero (every unit dead). Gives up after a bounded number of
/// rounds, leaving any remaining singular rows to fail the check.
pub fn avoid_singular_rows(net: &EmbeddingNet, inputs: &Matrix, seed: u64) -> Result<Matrix> {
    let mut rng = rng::seeded(seed);
    let mut x = inputs.clone();
    for _ in 0..16 {
        x = nudge_off_kinks(net, &x)?;
        if !net.config().normalize_output {
            break;
        }
        let (_, cache) = net.forward(&x)?;
        let raw = cache.pre_activations().last().expect("at least one layer");
        let relu = net.config().activate_output;
        let singular: Vec<usize> = (0..x.rows())
            .filter(|&r| {
                let sq: f64 = raw
                    .row(r)
                    .iter()
                    .map(|&v| if relu { v.max(0.0) } else { v })
                    .map(|v| v * v)
                    .sum();
                sq.sqrt() < OUTPUT_FLOOR
            })
            .collect();
        if singular.is_empty() {
            break;
        }
        for r in singular {
            x.row_mut(r).iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
    }
    Ok(x)
}

/// The scalar being checked, with triplets frozen so the loss is smooth.
pub fn probe_loss(net: &EmbeddingNet, kind: LossKind, probe: &Probe, triplets: &[Triplet]) -> Result<f64> {
    let emb = net.embed_rows(&probe.inputs)?;
    Ok(match kind {
        LossKind::Triplet => batch_triplet_loss(&emb, triplets, TRIPLET_CHECK_MARGIN)?.0,
        LossKind::Distill => distill_loss(&emb, &probe.targets)?.0,
    })
}

pub fn analytic_gradients(net: &EmbeddingNet, kind: LossKind, probe: &Probe, triplets: &[Triplet]) -> Result<GradSet> {
    let (emb, cache) = net.forward(&probe.inputs)?;
    let grad = match kind {
        LossKind::Triplet => batch_triplet_loss(&emb, triplets, TRIPLET_CHECK_MARGIN)?.1,
        LossKind::Distill => distill_loss(&emb, &probe.targets)?.1,
    };
    net.backward(&cache, &grad)
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every parameter.
pub fn numeric_gradients(net: &EmbeddingNet, f: impl Fn(&EmbeddingNet) -> Result<f64>) -> Result<GradSet> {
    let mut work = net.clone();
    let mut out = GradSet::zeros_like(net);
    for (l, grad) in out.layers.iter_mut().enumerate() {
        let n_w = grad.weight.as_slice().len();
        for i in 0..n_w + grad.bias.len() {
            let original = *param_mut(&mut work, l, i);
            *param_mut(&mut work, l, i) = original + FD_STEP;
            let plus = f(&work)?;
            *param_mut(&mut work, l, i) = original - FD_STEP;
            let minus = f(&work)?;
            *param_mut(&mut work, l, i) = original;
            let g = (plus - minus) / (2.0 * FD_STEP);
            if i < n_w {
                grad.weight.as_mut_slice()[i] = g;
            } else {
                grad.bias[i - n_w] = g;
            }
        }
    }
    Ok(out)
}

/// Parameter `i` of layer `l`, weights first, then biases.
fn param_mut(net: &mut EmbeddingNet, l: usize, i: usize) -> &mut f64 {
    let layer = &mut net.layers_mut()[l];
    let n_w = layer.weight.as_slice().len();
    if i < n_w {
        &mut layer.weight.as_mut_slice()[i]
    } else {
        &mut layer.bias[i - n_w]
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failed_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.layer).collect()
    }
}

pub fn compare_gradients(analytic: &GradSet, numeric: &GradSet, tolerance: f64) -> GradCheckReport {
    let layers: Vec<LayerCheck> = analytic
        .layers
        .iter()
        .zip(&numeric.layers)
        .enumerate()
        .map(|(layer, (a, n))| {
            let a_vals = a.weight.as_slice().iter().chain(&a.bias);
            let n_vals = n.weight.as_slice().iter().chain(&n.bias);
            let err = a_vals
                .zip(n_vals)
                .map(|(x, y)| relative_error(*x, *y))
                .fold(0.0, f64::max);
            LayerCheck {
                layer,
                max_relative_error: err,
                passed: err < tolerance,
            }
        })
        .collect();
    let max = layers.iter().map(|l| l.max_relative_error).fold(0.0, f64::max);
    GradCheckReport {
        tolerance,
        passed: layers.iter().all(|l| l.passed) && analytic.layers.len() == numeric.layers.len(),
        max_relative_error: max,
        layers,
    }
}

/// Checks `kind` on a seeded probe batch kept off kinks and zero outputs.
pub fn grad_check(net: &EmbeddingNet, kind: LossKind, tolerance: f64) -> GradCheckReport {
    let seed = rng::derive_seed(net.config().seed, 0x6772);
    let mut probe = Probe::seeded(net, seed);
    probe.inputs =
        avoid_singular_rows(net, &probe.inputs, rng::derive_seed(seed, 1)).expect("probe matches net input width");
    grad_check_on(net, kind, &probe, tolerance)
}

pub fn grad_check_on(net: &EmbeddingNet, kind: LossKind, probe: &Probe, tolerance: f64) -> GradCheckReport {
    let triplets = probe_triplets(net, probe);
    let analytic = analytic_gradients(net, kind, probe, &triplets).expect("probe matches net");
    let numeric = numeric_gradients(net, |n| probe_loss(n, kind, probe, &triplets)).expect("probe matches net");
    compare_gradients(&analytic, &numeric, tolerance)
}

pub fn probe_triplets(net: &EmbeddingNet, probe: &Probe) -> Vec<Triplet> {
    let emb = net.embed_rows(&probe.inputs).expect("probe matches net");
    mine_semi_hard(&emb, &probe.products, &probe.verticals, TRIPLET_CHECK_MARGIN).expect("labels sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetConfig};

    fn relu_net(seed: u64) -> EmbeddingNet {
        EmbeddingNet::new(NetConfig {
            input_dim: 6,
            hidden_dims: vec![8, 5],
            embedding_dim: 4,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn rows_with_dead_outputs_are_redrawn() {
        // Narrow enough that some standard normal rows kill every unit.
        let net = EmbeddingNet::new(NetConfig {
            input_dim: 6,
            hidden_dims: vec![5, 4],
            embedding_dim: 3,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let probe = Probe::seeded(&net, rng::derive_seed(1, 0x6772));
        let raw_norms = |x: &Matrix| {
            let (_, cache) = net.forward(x).unwrap();
            let raw = cache.pre_activations().last().unwrap().clone();
            raw.row_iter().map(l2_norm).collect::<Vec<_>>()
        };
        assert!(raw_norms(&probe.inputs).iter().any(|&n| n < OUTPUT_FLOOR));
        let fixed = avoid_singular_rows(&net, &probe.inputs, 5).unwrap();
        assert!(raw_norms(&fixed).iter().all(|&n| n >= OUTPUT_FLOOR));
        for kind in [LossKind::Triplet, LossKind::Distill] {
            assert!(grad_check(&net, kind, 1e-4).passed);
        }
    }

    #[test]
    fn linear_net_distill_is_tight() {
        let net = EmbeddingNet::new(NetConfig {
            input_dim: 5,
            hidden_dims: vec![4],
            embedding_dim: 3,
            activation: Activation::Identity,
            normalize_output: false,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let report = grad_check(&net, LossKind::Distill, 1e-6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_net_both_losses_pass() {
        for seed in 0..3 {
            let net = relu_net(seed);
            for kind in [LossKind::Triplet, LossKind::Distill] {
                let report = grad_check(&net, kind, 1e-4);
                assert!(report.passed, "seed {seed} {kind:?}: {report:?}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let net = relu_net(9);
        let mut probe = Probe::seeded(&net, 1);
        probe.inputs = nudge_off_kinks(&net, &probe.inputs).unwrap();
        let triplets = probe_triplets(&net, &probe);
        let mut analytic = analytic_gradients(&net, LossKind::Distill, &probe, &triplets).unwrap();
        let numeric = numeric_gradients(&net, |n| probe_loss(n, LossKind::Distill, &probe, &triplets)).unwrap();
        analytic.layers[1].weight.as_mut_slice()[3] += 0.1;
        let report = compare_gradients(&analytic, &numeric, 1e-4);
        assert!(!report.passed);
        assert_eq!(report.failed_layers(), vec![1]);
    }

    #[test]
    fn nudging_clears_kinks() {
        let net = relu_net(4);
        // zero inputs put every first-layer pre-activation exactly on the kink
        let x = Matrix::zeros(3, 6);
        let nudged = nudge_off_kinks(&net, &x).unwrap();
        let (_, cache) = net.forward(&nudged).unwrap();
        assert!(cache
            .pre_activations()
            .iter()
            .all(|z| z.as_slice().iter().all(|v| v.abs() >= KINK_WINDOW)));
    }
}
