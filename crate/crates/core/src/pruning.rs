//! Magnitude-pruning baselines restricted to the layers a surrogate would
//! replace, so both kinds of compression are measured against the same
//! parameter count.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, PathContext, Result};
use crate::mlp::{train_masked, ByteReader, EpochMetrics, Mlp, TrainConfig, WeightMask};
use crate::real::Real;

pub const FINETUNE_EPOCHS: usize = 5;

const MASK_MAGIC: &[u8; 8] = b"KNETMASK";
const MASK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    Unstructured,
    Structured,
}

/// How structured pruning distributes unit removals over the scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitSelection {
    /// Always shrink the widest layer; ties go to the layer holding the
    /// weakest remaining unit.
    #[default]
    Even,
    /// Weakest unit anywhere in scope.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub method: PruneMethod,
    /// Retained fraction of the scoped parameters.
    pub target_ratio: f64,
    /// Layer indices (0-based, end exclusive).
    pub scope: Range<usize>,
    #[serde(default)]
    pub selection: UnitSelection,
}

impl PruneSpec {
    pub fn new(method: PruneMethod, target_ratio: f64, scope: Range<usize>) -> Self {
        Self {
            method,
            target_ratio,
            scope,
            selection: UnitSelection::Even,
        }
    }

    fn validate<T: Real>(&self, net: &Mlp<T>) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(Error::arg(format!("prune ratio {} not in (0, 1]", self.target_ratio)));
        }
        if self.scope.is_empty() || self.scope.end > net.num_layers() {
            return Err(Error::arg(format!(
                "prune scope {:?} does not fit a {}-layer network",
                self.scope,
                net.num_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned<T = f64> {
    pub net: Mlp<T>,
    /// Set for unstructured pruning only.
    pub mask: Option<WeightMask>,
    /// Nonzero weights plus biases of the scoped layers.
    pub scoped_params: usize,
}

/// Nonzero weights plus all biases over `layers`.
pub fn nonzero_params<T: Real>(net: &Mlp<T>, layers: Range<usize>) -> usize {
    layers
        .map(|k| net.weights()[k].iter().filter(|w| !w.is_zero()).count() + net.biases()[k].len())
        .sum()
}

pub fn prune<T: Real>(net: &Mlp<T>, spec: &PruneSpec) -> Result<Pruned<T>> {
    match spec.method {
        PruneMethod::Unstructured => prune_unstructured(net, spec),
        PruneMethod::Structured => prune_structured(net, spec),
    }
}

/// Zeroes the smallest-magnitude scoped weights until the scoped weights
/// plus biases number `round(ratio · original)`. Biases are never pruned,
/// so ratios below their share leave no weights at all. Ties break by
/// (layer, row, column).
pub fn prune_unstructured<T: Real>(net: &Mlp<T>, spec: &PruneSpec) -> Result<Pruned<T>> {
    spec.validate(net)?;
    let mut entries: Vec<(T, usize, usize, usize)> = Vec::new();
    for k in spec.scope.clone() {
        for ((r, c), &w) in net.weights()[k].indexed_iter() {
            entries.push((w.abs(), k, r, c));
        }
    }
    let biases: usize = spec.scope.clone().map(|k| net.biases()[k].len()).sum();
    let keep = ((spec.target_ratio * (entries.len() + biases) as f64).round() as usize).saturating_sub(biases);
    let drop = entries.len() - keep.min(entries.len());
    // stable sort keeps index order among equal magnitudes
    entries.sort_by(|a, b| by_score(a.0, b.0));

    let mut mask = WeightMask::none(net.num_layers());
    for k in spec.scope.clone() {
        mask.keep[k] = Some(Array2::from_elem(net.weights()[k].raw_dim(), true));
    }
    for &(_, k, r, c) in &entries[..drop] {
        mask.keep[k].as_mut().unwrap()[[r, c]] = false;
    }
    let mut pruned = net.clone();
    mask.apply(&mut pruned);
    let scoped_params = nonzero_params(&pruned, spec.scope.clone());
    Ok(Pruned {
        net: pruned,
        mask: Some(mask),
        scoped_params,
    })
}

/// Scoped parameter count for hidden widths `widths[k]` feeding layer
/// `scope.start + k` (entry 0 is the fixed input width of the scope).
fn scoped_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// Removes hidden units with the smallest incoming-row L1 norm from the
/// outputs of the scoped layers until the scoped parameter count is at most
/// `ratio` of the original. Unit `j` of layer `k` takes row `j` of `W_k`,
/// entry `j` of `b_k` and column `j` of `W_{k+1}` with it.
pub fn prune_structured<T: Real>(net: &Mlp<T>, spec: &PruneSpec) -> Result<Pruned<T>> {
    spec.validate(net)?;
    if spec.scope.end >= net.num_layers() {
        return Err(Error::arg("structured pruning cannot remove units of the output layer"));
    }
    let scope = spec.scope.clone();
    let mut widths: Vec<usize> = std::iter::once(net.weights()[scope.start].ncols())
        .chain(scope.clone().map(|k| net.weights()[k].nrows()))
        .collect();
    let original = scoped_count(&widths);
    let target = (spec.target_ratio * original as f64 + 1e-9).floor() as usize;
    let floor: Vec<usize> = std::iter::once(widths[0]).chain(scope.clone().map(|_| 1)).collect();
    if scoped_count(&floor) > target {
        return Err(Error::arg(format!(
            "ratio {} cannot keep one unit per scoped layer (minimum {} of {original} parameters)",
            spec.target_ratio,
            scoped_count(&floor)
        )));
    }

    // per layer, weakest unit last so `pop` takes it; ties by lower index
    let mut queues: Vec<Vec<(T, usize)>> = scope
        .clone()
        .map(|k| {
            let w = &net.weights()[k];
            let mut q: Vec<(T, usize)> = w
                .axis_iter(Axis(0))
                .enumerate()
                .map(|(j, row)| (row.iter().fold(T::zero(), |acc, v| acc + v.abs()), j))
                .collect();
            q.sort_by(|a, b| by_score(b.0, a.0).then(b.1.cmp(&a.1)));
            q
        })
        .collect();
    let mut removed: Vec<Vec<usize>> = vec![Vec::new(); scope.len()];

    while scoped_count(&widths) > target {
        let candidates = (0..scope.len()).filter(|&i| widths[i + 1] > 1);
        let pick = match spec.selection {
            UnitSelection::Even => {
                let widest = candidates.clone().map(|i| widths[i + 1]).max().expect("floor checked");
                candidates
                    .filter(|&i| widths[i + 1] == widest)
                    .min_by(|&a, &b| by_score(weakest(&queues[a]), weakest(&queues[b])))
            }
            UnitSelection::Global => candidates
                .min_by(|&a, &b| by_score(weakest(&queues[a]), weakest(&queues[b]))),
        }
        .expect("floor checked");
        let (_, unit) = queues[pick].pop().expect("width above 1");
        removed[pick].push(unit);
        widths[pick + 1] -= 1;
    }

    let mut weights = net.weights().to_vec();
    let mut biases = net.biases().to_vec();
    for (i, k) in scope.clone().enumerate() {
        let keep: Vec<usize> = (0..weights[k].nrows()).filter(|j| !removed[i].contains(j)).collect();
        weights[k] = weights[k].select(Axis(0), &keep);
        biases[k] = biases[k].select(Axis(0), &keep);
        weights[k + 1] = weights[k + 1].select(Axis(1), &keep);
    }
    let pruned = Mlp::from_parts(weights, biases, net.activations().to_vec())?;
    let scoped_params = nonzero_params(&pruned, scope);
    Ok(Pruned {
        net: pruned,
        mask: None,
        scoped_params,
    })
}

fn weakest<T: Real>(queue: &[(T, usize)]) -> T {
    queue.last().expect("nonempty queue").0
}

fn by_score<T: Real>(a: T, b: T) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}

/// Retrains with the initial procedure; masked weights stay at zero.
pub fn finetune<T: Real>(
    net: &mut Mlp<T>,
    set: &ImageSet<T>,
    config: &TrainConfig,
    mask: Option<&WeightMask>,
) -> Result<Vec<EpochMetrics>> {
    train_masked(net, set, config, mask)
}

/// Bitsets per masked layer: `u8` presence flag, rows, cols, then
/// row-major bits, least significant first.
pub fn mask_to_bytes(mask: &WeightMask) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.keep.len() as u64).to_le_bytes());
    for layer in &mask.keep {
        match layer {
            None => out.push(0),
            Some(keep) => {
                out.push(1);
                out.extend_from_slice(&(keep.nrows() as u64).to_le_bytes());
                out.extend_from_slice(&(keep.ncols() as u64).to_le_bytes());
                let mut bits = vec![0u8; keep.len().div_ceil(8)];
                for (i, &k) in keep.iter().enumerate() {
                    if k {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&bits);
            }
        }
    }
    out
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<WeightMask> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != MASK_MAGIC {
        return Err(Error::Format("not a weight-mask file".into()));
    }
    let version = r.u32()?;
    if version != MASK_VERSION {
        return Err(Error::Format(format!("unsupported mask version {version}")));
    }
    let layers = r.u64()? as usize;
    let mut keep = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        match r.take(1)?[0] {
            0 => keep.push(None),
            1 => {
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let len = rows.checked_mul(cols).ok_or_else(|| Error::Format("mask size overflows".into()))?;
                let bits = r.take(len.div_ceil(8))?;
                let flat: Vec<bool> = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
                keep.push(Some(Array2::from_shape_vec((rows, cols), flat).expect("length checked")));
            }
            flag => return Err(Error::Format(format!("bad mask layer flag {flag}"))),
        }
    }
    r.finish()?;
    Ok(WeightMask { keep })
}

pub fn save_mask(mask: &WeightMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mask_to_bytes(mask)).at(path)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<WeightMask> {
    let path = path.as_ref();
    mask_from_bytes(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Taps, DEFAULT_LAYER_SIZES};
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_net(seed: u64) -> Mlp {
        Mlp::new(&DEFAULT_LAYER_SIZES, seed).unwrap()
    }

    fn scope(net: &Mlp) -> Range<usize> {
        Taps::standard(net).unwrap().inner_layers()
    }

    fn zeros_in_scope(net: &Mlp, scope: Range<usize>) -> usize {
        scope.map(|k| net.weights()[k].iter().filter(|w| **w == 0.0).count()).sum()
    }

    fn tiny_net() -> Mlp {
        // single scoped 2x2 layer between two identity layers
        Mlp::from_parts(
            vec![Array2::eye(2), array![[0.1, -2.0], [0.5, 3.0]], Array2::eye(2)],
            vec![Array1::zeros(2), Array1::zeros(2), Array1::zeros(2)],
            vec![false, true, false],
        )
        .unwrap()
    }

    #[test]
    fn unstructured_keeps_largest_magnitudes() {
        let net = tiny_net();
        let out = prune_unstructured(&net, &PruneSpec::new(PruneMethod::Unstructured, 4.0 / 6.0, 1..2)).unwrap();
        assert_eq!(out.net.weights()[1], array![[0.0, -2.0], [0.0, 3.0]]);
        assert_eq!(out.mask.as_ref().unwrap().zeroed_count(), 2);
        assert_eq!(out.scoped_params, 4);
        assert_eq!(out.net.biases(), net.biases());
    }

    #[test]
    fn ratio_one_is_identity() {
        let net = default_net(1);
        let s = scope(&net);
        let out = prune(&net, &PruneSpec::new(PruneMethod::Unstructured, 1.0, s.clone())).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.mask.unwrap().zeroed_count(), 0);
        assert_eq!(out.scoped_params, 1680);
        let out = prune(&net, &PruneSpec::new(PruneMethod::Structured, 1.0, s)).unwrap();
        assert_eq!(out.net, net);
    }

    #[test]
    fn invalid_ratios_are_rejected() {
        let net = default_net(1);
        for ratio in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(prune(&net, &PruneSpec::new(PruneMethod::Unstructured, ratio, scope(&net))).is_err());
        }
        // one unit per scoped layer needs 20 + 1 + 3 * 2 = 27 parameters
        assert!(prune(&net, &PruneSpec::new(PruneMethod::Structured, 26.0 / 1680.0, scope(&net))).is_err());
        assert!(prune(&net, &PruneSpec::new(PruneMethod::Structured, 27.0 / 1680.0, scope(&net))).is_ok());
        assert!(prune(&net, &PruneSpec::new(PruneMethod::Unstructured, 0.5, 4..9)).is_err());
    }

    #[test]
    fn pruning_is_local() {
        let net = tiny_net();
        let out = prune_unstructured(&net, &PruneSpec::new(PruneMethod::Unstructured, 4.0 / 6.0, 1..2)).unwrap();
        // inputs that only use the second column never touch the zeroed weights
        let x = array![[0.0, 1.5], [0.0, -0.3]];
        assert_eq!(out.net.forward_batch(x.view()).unwrap(), net.forward_batch(x.view()).unwrap());
    }

    #[test]
    fn structured_shapes_chain() {
        let net = default_net(2);
        let out = prune_structured(&net, &PruneSpec::new(PruneMethod::Structured, 0.5, scope(&net))).unwrap();
        let sizes = out.net.layer_sizes().to_vec();
        assert_eq!((sizes[0], sizes[1], sizes[6]), (784, 20, 10));
        assert!(out.scoped_params as f64 <= 0.5 * 1680.0);
        assert_eq!(out.scoped_params, out.net.param_count(1..5));
        // even spread: widths differ by at most one
        let widths = &sizes[2..6];
        assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 1, "{widths:?}");
        let x = Array2::from_elem((3, 784), 0.5);
        assert_eq!(out.net.forward_batch(x.view()).unwrap().dim(), (3, 10));
    }

    #[test]
    fn removing_a_unit_drops_its_row_and_column() {
        let mut net = default_net(3);
        net.weight_mut(2).row_mut(7).fill(0.0);
        let out = prune_structured(&net, &PruneSpec::new(PruneMethod::Structured, 0.99, scope(&net))).unwrap();
        // a single removal suffices for 1% and it must be the dead unit
        assert_eq!(out.net.layer_sizes(), &[784, 20, 20, 19, 20, 20, 10]);
        let keep: Vec<usize> = (0..20).filter(|&j| j != 7).collect();
        assert_eq!(out.net.weights()[2], net.weights()[2].select(Axis(0), &keep));
        assert_eq!(out.net.weights()[3], net.weights()[3].select(Axis(1), &keep));
        assert_eq!(out.net.biases()[2], net.biases()[2].select(Axis(0), &keep));
    }

    #[test]
    fn equal_scores_remove_lower_index_first() {
        let mut net = default_net(7);
        for j in [4, 11] {
            net.weight_mut(1).row_mut(j).fill(0.0);
            net.weight_mut(3).row_mut(j).fill(0.0);
        }
        let out = prune_structured(&net, &PruneSpec::new(PruneMethod::Structured, 0.99, scope(&net))).unwrap();
        let keep: Vec<usize> = (0..20).filter(|&j| j != 4).collect();
        assert_eq!(out.net.weights()[1], net.weights()[1].select(Axis(0), &keep));
        assert_eq!(out.net.layer_sizes()[4], 20);
    }

    #[test]
    fn global_selection_follows_scores() {
        let mut net = default_net(4);
        for j in 0..5 {
            net.weight_mut(3).row_mut(j).fill(0.0);
        }
        let mut spec = PruneSpec::new(PruneMethod::Structured, 0.8, scope(&net));
        spec.selection = UnitSelection::Global;
        let out = prune_structured(&net, &spec).unwrap();
        assert!(out.net.layer_sizes()[4] <= 15);
    }

    #[test]
    fn finetune_respects_mask() {
        let net = default_net(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let images = Array2::from_shape_simple_fn((64, 784), || rng.random_range(0.0..1.0));
        let labels: Vec<u8> = (0..64).map(|i| (i % 10) as u8).collect();
        let set = ImageSet::new(images, labels, "toy").unwrap();
        let out = prune(&net, &PruneSpec::new(PruneMethod::Unstructured, 0.3, scope(&net))).unwrap();
        let mask = out.mask.unwrap();
        let mut tuned = out.net.clone();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        };
        finetune(&mut tuned, &set, &config, Some(&mask)).unwrap();
        assert_ne!(tuned, out.net);
        assert_eq!(zeros_in_scope(&tuned, scope(&net)), mask.zeroed_count());
        for (w, keep) in tuned.weights().iter().zip(&mask.keep) {
            if let Some(keep) = keep {
                assert!(w.iter().zip(keep.iter()).all(|(w, &k)| k || *w == 0.0));
            }
        }
        let mut same = out.net.clone();
        finetune(&mut same, &set, &TrainConfig { epochs: 0, ..config }, Some(&mask)).unwrap();
        assert_eq!(same, out.net);
    }

    #[test]
    fn mask_round_trip() {
        let net = default_net(6);
        let out = prune(&net, &PruneSpec::new(PruneMethod::Unstructured, 0.37, scope(&net))).unwrap();
        let mask = out.mask.unwrap();
        assert_eq!(mask_from_bytes(&mask_to_bytes(&mask)).unwrap(), mask);
        let mut bytes = mask_to_bytes(&mask);
        bytes.push(0);
        assert!(mask_from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn exact_zero_count(seed in any::<u64>(), ratio in 0.01f64..=1.0) {
            let net = default_net(seed);
            let s = scope(&net);
            let out = prune_unstructured(&net, &PruneSpec::new(PruneMethod::Unstructured, ratio, s.clone())).unwrap();
            // biases (80) always stay
            let expect = 1600 - ((ratio * 1680.0).round() as usize).saturating_sub(80);
            prop_assert_eq!(zeros_in_scope(&out.net, s.clone()), expect);
            // layers outside the scope are untouched
            prop_assert_eq!(&out.net.weights()[0], &net.weights()[0]);
            prop_assert_eq!(&out.net.weights()[5], &net.weights()[5]);
        }

        #[test]
        fn smaller_ratio_prunes_a_superset(seed in any::<u64>(), a in 0.05f64..=1.0, b in 0.05f64..=1.0) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            let net = default_net(seed);
            let s = scope(&net);
            let first = prune_unstructured(&net, &PruneSpec::new(PruneMethod::Unstructured, hi, s.clone())).unwrap();
            let second = prune_unstructured(&first.net, &PruneSpec::new(PruneMethod::Unstructured, lo, s.clone())).unwrap();
            for k in s {
                let (m1, m2) = (first.mask.as_ref().unwrap().keep[k].as_ref().unwrap(), second.mask.as_ref().unwrap().keep[k].as_ref().unwrap());
                prop_assert!(m1.iter().zip(m2.iter()).all(|(&k1, &k2)| k1 || !k2));
            }
        }

        #[test]
        fn structured_meets_target(seed in any::<u64>(), ratio in 0.05f64..=1.0) {
            let net = default_net(seed);
            let out = prune_structured(&net, &PruneSpec::new(PruneMethod::Structured, ratio, scope(&net))).unwrap();
            prop_assert!(out.scoped_params as f64 <= ratio * 1680.0 + 1e-9);
            prop_assert!(out.net.layer_sizes()[2..6].iter().all(|&w| w >= 1));
        }
    }
}
