//! Koopman matrix estimation from snapshot pairs, its projection onto the
//! state coordinates, truncated-SVD compression, and the surrogate network
//! that swaps the hidden layers for the fitted map.
//!
//! The surrogate only ever needs `A = K B`. Because `Φ(Y) B = Y`, the fit
//! computes `A = Φ(X)⁺ Y` directly and never forms the `L x L` matrix `K`.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::dictionary::{Dictionary, IdentitySelector};
use crate::error::{Error, PathContext, Result};
use crate::linalg::{default_rcond, frobenius, lstsq_min_norm, lstsq_min_norm_augmented, norm2, thin_svd, ThinSvd};
use crate::mlp::{accuracy_of, argmax, ByteReader, Mlp, SnapshotSet, Taps};
use crate::real::Real;

const MODEL_MAGIC: &[u8; 8] = b"KNETKOOP";
const MODEL_VERSION: u32 = 1;
const LIFT_CHUNK: usize = 2048;

/// `K = Φ(X)⁺ Φ(Y)`, minimizing `Σ_i ‖Φ(y_i) - Kᵀ Φ(x_i)‖²`.
pub fn fit_koopman<T: Real>(phi_x: ArrayView2<T>, phi_y: ArrayView2<T>) -> Result<Array2<T>> {
    if phi_x.dim() != phi_y.dim() {
        return Err(Error::shape("lifted Y", phi_x.dim(), phi_y.dim()));
    }
    if phi_x.nrows() == 0 {
        return Err(Error::arg("no snapshot pairs"));
    }
    lstsq_min_norm(phi_x, phi_y, default_rcond())
}

/// Squared residual `Σ_i ‖Φ(y_i) - Kᵀ Φ(x_i)‖²`.
pub fn cost<T: Real>(k: ArrayView2<T>, phi_x: ArrayView2<T>, phi_y: ArrayView2<T>) -> Result<T> {
    let l = phi_x.ncols();
    if phi_x.dim() != phi_y.dim() || k.dim() != (l, l) {
        return Err(Error::arg(format!(
            "cost shapes: K {:?}, Φ(X) {:?}, Φ(Y) {:?}",
            k.dim(),
            phi_x.dim(),
            phi_y.dim()
        )));
    }
    let r = &phi_y - &phi_x.dot(&k);
    Ok(r.iter().fold(T::zero(), |acc, &v| acc + v * v))
}

/// `A = K B` by dense multiplication.
pub fn extract_a<T: Real>(k: ArrayView2<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    if k.nrows() != k.ncols() || k.ncols() != b.nrows() {
        return Err(Error::arg(format!("extract A: K {:?}, B {:?}", k.dim(), b.dim())));
    }
    Ok(k.dot(&b))
}

/// `A = Φ(X)⁺ Y`, assembled column-major in place so the only large
/// allocation is the `M x (L + D)` system itself.
pub fn fit_projected<T: Real>(dict: &Dictionary<T>, snapshots: &SnapshotSet<T>) -> Result<Array2<T>> {
    if snapshots.is_empty() {
        return Err(Error::arg("no snapshot pairs"));
    }
    let d = dict.dim();
    if snapshots.dim() != d {
        return Err(Error::shape("snapshot width", d, snapshots.dim()));
    }
    let l = dict.len()?;
    let m = snapshots.len();
    let mut aug = Array2::<T>::zeros((m, l + d).f());
    dict.lift_rows_into(snapshots.x.view(), &mut aug)?;
    aug.slice_mut(s![.., l..]).assign(&snapshots.y);
    lstsq_min_norm_augmented(aug, l, default_rcond())
}

/// The linear map on lifted coordinates, stored densely or as SVD factors.
#[derive(Debug, Clone, PartialEq)]
pub enum KoopmanMap<T = f64> {
    /// `A` (L x D).
    Dense(Array2<T>),
    /// `A_s = U diag(sigma) Vᵀ` with `U` (L x s) and `V` (D x s).
    Factored { u: Array2<T>, sigma: Array1<T>, v: Array2<T> },
}

/// Parameter counting options. Center coordinates always count; the
/// RBF width is a shared hyperparameter and is excluded unless asked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamAccounting {
    pub include_epsilon: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel<T = f64> {
    dict: Dictionary<T>,
    selector: IdentitySelector,
    map: KoopmanMap<T>,
}

impl<T: Real> KoopmanModel<T> {
    pub fn fit(dict: Dictionary<T>, snapshots: &SnapshotSet<T>) -> Result<Self> {
        let a = fit_projected(&dict, snapshots)?;
        Self::from_a(dict, a)
    }

    pub fn from_a(dict: Dictionary<T>, a: Array2<T>) -> Result<Self> {
        let selector = dict.identity_selector()?;
        let l = dict.len()?;
        if a.dim() != (l, dict.dim()) {
            return Err(Error::shape("A", (l, dict.dim()), a.dim()));
        }
        Ok(Self {
            dict,
            selector,
            map: KoopmanMap::Dense(a),
        })
    }

    pub fn from_factors(dict: Dictionary<T>, u: Array2<T>, sigma: Array1<T>, v: Array2<T>) -> Result<Self> {
        let selector = dict.identity_selector()?;
        let (l, d, s) = (dict.len()?, dict.dim(), sigma.len());
        if u.dim() != (l, s) || v.dim() != (d, s) {
            return Err(Error::arg(format!(
                "factor shapes U {:?}, V {:?} do not match L = {l}, D = {d}, s = {s}",
                u.dim(),
                v.dim()
            )));
        }
        if sigma.iter().any(|&x| x < T::zero()) || sigma.windows(2).into_iter().any(|w| w[1] > w[0]) {
            return Err(Error::arg("singular values must be nonnegative and nonincreasing"));
        }
        Ok(Self {
            dict,
            selector,
            map: KoopmanMap::Factored { u, sigma, v },
        })
    }

    pub fn dictionary(&self) -> &Dictionary<T> {
        &self.dict
    }

    pub fn selector(&self) -> &IdentitySelector {
        &self.selector
    }

    pub fn map(&self) -> &KoopmanMap<T> {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.dict.dim()
    }

    pub fn lifted_len(&self) -> usize {
        self.selector.len
    }

    /// Rank of the stored factors, `None` for a dense map.
    pub fn rank(&self) -> Option<usize> {
        match &self.map {
            KoopmanMap::Dense(_) => None,
            KoopmanMap::Factored { sigma, .. } => Some(sigma.len()),
        }
    }

    /// `A` (or `A_s`) as a dense matrix.
    pub fn a(&self) -> Array2<T> {
        match &self.map {
            KoopmanMap::Dense(a) => a.clone(),
            KoopmanMap::Factored { u, sigma, v } => (u * &sigma.view().insert_axis(Axis(0))).dot(&v.t()),
        }
    }

    /// Full thin SVD of the current map.
    pub fn svd(&self) -> Result<ThinSvd<T>> {
        match &self.map {
            KoopmanMap::Dense(a) => thin_svd(a.view()),
            KoopmanMap::Factored { u, sigma, v } => Ok(ThinSvd {
                u: u.clone(),
                s: sigma.clone(),
                vt: v.t().to_owned(),
            }),
        }
    }

    /// Keeps the top `rank` singular triplets.
    pub fn truncate_svd(&self, rank: usize) -> Result<Self> {
        let max = match &self.map {
            KoopmanMap::Dense(a) => a.nrows().min(a.ncols()),
            KoopmanMap::Factored { sigma, .. } => sigma.len(),
        };
        if rank == 0 || rank > max {
            return Err(Error::arg(format!("SVD rank {rank} not in 1..={max}")));
        }
        self.with_svd(&self.svd()?, rank)
    }

    /// Truncates a precomputed SVD of this model's map; lets sweeps decompose once.
    pub fn with_svd(&self, svd: &ThinSvd<T>, rank: usize) -> Result<Self> {
        if rank == 0 || rank > svd.s.len() {
            return Err(Error::arg(format!("SVD rank {rank} not in 1..={}", svd.s.len())));
        }
        Self::from_factors(
            self.dict.clone(),
            svd.u.slice(s![.., ..rank]).to_owned(),
            svd.s.slice(s![..rank]).to_owned(),
            svd.vt.slice(s![..rank, ..]).t().to_owned(),
        )
    }

    /// `Aᵀ Φ(x)`, or `V (σ ⊙ (Uᵀ Φ(x)))` when factored.
    pub fn predict(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        let phi = self.dict.lift(x)?;
        Ok(match &self.map {
            KoopmanMap::Dense(a) => a.t().dot(&phi),
            KoopmanMap::Factored { u, sigma, v } => v.dot(&(&u.t().dot(&phi) * sigma)),
        })
    }

    /// Row-wise [`Self::predict`], lifting in bounded chunks.
    pub fn predict_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("prediction input", self.dim(), x.ncols()));
        }
        let mut out = Array2::zeros((x.nrows(), self.dim()));
        for (chunk, mut target) in x
            .axis_chunks_iter(Axis(0), LIFT_CHUNK)
            .zip(out.axis_chunks_iter_mut(Axis(0), LIFT_CHUNK))
        {
            let phi = self.dict.lift_batch(chunk)?;
            target.assign(&self.apply_lifted(phi.view())?);
        }
        Ok(out)
    }

    /// The map applied to already lifted rows, so one lift can serve several ranks.
    pub fn apply_lifted(&self, phi: ArrayView2<T>) -> Result<Array2<T>> {
        if phi.ncols() != self.lifted_len() {
            return Err(Error::shape("lifted input", self.lifted_len(), phi.ncols()));
        }
        Ok(match &self.map {
            KoopmanMap::Dense(a) => phi.dot(a),
            KoopmanMap::Factored { u, sigma, v } => (phi.dot(u) * sigma).dot(&v.t()),
        })
    }

    /// Stored parameters: the map plus center coordinates. A factored map is
    /// charged the cheaper of its factors and the dense `L x D` matrix.
    pub fn param_count(&self, accounting: ParamAccounting) -> usize {
        let (l, d) = (self.lifted_len(), self.dim());
        let map = match &self.map {
            KoopmanMap::Dense(_) => l * d,
            KoopmanMap::Factored { sigma, .. } => factored_params(l, d, sigma.len()).min(l * d),
        };
        let eps = matches!(self.dict, Dictionary::Rbf(_)) && accounting.include_epsilon;
        map + self.dict.center_param_count() + eps as usize
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dict = self.dict.to_json()?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(dict.len() as u64).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        let mut put = |shape: &[usize], values: &mut dyn Iterator<Item = T>| {
            for &n in shape {
                out.extend_from_slice(&(n as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        match &self.map {
            KoopmanMap::Dense(a) => {
                put(&[0], &mut std::iter::empty());
                put(&[a.nrows(), a.ncols()], &mut a.iter().copied());
            }
            KoopmanMap::Factored { u, sigma, v } => {
                put(&[1], &mut std::iter::empty());
                put(&[u.nrows(), u.ncols()], &mut u.iter().copied());
                put(&[sigma.len()], &mut sigma.iter().copied());
                put(&[v.nrows(), v.ncols()], &mut v.iter().copied());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Format("not a Koopman model file".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let n = r.u64()? as usize;
        let json = std::str::from_utf8(r.take(n)?).map_err(|e| Error::Format(e.to_string()))?;
        let dict = Dictionary::from_json(json)?;
        let matrix = |r: &mut ByteReader| -> Result<Array2<T>> {
            let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
            let len = rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix size overflows".into()))?;
            Ok(Array2::from_shape_vec((rows, cols), r.f64s(len)?).expect("length checked"))
        };
        let model = match r.u64()? {
            0 => Self::from_a(dict, matrix(&mut r)?)?,
            1 => {
                let u = matrix(&mut r)?;
                let s = r.u64()? as usize;
                let sigma = Array1::from_vec(r.f64s(s)?);
                let v = matrix(&mut r)?;
                Self::from_factors(dict, u, sigma, v)?
            }
            tag => return Err(Error::Format(format!("unknown map tag {tag}"))),
        };
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

/// `L s + s + D s`: the factors `U`, `σ`, `V`.
pub fn factored_params(lifted: usize, dim: usize, rank: usize) -> usize {
    lifted * rank + rank + dim * rank
}

/// Whether rank-`rank` factors cost no more than the dense map.
pub fn factors_pay_off(lifted: usize, dim: usize, rank: usize) -> bool {
    factored_params(lifted, dim, rank) <= lifted * dim
}

pub fn compression_ratio(model_params: usize, original_params: usize) -> Result<f64> {
    if original_params == 0 {
        return Err(Error::arg("original parameter count must be positive"));
    }
    Ok(model_params as f64 / original_params as f64)
}

/// Parameters of the hidden layers that the surrogate replaces.
pub fn original_intermediate_params<T: Real>(net: &Mlp<T>, taps: &Taps) -> usize {
    net.param_count(taps.inner_layers())
}

/// Mean Euclidean distance between true and predicted next states.
pub fn prediction_error<T: Real, M: StateMap<T> + ?Sized>(map: &M, snapshots: &SnapshotSet<T>) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(Error::arg("prediction error of an empty snapshot set"));
    }
    let pred = map.apply_batch(snapshots.x.view())?;
    let total: f64 = (&snapshots.y - &pred)
        .rows()
        .into_iter()
        .map(|r| norm2(r).as_f64())
        .sum();
    Ok(total / snapshots.len() as f64)
}

/// Something that advances a batch of first-tap states to last-tap states.
pub trait StateMap<T> {
    fn state_dim(&self) -> usize;
    fn apply_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>>;
}

impl<T: Real> StateMap<T> for KoopmanModel<T> {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn apply_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.predict_batch(x)
    }
}

/// The original hidden layers, as a [`StateMap`].
#[derive(Debug, Clone, Copy)]
pub struct SubNetwork<'a, T> {
    pub net: &'a Mlp<T>,
    pub taps: Taps,
}

impl<T: Real> StateMap<T> for SubNetwork<'_, T> {
    fn state_dim(&self) -> usize {
        self.net.layer_sizes()[self.taps.first + 1]
    }

    fn apply_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.net.inner_map(&self.taps, x)
    }
}

/// Input layer, a state map in place of the hidden layers, output layer.
#[derive(Debug, Clone)]
pub struct SurrogateNetwork<'a, T, M> {
    net: &'a Mlp<T>,
    taps: Taps,
    map: M,
}

impl<'a, T: Real, M: StateMap<T>> SurrogateNetwork<'a, T, M> {
    pub fn new(net: &'a Mlp<T>, taps: Taps, map: M) -> Result<Self> {
        let d = net.layer_sizes()[taps.first + 1];
        if map.state_dim() != d {
            return Err(Error::shape("surrogate state", d, map.state_dim()));
        }
        Ok(Self { net, taps, map })
    }

    pub fn map(&self) -> &M {
        &self.map
    }

    pub fn logits_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let first = self.net.apply_layers(0..self.taps.first + 1, x)?;
        let last = self.map.apply_batch(first.view())?;
        self.net.head(&self.taps, last.view())
    }

    pub fn predict_classes(&self, x: ArrayView2<T>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.nrows());
        for chunk in x.axis_chunks_iter(Axis(0), LIFT_CHUNK) {
            out.extend(self.logits_batch(chunk)?.rows().into_iter().map(argmax));
        }
        Ok(out)
    }
}

pub fn surrogate_accuracy<T: Real, M: StateMap<T>>(surrogate: &SurrogateNetwork<'_, T, M>, set: &ImageSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty set"));
    }
    Ok(accuracy_of(&surrogate.predict_classes(set.images.view())?, &set.labels))
}

/// `‖A - A_s‖_F`, for tests and reports.
pub fn truncation_error<T: Real>(full: &KoopmanModel<T>, truncated: &KoopmanModel<T>) -> T {
    frobenius((&full.a() - &truncated.a()).view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::DEFAULT_LAYER_SIZES;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
    }

    /// Pairs of the linear system `x' = diag(0.5, -0.2) x`.
    fn linear_pairs(m: usize, seed: u64) -> SnapshotSet<f64> {
        let x = random_matrix(m, 2, seed);
        let y = &x * &array![0.5, -0.2];
        SnapshotSet::new(x, y).unwrap()
    }

    /// Normal-equations oracle `(XᵀX)⁻¹ XᵀY` by Gauss-Jordan elimination.
    fn normal_equations(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let n = x.ncols();
        let mut g = x.t().dot(x);
        let mut rhs = x.t().dot(y);
        for c in 0..n {
            let p = (c..n).max_by(|&a, &b| g[[a, c]].abs().total_cmp(&g[[b, c]].abs())).unwrap();
            for j in 0..n {
                g.swap([c, j], [p, j]);
            }
            for j in 0..rhs.ncols() {
                rhs.swap([c, j], [p, j]);
            }
            let piv = g[[c, c]];
            g.row_mut(c).mapv_inplace(|v| v / piv);
            rhs.row_mut(c).mapv_inplace(|v| v / piv);
            for r in 0..n {
                if r != c {
                    let f = g[[r, c]];
                    let grow = g.row(c).to_owned();
                    let rrow = rhs.row(c).to_owned();
                    g.row_mut(r).scaled_add(-f, &grow);
                    rhs.row_mut(r).scaled_add(-f, &rrow);
                }
            }
        }
        rhs
    }

    #[test]
    fn identity_snapshots_give_identity() {
        let phi = random_matrix(30, 5, 1);
        let k = fit_koopman(phi.view(), phi.view()).unwrap();
        assert!(frobenius((&k - &Array2::<f64>::eye(5)).view()) < 1e-12);
        assert!(fit_koopman(phi.view(), random_matrix(30, 4, 1).view()).is_err());
    }

    #[test]
    fn linear_system_is_recovered() {
        let dict: Dictionary = Dictionary::monomial_total_degree(2, 1).unwrap();
        let pairs = linear_pairs(5, 2);
        let phi_x = dict.lift_batch(pairs.x.view()).unwrap();
        let phi_y = dict.lift_batch(pairs.y.view()).unwrap();
        let k = fit_koopman(phi_x.view(), phi_y.view()).unwrap();
        let block = k.slice(s![1.., 1..]);
        assert!(frobenius((&block - &array![[0.5, 0.0], [0.0, -0.2]]).view()) < 1e-12);
        assert!(cost(k.view(), phi_x.view(), phi_y.view()).unwrap() <= 1e-16 * 5.0 * 3.0);

        let b: Array2<f64> = dict.identity_selector().unwrap().dense();
        let a = extract_a(k.view(), b.view()).unwrap();
        assert_eq!(a, dict.identity_selector().unwrap().extract_columns(k.view()));

        let model = KoopmanModel::fit(dict, &pairs).unwrap();
        assert!(frobenius((&model.a() - &a).view()) < 1e-12);
        let y = model.predict(array![1.0, 1.0].view()).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-12 && (y[1] + 0.2).abs() < 1e-12);
        assert!(prediction_error(&model, &linear_pairs(20, 3)).unwrap() < 1e-8);
    }

    #[test]
    fn fit_matches_normal_equations() {
        let x = random_matrix(40, 3, 4);
        let y = x.mapv(|v| v.sin());
        let dict: Dictionary = Dictionary::monomial_total_degree(3, 2).unwrap();
        let phi = dict.lift_batch(x.view()).unwrap();
        let oracle = normal_equations(&phi, &y);
        let a = fit_projected(&dict, &SnapshotSet::new(x.clone(), y.clone()).unwrap()).unwrap();
        assert!(frobenius((&a - &oracle).view()) < 1e-8 * frobenius(oracle.view()));

        // K restricted to the identity columns is the same A
        let k = fit_koopman(phi.view(), dict.lift_batch(y.view()).unwrap().view()).unwrap();
        let ka = dict.identity_selector().unwrap().extract_columns(k.view());
        assert!(frobenius((&ka - &a).view()) < 1e-8);
    }

    #[test]
    fn fitted_k_is_optimal() {
        let phi_x = random_matrix(25, 4, 5);
        let phi_y = random_matrix(25, 4, 6);
        let k = fit_koopman(phi_x.view(), phi_y.view()).unwrap();
        let best = cost(k.view(), phi_x.view(), phi_y.view()).unwrap();
        for seed in 0..100 {
            let dk = random_matrix(4, 4, 100 + seed) * 1e-3;
            let c = cost((&k + &dk).view(), phi_x.view(), phi_y.view()).unwrap();
            assert!(best <= c, "perturbation {seed} improved the cost");
        }
        assert_eq!(cost(Array2::zeros((4, 4)).view(), phi_x.view(), Array2::zeros((25, 4)).view()).unwrap(), 0.0);
    }

    #[test]
    fn extract_a_oracle_and_errors() {
        let k = random_matrix(5, 5, 7);
        let b = random_matrix(5, 2, 8);
        let a = extract_a(k.view(), b.view()).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                let manual: f64 = (0..5).map(|t| k[[i, t]] * b[[t, j]]).sum();
                assert!((a[[i, j]] - manual).abs() < 1e-14);
            }
        }
        assert_eq!(extract_a(Array2::eye(5).view(), b.view()).unwrap(), b);
        assert!(extract_a(k.view(), random_matrix(4, 2, 0).view()).is_err());
    }

    fn rbf_model(l: usize, seed: u64) -> KoopmanModel<f64> {
        let x = random_matrix(200, 6, seed);
        let pairs = SnapshotSet::new(x.clone(), x.mapv(|v| (2.0 * v).tanh())).unwrap();
        let dict = Dictionary::rbf(l, x.view(), 0.5, seed).unwrap();
        KoopmanModel::fit(dict, &pairs).unwrap()
    }

    #[test]
    fn eckart_young_and_full_rank() {
        let model = rbf_model(30, 9);
        let full = thin_svd(model.a().view()).unwrap();
        for rank in 1..=6 {
            let t = model.truncate_svd(rank).unwrap();
            let err = truncation_error(&model, &t).powi(2);
            let tail: f64 = full.s.iter().skip(rank).map(|v| v * v).sum();
            assert!((err - tail).abs() < 1e-10 * (1.0 + tail));
            let KoopmanMap::Factored { u, v, .. } = t.map() else { unreachable!() };
            assert!(frobenius((&u.t().dot(u) - &Array2::<f64>::eye(rank)).view()) < 1e-10);
            assert!(frobenius((&v.t().dot(v) - &Array2::<f64>::eye(rank)).view()) < 1e-10);
        }
        let t = model.truncate_svd(6).unwrap();
        let probes = random_matrix(10, 6, 10);
        let diff = &model.predict_batch(probes.view()).unwrap() - &t.predict_batch(probes.view()).unwrap();
        assert!(frobenius(diff.view()) < 1e-10);
        assert!(model.truncate_svd(0).is_err());
        assert!(model.truncate_svd(7).is_err());
    }

    #[test]
    fn rank_one_reconstruction() {
        let dict: Dictionary = Dictionary::monomial_total_degree(2, 1).unwrap();
        let u = array![[1.0], [2.0], [-1.0]];
        let v = array![[3.0], [0.5]];
        let a = u.dot(&v.t());
        let model = KoopmanModel::from_a(dict, a.clone()).unwrap();
        assert!(frobenius((&model.truncate_svd(1).unwrap().a() - &a).view()) < 1e-12);
    }

    #[test]
    fn compressed_predict_matches_dense_truncation() {
        let model = rbf_model(25, 11);
        let t = model.truncate_svd(3).unwrap();
        let a_s = t.a();
        for p in random_matrix(5, 6, 12).rows() {
            let phi = model.dictionary().lift(p).unwrap();
            let dense = a_s.t().dot(&phi);
            assert!(frobenius((&dense - &t.predict(p).unwrap()).insert_axis(Axis(0)).view()) < 1e-10);
        }
    }

    #[test]
    fn prediction_error_is_monotone_in_rank_on_training_pairs() {
        let x = random_matrix(300, 6, 13);
        let pairs = SnapshotSet::new(x.clone(), x.mapv(|v| v.powi(3) - v)).unwrap();
        let dict = Dictionary::monomial_total_degree(6, 3).unwrap();
        let model = KoopmanModel::fit(dict, &pairs).unwrap();
        let svd = model.svd().unwrap();
        // the lifted least-squares residual, not the mean norm, is what truncation orders
        let residual = |m: &KoopmanModel<f64>| {
            let d = &pairs.y - &m.predict_batch(pairs.x.view()).unwrap();
            d.iter().map(|v| v * v).sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for rank in 1..=6 {
            let r = residual(&model.with_svd(&svd, rank).unwrap());
            assert!(r <= prev * (1.0 + 1e-12));
            prev = r;
        }
        assert!((prev - residual(&model)).abs() < 1e-8 * (1.0 + prev));
    }

    #[test]
    fn parameter_accounting() {
        let model = rbf_model(20, 14);
        let with_centers = 20 * 6 + 14 * 6;
        assert_eq!(model.param_count(ParamAccounting::default()), with_centers);
        assert_eq!(
            model.param_count(ParamAccounting { include_epsilon: true }),
            with_centers + 1
        );
        let t = model.truncate_svd(2).unwrap();
        assert_eq!(t.param_count(ParamAccounting::default()), 20 * 2 + 2 + 6 * 2 + 14 * 6);
        let t = model.truncate_svd(6).unwrap();
        assert_eq!(t.param_count(ParamAccounting::default()), with_centers);

        // the reference configurations: D = 20, original 1680
        assert_eq!(231 * 20 + 211 * 20, 8840);
        assert!((compression_ratio(8840, 1680).unwrap() - 5.2619).abs() < 1e-4);
        let l40 = factored_params(40, 20, 10).min(40 * 20) + 20 * 20;
        assert_eq!(l40, 1010);
        assert!((compression_ratio(l40, 1680).unwrap() - 0.6012).abs() < 1e-4);
        assert_eq!(factored_params(21, 20, 20).min(21 * 20), 420);
        assert!(!factors_pay_off(21, 20, 20));
        assert!(compression_ratio(1, 0).is_err());
        assert_eq!(compression_ratio(1680, 1680).unwrap(), 1.0);

        let net: Mlp = Mlp::new(&DEFAULT_LAYER_SIZES, 0).unwrap();
        assert_eq!(original_intermediate_params(&net, &Taps::standard(&net).unwrap()), 1680);
    }

    #[test]
    fn surrogate_with_true_sub_network_matches_original() {
        let net: Mlp = Mlp::new(&DEFAULT_LAYER_SIZES, 3).unwrap();
        let taps = Taps::standard(&net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Array2::from_shape_simple_fn((64, 784), || rng.random_range(0.0..1.0));
        let labels = (0..64).map(|i| (i % 10) as u8).collect();
        let set = ImageSet::new(images, labels, "r").unwrap();
        let sur = SurrogateNetwork::new(&net, taps, SubNetwork { net: &net, taps }).unwrap();
        assert_eq!(sur.predict_classes(set.images.view()).unwrap(), net.predict_classes(set.images.view()).unwrap());
        assert_eq!(
            surrogate_accuracy(&sur, &set).unwrap(),
            crate::mlp::evaluate(&net, &set).unwrap()
        );

        // scaling every logit by a positive constant keeps the argmax
        let mut scaled = net.clone();
        let k = net.num_layers() - 1;
        *scaled.weight_mut(k) *= 3.0;
        *scaled.bias_mut(k) *= 3.0;
        let sur2 = SurrogateNetwork::new(&scaled, taps, SubNetwork { net: &net, taps }).unwrap();
        assert_eq!(surrogate_accuracy(&sur2, &set).unwrap(), surrogate_accuracy(&sur, &set).unwrap());

        let wrong = rbf_model(20, 1);
        assert!(SurrogateNetwork::new(&net, taps, wrong).is_err());
    }

    #[test]
    fn identity_dynamics_model() {
        let dict: Dictionary = Dictionary::monomial_total_degree(3, 2).unwrap();
        let b: Array2<f64> = dict.identity_selector().unwrap().dense();
        let model = KoopmanModel::from_a(dict, b).unwrap();
        let x = array![0.3, -1.0, 2.0];
        assert_eq!(model.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn serialization_preserves_predictions() {
        let model = rbf_model(25, 15);
        let probes = random_matrix(8, 6, 16);
        for m in [model.clone(), model.truncate_svd(4).unwrap()] {
            let back = KoopmanModel::<f64>::from_bytes(&m.to_bytes().unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.predict_batch(probes.view()).unwrap(), m.predict_batch(probes.view()).unwrap());
        }
        let mut bytes = model.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(KoopmanModel::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn empty_snapshots_are_rejected() {
        let model = rbf_model(20, 1);
        let empty = SnapshotSet::new(Array2::zeros((0, 6)), Array2::zeros((0, 6))).unwrap();
        assert!(prediction_error(&model, &empty).is_err());
        assert!(fit_projected(model.dictionary(), &empty).is_err());
    }

    proptest! {
        #[test]
        fn truncation_error_nonincreasing(seed in any::<u64>()) {
            let model = rbf_model(15, seed);
            let mut prev = f64::INFINITY;
            for rank in 1..=6 {
                let e = truncation_error(&model, &model.truncate_svd(rank).unwrap());
                prop_assert!(e <= prev + 1e-12);
                prev = e;
            }
        }
    }
}
