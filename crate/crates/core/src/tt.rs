//! Tensor trains for the per-variable monomial dictionary, whose `(N+1)^D`
//! observables cannot be stored densely.
//!
//! A snapshot matrix is lifted into a train with one core per variable and
//! a trailing core over the sample index. Prediction contracts the lifted
//! query against the pseudoinverse train down to `M` sample weights, then
//! pushes those through the output train. The Koopman operator itself,
//! whose ranks would be products of the two trains' ranks, is never built.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, Axis, IxDyn};

use crate::edmd::StateMap;
use crate::error::{Error, PathContext, Result};
use crate::linalg::{cumulative_rank, numerical_rank, thin_svd};
use crate::mlp::ByteReader;
use crate::real::Real;

pub const DEFAULT_TT_TOL: f64 = 0.999;
/// Relative cutoff for singular values inverted at the data interface.
pub const PINV_CUTOFF: f64 = 1e-12;
/// Inputs are divided by this many standard deviations before lifting.
pub const DEFAULT_TT_SPREAD: f64 = 8.0;

const TT_MAGIC: &[u8; 8] = b"KNETTT\0\0";
const TT_VERSION: u32 = 2;

/// Cores `T^(d)` of shape `(r_{d-1}, n_d, r_d)` with `r_0 = r_D = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TtTensor<T = f64> {
    cores: Vec<Array3<T>>,
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol <= 1.0) {
        return Err(Error::arg(format!("truncation tolerance {tol} not in (0, 1]")));
    }
    Ok(())
}

impl<T: Real> TtTensor<T> {
    pub fn new(cores: Vec<Array3<T>>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::arg("a tensor train needs at least one core"));
        }
        if cores[0].dim().0 != 1 || cores.last().unwrap().dim().2 != 1 {
            return Err(Error::arg("boundary ranks must be 1"));
        }
        for (d, pair) in cores.windows(2).enumerate() {
            if pair[0].dim().2 != pair[1].dim().0 {
                return Err(Error::arg(format!(
                    "rank mismatch between cores {d} and {}: {} vs {}",
                    d + 1,
                    pair[0].dim().2,
                    pair[1].dim().0
                )));
            }
        }
        if cores.iter().any(|c| c.dim().1 == 0 || c.dim().2 == 0) {
            return Err(Error::arg("empty core"));
        }
        Ok(Self { cores })
    }

    /// Sequential SVD decomposition, truncating each split at cumulative
    /// squared singular-value contribution `tol`.
    pub fn from_dense(tensor: &ArrayD<T>, tol: f64) -> Result<Self> {
        check_tol(tol)?;
        let shape = tensor.shape().to_vec();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::arg("cannot decompose an empty tensor"));
        }
        let total: usize = shape.iter().product();
        let flat: Vec<T> = tensor.as_standard_layout().iter().copied().collect();
        let mut rest = Array2::from_shape_vec((1, total), flat).expect("sizes agree");
        let mut cores = Vec::with_capacity(shape.len());
        let mut r = 1;
        for &n in &shape[..shape.len() - 1] {
            let cols = rest.len() / (r * n);
            let c = rest.into_shape_with_order((r * n, cols)).expect("contiguous");
            let svd = thin_svd(c.view())?;
            let keep = cumulative_rank(svd.s.view(), tol, true).max(1);
            let core = svd.u.slice(s![.., ..keep]).to_owned();
            cores.push(core.into_shape_with_order((r, n, keep)).expect("contiguous"));
            rest = &svd.vt.slice(s![..keep, ..]) * &svd.s.slice(s![..keep]).insert_axis(Axis(1));
            rest = rest.as_standard_layout().into_owned();
            r = keep;
        }
        let n = *shape.last().unwrap();
        cores.push(rest.into_shape_with_order((r, n, 1)).expect("contiguous"));
        Self::new(cores)
    }

    pub fn cores(&self) -> &[Array3<T>] {
        &self.cores
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    /// `(r_0, .., r_D)`.
    pub fn ranks(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.cores.iter().map(|c| c.dim().2)).collect()
    }

    pub fn mode_sizes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.dim().1).collect()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    /// Product of the core slices at `index`.
    pub fn element(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.order() {
            return Err(Error::shape("tensor index", self.order(), index.len()));
        }
        let mut v = Array1::from_elem(1, T::one());
        for (core, &i) in self.cores.iter().zip(index) {
            if i >= core.dim().1 {
                return Err(Error::arg(format!("index {i} out of mode size {}", core.dim().1)));
            }
            v = v.dot(&core.index_axis(Axis(1), i));
        }
        Ok(v[0])
    }

    /// Dense tensor, refused when it would exceed `max_elements`.
    pub fn reconstruct(&self, max_elements: usize) -> Result<ArrayD<T>> {
        let modes = self.mode_sizes();
        let total = modes.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
        match total {
            Some(t) if t <= max_elements => {}
            _ => {
                return Err(Error::arg(format!(
                    "dense tensor of shape {modes:?} exceeds the budget of {max_elements} elements"
                )))
            }
        }
        // running (prefix, rank) matrix
        let mut acc = Array2::from_elem((1, 1), T::one());
        for core in &self.cores {
            let (r, n, r2) = core.dim();
            let mat = core.view().into_shape_with_order((r, n * r2)).expect("contiguous");
            let next = acc.dot(&mat);
            let rows = acc.nrows() * n;
            acc = next.into_shape_with_order((rows, r2)).expect("contiguous");
        }
        Ok(acc.into_shape_with_order(IxDyn(&modes)).expect("sizes agree"))
    }

    pub fn memory_bytes(&self) -> usize {
        self.cores.iter().map(|c| c.len() * 8).sum()
    }

    fn write(&self, out: &mut Vec<u8>, tol: f64) {
        out.extend_from_slice(&(self.order() as u64).to_le_bytes());
        out.extend_from_slice(&tol.to_le_bytes());
        for n in self.mode_sizes() {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for r in self.ranks() {
            out.extend_from_slice(&(r as u64).to_le_bytes());
        }
        for core in &self.cores {
            for &v in core.iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }

    fn read(r: &mut ByteReader) -> Result<(Self, f64)> {
        let order = r.u64()? as usize;
        let tol = r.f64()?;
        let modes = (0..order).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let ranks = (0..=order).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut cores = Vec::with_capacity(order);
        for d in 0..order {
            let shape = (ranks[d], modes[d], ranks[d + 1]);
            let len = shape
                .0
                .checked_mul(shape.1)
                .and_then(|v| v.checked_mul(shape.2))
                .ok_or_else(|| Error::Format("core size overflows".into()))?;
            cores.push(Array3::from_shape_vec(shape, r.f64s(len)?).expect("length checked"));
        }
        Ok((Self::new(cores)?, tol))
    }

    pub fn to_bytes(&self, tol: f64) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TT_MAGIC);
        out.extend_from_slice(&TT_VERSION.to_le_bytes());
        self.write(&mut out, tol);
        out
    }

    /// Inverse of [`Self::to_bytes`]; returns the tensor and its tolerance.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, f64)> {
        let mut r = ByteReader::new(bytes);
        read_header(&mut r)?;
        let out = Self::read(&mut r)?;
        r.finish()?;
        Ok(out)
    }
}

fn read_header(r: &mut ByteReader) -> Result<()> {
    if r.take(8)? != TT_MAGIC {
        return Err(Error::Format("not a tensor-train file".into()));
    }
    let version = r.u32()?;
    if version != TT_VERSION {
        return Err(Error::Format(format!("unsupported tensor-train version {version}")));
    }
    Ok(())
}

/// `(1, x, x², .., x^n_max)`.
fn powers<T: Real>(x: T, n_max: u32) -> impl Iterator<Item = T> {
    std::iter::successors(Some(T::one()), move |&p| Some(p * x)).take(n_max as usize + 1)
}

/// Per-variable monomial lifts of `M` samples as a train over modes
/// `(N+1, .., N+1, M)`; the last core indexes the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TtSnapshotLift<T = f64> {
    pub tt: TtTensor<T>,
    pub n_max: u32,
    pub tol: f64,
}

impl<T: Real> TtSnapshotLift<T> {
    pub fn dim(&self) -> usize {
        self.tt.order() - 1
    }

    pub fn samples(&self) -> usize {
        self.tt.cores.last().unwrap().dim().1
    }

    /// Dense lift of sample `i` (small dictionaries only).
    pub fn sample(&self, i: usize, max_elements: usize) -> Result<Array1<T>> {
        if i >= self.samples() {
            return Err(Error::arg(format!("sample {i} out of {}", self.samples())));
        }
        let d = self.dim();
        let mut cores = self.tt.cores[..d].to_vec();
        let data = self.tt.cores[d].slice(s![.., i..i + 1, ..]).to_owned();
        // fold the selected sample column into the last dictionary core
        let (r, n, rd) = cores[d - 1].dim();
        let folded = cores[d - 1]
            .view()
            .into_shape_with_order((r * n, rd))
            .expect("contiguous")
            .dot(&data.into_shape_with_order((rd, 1)).expect("contiguous"));
        cores[d - 1] = folded.into_shape_with_order((r, n, 1)).expect("contiguous");
        let dense = TtTensor::new(cores)?.reconstruct(max_elements)?;
        Ok(Array1::from_iter(dense.iter().copied()))
    }
}

/// Lifts the rows of `x` core by core. Each step multiplies the carried
/// `(r, M)` factor by the sample powers of one variable and truncates the
/// `(r (N+1), M)` result by SVD, so no dense lift is ever formed.
pub fn tt_lift_batch<T: Real>(x: ArrayView2<T>, n_max: u32, tol: f64) -> Result<TtSnapshotLift<T>> {
    check_tol(tol)?;
    let (m, d) = x.dim();
    if m == 0 {
        return Err(Error::arg("no samples to lift"));
    }
    if d == 0 || n_max == 0 {
        return Err(Error::arg("lift needs D >= 1 and N_max >= 1"));
    }
    let n = n_max as usize + 1;
    let mut carry = Array2::from_elem((1, m), T::one());
    let mut cores = Vec::with_capacity(d + 1);
    for var in 0..d {
        let r = carry.nrows();
        let mut z = Array2::<T>::zeros((r * n, m));
        for (i, &xi) in x.column(var).iter().enumerate() {
            for (k, p) in powers(xi, n_max).enumerate() {
                for a in 0..r {
                    z[[a * n + k, i]] = carry[[a, i]] * p;
                }
            }
        }
        let svd = thin_svd(z.view())?;
        let keep = cumulative_rank(svd.s.view(), tol, true).max(1);
        let core = svd.u.slice(s![.., ..keep]).to_owned();
        cores.push(core.into_shape_with_order((r, n, keep)).expect("contiguous"));
        carry = &svd.vt.slice(s![..keep, ..]) * &svd.s.slice(s![..keep]).insert_axis(Axis(1));
    }
    let r = carry.nrows();
    cores.push(carry.as_standard_layout().into_owned().into_shape_with_order((r, m, 1)).expect("contiguous"));
    Ok(TtSnapshotLift {
        tt: TtTensor::new(cores)?,
        n_max,
        tol,
    })
}

/// `Φ(X)⁺` for a lifted snapshot train `Φ(X)` (L x M).
///
/// Dictionary cores are left-orthonormal, so `Φ(X) = U W` with `Uᵀ U = I`.
/// With `W = P S Qᵀ`, `Φ(X)⁺ = Q S⁻¹ Pᵀ Uᵀ`; only `U`'s cores and the
/// `(r, M)` matrix `P S⁻¹ Qᵀ` are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TtPseudoInverse<T = f64> {
    /// Left-orthonormal dictionary cores.
    pub cores: Vec<Array3<T>>,
    /// `P S⁻¹ Qᵀ`, shape `(r_D, M)`.
    pub data: Array2<T>,
    pub n_max: u32,
    pub retained: usize,
}

pub fn tt_pseudoinverse<T: Real>(lift: &TtSnapshotLift<T>) -> Result<TtPseudoInverse<T>> {
    let d = lift.dim();
    let mut cores: Vec<Array3<T>> = lift.tt.cores[..d].to_vec();
    let data_core = &lift.tt.cores[d];
    let (rd, m, _) = data_core.dim();
    let mut data = data_core.view().into_shape_with_order((rd, m)).expect("contiguous").to_owned();

    // left-orthogonalize: core_d = Q R, push R into the next core
    for k in 0..d {
        let (r, n, r2) = cores[k].dim();
        let mat = cores[k].view().into_shape_with_order((r * n, r2)).expect("contiguous").to_owned();
        let (q, rmat) = orthonormal_split(mat)?;
        let kept = q.ncols();
        cores[k] = q.into_shape_with_order((r, n, kept)).expect("contiguous");
        if k + 1 < d {
            let (_, n2, r3) = cores[k + 1].dim();
            let next = cores[k + 1].view().into_shape_with_order((r2, n2 * r3)).expect("contiguous");
            cores[k + 1] = rmat.dot(&next).into_shape_with_order((kept, n2, r3)).expect("contiguous");
        } else {
            data = rmat.dot(&data);
        }
    }

    let svd = thin_svd(data.view())?;
    let keep = numerical_rank(svd.s.view(), T::of(PINV_CUTOFF));
    if keep == 0 {
        return Err(Error::Degenerate("every singular value of the lifted snapshots is below the cutoff".into()));
    }
    // P S⁻¹ Qᵀ
    let p = svd.u.slice(s![.., ..keep]);
    let inv = svd.s.slice(s![..keep]).mapv(|v| T::one() / v);
    let qt = svd.vt.slice(s![..keep, ..]);
    let data = (&p * &inv.insert_axis(Axis(0))).dot(&qt);
    Ok(TtPseudoInverse {
        cores,
        data,
        n_max: lift.n_max,
        retained: keep,
    })
}

/// `A = Q R` with orthonormal `Q` of `min(rows, cols)` columns, taken from
/// `A = U (S Vᵀ)` so rank-deficient cores need no special casing.
fn orthonormal_split<T: Real>(a: Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
    let svd = thin_svd(a.view())?;
    let r = &svd.vt * &svd.s.view().insert_axis(Axis(1));
    Ok((svd.u, r))
}

impl<T: Real> TtPseudoInverse<T> {
    pub fn dim(&self) -> usize {
        self.cores.len()
    }

    /// `Uᵀ Φ(x)`: sweep the lifted query through the orthonormal cores.
    fn project(&self, x: ArrayView1<T>, peak: &mut usize) -> Array1<T> {
        contract_rank_one(&self.cores, x, self.n_max, peak)
    }

    /// Sample weights `w = Φ(X)⁺ Φ(x)` (length `M`).
    pub fn weights(&self, x: ArrayView1<T>) -> Array1<T> {
        let mut peak = 1;
        let v = self.project(x, &mut peak);
        self.data.t().dot(&v)
    }

    pub fn memory_bytes(&self) -> usize {
        (self.cores.iter().map(|c| c.len()).sum::<usize>() + self.data.len()) * 8
    }
}

/// Contracts `cores` with the rank-1 train of `(1, x_d, .., x_d^N)`.
fn contract_rank_one<T: Real>(cores: &[Array3<T>], x: ArrayView1<T>, n_max: u32, peak: &mut usize) -> Array1<T> {
    let mut v = Array1::from_elem(1, T::one());
    for (core, &xd) in cores.iter().zip(x.iter()) {
        let (r, n, r2) = core.dim();
        let p: Vec<T> = powers(xd, n_max).collect();
        let mut u = Array1::zeros(r * n);
        for a in 0..r {
            for k in 0..n {
                u[a * n + k] = v[a] * p[k];
            }
        }
        let mat = core.view().into_shape_with_order((r * n, r2)).expect("contiguous");
        v = mat.t().dot(&u);
        *peak = (*peak).max(r * n).max(r2);
    }
    v
}

/// Per-variable affine map `x ↦ (x − offset) / scale`.
///
/// Monomial powers of raw hidden states span many orders of magnitude, and
/// energy-based truncation then keeps high powers of a few large
/// coordinates over the degree-1 terms. Shrinking every variable well
/// inside `[-1, 1]` makes degree-k terms decay like `spread^-k`, so
/// truncation keeps low total degrees first. The per-variable monomial
/// span is unchanged by the map.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T = f64> {
    pub offset: Array1<T>,
    pub scale: Array1<T>,
}

impl<T: Real> Standardizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: Array1::zeros(dim),
            scale: Array1::ones(dim),
        }
    }

    /// Column means and `spread` population standard deviations; constant
    /// columns are only centered.
    pub fn fit(x: ArrayView2<T>, spread: f64) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::arg("no samples to standardize"));
        }
        if !(spread > 0.0) {
            return Err(Error::arg("spread must be positive"));
        }
        let offset = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x.std_axis(Axis(0), T::zero()).mapv(|s| {
            if s > T::zero() {
                s * T::of(spread)
            } else {
                T::one()
            }
        });
        Ok(Self { offset, scale })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn is_identity(&self) -> bool {
        self.offset.iter().all(|v| *v == T::zero()) && self.scale.iter().all(|v| *v == T::one())
    }

    pub fn forward(&self, x: ArrayView1<T>) -> Array1<T> {
        (&x - &self.offset) / &self.scale
    }

    pub fn forward_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        (&x - &self.offset) / &self.scale
    }

    pub fn inverse(&self, z: ArrayView1<T>) -> Array1<T> {
        &z * &self.scale + &self.offset
    }

    fn write(&self, out: &mut Vec<u8>) {
        for v in self.offset.iter().chain(self.scale.iter()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }

    fn read(r: &mut ByteReader, dim: usize) -> Result<Self> {
        Ok(Self {
            offset: Array1::from(r.f64s::<T>(dim)?),
            scale: Array1::from(r.f64s::<T>(dim)?),
        })
    }
}

/// Predicts `Bᵀ Φ(Y) Φ(X)⁺ Φ(x)` without assembling the Koopman train,
/// with optional standardization of inputs and outputs around the lifts.
#[derive(Debug, Clone, PartialEq)]
pub struct TtKoopmanPredictor<T = f64> {
    pinv: TtPseudoInverse<T>,
    lift_y: TtSnapshotLift<T>,
    /// Row `j` is the output train's dictionary part at the exponent `e_j`.
    identity_rows: Array2<T>,
    input: Standardizer<T>,
    output: Standardizer<T>,
}

/// Largest intermediate vector seen during one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContractionTrace {
    pub peak_len: usize,
    pub samples: usize,
}

impl<T: Real> TtKoopmanPredictor<T> {
    pub fn fit(x: ArrayView2<T>, y: ArrayView2<T>, n_max: u32, tol: f64) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::shape("snapshot Y", x.dim(), y.dim()));
        }
        let lift_x = tt_lift_batch(x, n_max, tol)?;
        let pinv = tt_pseudoinverse(&lift_x)?;
        let lift_y = tt_lift_batch(y, n_max, tol)?;
        Self::from_parts(pinv, lift_y)
    }

    /// [`fit`](Self::fit) on standardized snapshots (see [`Standardizer`]);
    /// predictions are mapped back to the original coordinates.
    pub fn fit_standardized(x: ArrayView2<T>, y: ArrayView2<T>, n_max: u32, tol: f64, spread: f64) -> Result<Self> {
        if x.dim() != y.dim() {
            return Err(Error::shape("snapshot Y", x.dim(), y.dim()));
        }
        let input = Standardizer::fit(x, spread)?;
        let output = Standardizer::fit(y, spread)?;
        let inner = Self::fit(input.forward_batch(x).view(), output.forward_batch(y).view(), n_max, tol)?;
        inner.with_standardizers(input, output)
    }

    pub fn with_standardizers(mut self, input: Standardizer<T>, output: Standardizer<T>) -> Result<Self> {
        if input.dim() != self.dim() || output.dim() != self.dim() {
            return Err(Error::arg("standardizer dimension differs from the predictor's"));
        }
        self.input = input;
        self.output = output;
        Ok(self)
    }

    pub fn input_standardizer(&self) -> &Standardizer<T> {
        &self.input
    }

    pub fn output_standardizer(&self) -> &Standardizer<T> {
        &self.output
    }

    pub fn from_parts(pinv: TtPseudoInverse<T>, lift_y: TtSnapshotLift<T>) -> Result<Self> {
        let d = lift_y.dim();
        if pinv.dim() != d || pinv.data.ncols() != lift_y.samples() || pinv.n_max != lift_y.n_max {
            return Err(Error::arg("pseudoinverse and output trains disagree on D, M or N_max"));
        }
        let cores = &lift_y.tt.cores[..d];
        let rd = cores[d - 1].dim().2;
        let mut identity_rows = Array2::zeros((d, rd));
        for j in 0..d {
            let mut v = Array1::from_elem(1, T::one());
            for (k, core) in cores.iter().enumerate() {
                v = v.dot(&core.index_axis(Axis(1), (k == j) as usize));
            }
            identity_rows.row_mut(j).assign(&v);
        }
        Ok(Self {
            pinv,
            lift_y,
            identity_rows,
            input: Standardizer::identity(d),
            output: Standardizer::identity(d),
        })
    }

    pub fn dim(&self) -> usize {
        self.lift_y.dim()
    }

    pub fn pseudoinverse(&self) -> &TtPseudoInverse<T> {
        &self.pinv
    }

    pub fn output_lift(&self) -> &TtSnapshotLift<T> {
        &self.lift_y
    }

    pub fn predict_traced(&self, x: ArrayView1<T>) -> Result<(Array1<T>, ContractionTrace)> {
        if x.len() != self.dim() {
            return Err(Error::shape("prediction input", self.dim(), x.len()));
        }
        let mut peak = 1;
        let x = self.input.forward(x);
        let v = self.pinv.project(x.view(), &mut peak);
        let w = self.pinv.data.t().dot(&v);
        let data = &self.lift_y.tt.cores[self.dim()];
        let (rd, m, _) = data.dim();
        let t = data.view().into_shape_with_order((rd, m)).expect("contiguous").dot(&w);
        let y = self.output.inverse(self.identity_rows.dot(&t).view());
        Ok((
            y,
            ContractionTrace {
                peak_len: peak.max(rd),
                samples: m,
            },
        ))
    }

    pub fn predict(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        self.predict_traced(x).map(|(y, _)| y)
    }

    pub fn memory_report(&self) -> TtMemoryReport {
        TtMemoryReport {
            pinv_bytes: self.pinv.memory_bytes(),
            output_bytes: self.lift_y.tt.memory_bytes(),
            pinv_ranks: std::iter::once(1)
                .chain(self.pinv.cores.iter().map(|c| c.dim().2))
                .collect(),
            output_ranks: self.lift_y.tt.ranks(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TT_MAGIC);
        out.extend_from_slice(&TT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.pinv.n_max as u64).to_le_bytes());
        out.extend_from_slice(&(self.pinv.retained as u64).to_le_bytes());
        // the pseudoinverse as a train whose last core is the data matrix
        let (rd, m) = self.pinv.data.dim();
        let mut cores = self.pinv.cores.clone();
        cores.push(self.pinv.data.clone().into_shape_with_order((rd, m, 1)).expect("contiguous"));
        TtTensor { cores }.write(&mut out, PINV_CUTOFF);
        self.lift_y.tt.write(&mut out, self.lift_y.tol);
        self.input.write(&mut out);
        self.output.write(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        read_header(&mut r)?;
        let n_max = r.u64()? as u32;
        let retained = r.u64()? as usize;
        let (pinv_tt, _) = TtTensor::<T>::read(&mut r)?;
        let (out_tt, tol) = TtTensor::<T>::read(&mut r)?;
        let d = out_tt.order().saturating_sub(1);
        let input = Standardizer::read(&mut r, d)?;
        let output = Standardizer::read(&mut r, d)?;
        r.finish()?;
        let mut cores = pinv_tt.cores;
        let last = cores.pop().expect("nonempty");
        let (rd, m, _) = last.dim();
        let pinv = TtPseudoInverse {
            cores,
            data: last.into_shape_with_order((rd, m)).expect("contiguous"),
            n_max,
            retained,
        };
        Self::from_parts(pinv, TtSnapshotLift { tt: out_tt, n_max, tol })?.with_standardizers(input, output)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).at(path)?)
    }
}

impl<T: Real> StateMap<T> for TtKoopmanPredictor<T> {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn apply_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (row, mut target) in x.rows().into_iter().zip(out.rows_mut()) {
            target.assign(&self.predict(row)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TtMemoryReport {
    pub pinv_bytes: usize,
    pub output_bytes: usize,
    pub pinv_ranks: Vec<usize>,
    pub output_ranks: Vec<usize>,
}

impl TtMemoryReport {
    pub fn total_bytes(&self) -> usize {
        self.pinv_bytes + self.output_bytes
    }
}
