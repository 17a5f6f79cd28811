//! Dense factorizations and the SVD-based minimum-norm least-squares solver.
//!
//! `faer` does the heavy lifting; [`Factorize`] is the narrow bridge so that
//! the generic code never needs its scalar traits in scope.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::qr::no_pivoting::factor as qr;
use faer::{MatMut, MatRef, Par};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};

use crate::error::{Error, Result};
use crate::real::Real;

pub trait Factorize: Sized {
    /// Thin SVD `a = u diag(s) vt`; `s` is nonincreasing.
    fn svd_factors(a: ArrayView2<Self>) -> Result<(Array2<Self>, Array1<Self>, Array2<Self>)>;

    /// Householder QR of a column-major matrix, in place. On return the upper
    /// triangle holds `R`; the reflectors below the diagonal are garbage to callers.
    fn qr_in_place(a: &mut Array2<Self>) -> Result<()>;
}

macro_rules! impl_factorize {
    ($t:ty) => {
        impl Factorize for $t {
            fn svd_factors(a: ArrayView2<$t>) -> Result<(Array2<$t>, Array1<$t>, Array2<$t>)> {
                let (m, n) = a.dim();
                let owned = a.as_standard_layout();
                let view = MatRef::from_row_major_slice(owned.as_slice().expect("standard layout"), m, n);
                let svd = view
                    .thin_svd()
                    .map_err(|e| Error::Linalg(format!("svd did not converge: {e:?}")))?;
                let k = m.min(n);
                let (uf, vf, sf) = (svd.U(), svd.V(), svd.S().column_vector());
                let u = Array2::from_shape_fn((m, k), |(i, j)| uf[(i, j)]);
                let s = Array1::from_shape_fn(k, |i| sf[i]);
                let vt = Array2::from_shape_fn((k, n), |(i, j)| vf[(j, i)]);
                Ok((u, s, vt))
            }

            fn qr_in_place(a: &mut Array2<$t>) -> Result<()> {
                let (m, n) = a.dim();
                if !a.t().is_standard_layout() {
                    return Err(Error::Linalg("qr expects a contiguous column-major matrix".into()));
                }
                let data = a.as_slice_memory_order_mut().expect("contiguous");
                let view = MatMut::from_column_major_slice_mut(data, m, n);
                let block = qr::recommended_block_size::<$t>(m, n);
                let mut coeff = faer::Mat::<$t>::zeros(block, m.min(n));
                let par = Par::Seq;
                let mut mem = MemBuffer::new(qr::qr_in_place_scratch::<$t>(m, n, block, par, Default::default()));
                qr::qr_in_place(view, coeff.as_mut(), par, MemStack::new(&mut mem), Default::default());
                Ok(())
            }
        }
    };
}

impl_factorize!(f32);
impl_factorize!(f64);

/// Thin singular value decomposition with `k = min(m, n)` triplets.
#[derive(Debug, Clone)]
pub struct ThinSvd<T> {
    pub u: Array2<T>,
    pub s: Array1<T>,
    pub vt: Array2<T>,
}

impl<T: Real> ThinSvd<T> {
    pub fn reconstruct(&self) -> Array2<T> {
        let us = &self.u * &self.s.view().insert_axis(Axis(0));
        us.dot(&self.vt)
    }
}

pub fn thin_svd<T: Real>(a: ArrayView2<T>) -> Result<ThinSvd<T>> {
    let (m, n) = a.dim();
    let k = m.min(n);
    if k == 0 {
        return Ok(ThinSvd {
            u: Array2::zeros((m, 0)),
            s: Array1::zeros(0),
            vt: Array2::zeros((0, n)),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("matrix has non-finite entries".into()));
    }
    let (u, s, vt) = T::svd_factors(a)?;
    Ok(ThinSvd { u, s, vt })
}

/// Relative singular-value cutoff used by every pseudoinverse in the crate.
pub fn default_rcond<T: Real>() -> T {
    T::of(1e-10).max(T::of(16.0) * T::epsilon())
}

/// Number of singular values strictly above `rcond * s_max`.
pub fn numerical_rank<T: Real>(s: ArrayView1<T>, rcond: T) -> usize {
    let smax = s.iter().fold(T::zero(), |acc, &v| acc.max(v));
    if smax <= T::zero() {
        return 0;
    }
    let cut = rcond * smax;
    s.iter().filter(|&&v| v > cut).count()
}

/// Smallest `r >= 1` whose leading singular values reach `tol` of the total
/// contribution. Contribution is `sigma^2` when `squared`, else `sigma`.
pub fn cumulative_rank<T: Real>(s: ArrayView1<T>, tol: f64, squared: bool) -> usize {
    if s.is_empty() {
        return 0;
    }
    let weight = |v: T| {
        let v = v.as_f64();
        if squared {
            v * v
        } else {
            v
        }
    };
    let total: f64 = s.iter().map(|&v| weight(v)).sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, &v) in s.iter().enumerate() {
        acc += weight(v);
        if acc >= tol * total {
            return i + 1;
        }
    }
    s.len()
}

/// Moore-Penrose pseudoinverse; singular values at or below `rcond * s_max` are dropped.
pub fn pinv<T: Real>(a: ArrayView2<T>, rcond: T) -> Result<Array2<T>> {
    let (m, n) = a.dim();
    let svd = thin_svd(a)?;
    let r = numerical_rank(svd.s.view(), rcond);
    let mut out = Array2::zeros((n, m));
    if r == 0 {
        return Ok(out);
    }
    let v = svd.vt.slice(s![..r, ..]).reversed_axes();
    let inv_s = svd.s.slice(s![..r]).mapv(|x| T::one() / x);
    let ut = svd.u.slice(s![.., ..r]).reversed_axes();
    let scaled = &ut * &inv_s.view().insert_axis(Axis(1));
    ndarray::linalg::general_mat_mul(T::one(), &v, &scaled, T::zero(), &mut out);
    Ok(out)
}

/// Solves `min ||design * X - rhs||_F` with the minimum-norm solution
/// `X = design^+ rhs`, the pseudoinverse truncated at `rcond`.
pub fn lstsq_min_norm<T: Real>(design: ArrayView2<T>, rhs: ArrayView2<T>, rcond: T) -> Result<Array2<T>> {
    let (m, n) = design.dim();
    if rhs.nrows() != m {
        return Err(Error::shape("least-squares right-hand side", (m, rhs.ncols()), rhs.dim()));
    }
    let p = rhs.ncols();
    let mut aug = Array2::<T>::zeros((m, n + p).f());
    aug.slice_mut(s![.., ..n]).assign(&design);
    aug.slice_mut(s![.., n..]).assign(&rhs);
    lstsq_min_norm_augmented(aug, n, rcond)
}

/// Same as [`lstsq_min_norm`] but takes ownership of the column-major
/// augmented matrix `[design | rhs]`, whose first `n_design` columns form the
/// design. Lets large callers build the system in place without a copy.
///
/// Tall systems are first reduced by Householder QR of the augmented matrix,
/// `[design | rhs] = Q [R | Q^T rhs]`, after which only the `n x n` factor
/// `R` (same singular values as the design) is decomposed.
pub fn lstsq_min_norm_augmented<T: Real>(mut aug: Array2<T>, n_design: usize, rcond: T) -> Result<Array2<T>> {
    let (m, total) = aug.dim();
    if n_design > total {
        return Err(Error::arg("design column count exceeds augmented width"));
    }
    let n = n_design;
    let p = total - n;
    if aug.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("least-squares system has non-finite entries".into()));
    }
    if m == 0 || n == 0 {
        return Ok(Array2::zeros((n, p)));
    }

    let (core, qtb) = if m >= total {
        if !aug.t().is_standard_layout() {
            let mut f = Array2::zeros((m, total).f());
            f.assign(&aug);
            aug = f;
        }
        T::qr_in_place(&mut aug)?;
        let mut r = Array2::<T>::zeros((n, n));
        for j in 0..n {
            for i in 0..=j {
                r[[i, j]] = aug[[i, j]];
            }
        }
        let qtb = aug.slice(s![..n, n..]).to_owned();
        (r, qtb)
    } else {
        let design = aug.slice(s![.., ..n]).to_owned();
        let rhs = aug.slice(s![.., n..]).to_owned();
        (design, rhs)
    };

    let svd = thin_svd(core.view())?;
    let r = numerical_rank(svd.s.view(), rcond);
    let mut x = Array2::zeros((n, p));
    if r == 0 {
        return Ok(x);
    }
    // x = V_r diag(1/s_r) U_r^T qtb
    let mut proj = svd.u.slice(s![.., ..r]).t().dot(&qtb);
    for (mut row, &sv) in proj.axis_iter_mut(Axis(0)).zip(svd.s.iter()) {
        row.mapv_inplace(|v| v / sv);
    }
    ndarray::linalg::general_mat_mul(T::one(), &svd.vt.slice(s![..r, ..]).t(), &proj, T::zero(), &mut x);
    Ok(x)
}

/// Frobenius norm.
pub fn frobenius<T: Real>(a: ArrayView2<T>) -> T {
    a.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
}

/// Euclidean norm of a vector.
pub fn norm2<T: Real>(v: ArrayView1<T>) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}
