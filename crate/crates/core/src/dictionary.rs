//! Observable dictionaries: the lifting `x -> Φ(x)` and the selector `B`
//! with `Bᵀ Φ(x) = x`.
//!
//! Monomials by total degree are listed in graded lexicographic order:
//! the constant, then `x_1 .. x_D`, then `x_1², x_1 x_2, ..`. Each entry
//! above degree 0 is computed as its parent monomial times one variable, so
//! lifting costs one multiply per observable.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Largest per-variable grid that [`Dictionary::lift`] will materialize.
pub const MAX_DENSE_LEN: u128 = 1 << 22;

pub const DEFAULT_RBF_EPSILON: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary<T = f64> {
    TotalDegree(TotalDegreeMonomials),
    PerVariable(PerVariableMonomials),
    Rbf(RbfDictionary<T>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TotalDegreeMonomials {
    dim: usize,
    max_degree: u32,
    exponents: Array2<u32>,
    /// `(parent, variable)` for every row but the constant.
    recipe: Vec<(usize, usize)>,
}

/// Tensor-product grid `0 <= n_d <= max_degree`, never stored densely.
///
/// Flat index is row-major over `(n_1, .., n_D)` with `n_1` most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerVariableMonomials {
    pub dim: usize,
    pub max_degree: u32,
}

/// `D` identity observables, an optional constant, then Gaussian bumps
/// `exp(-ε‖x - c‖²)` around sampled centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfDictionary<T = f64> {
    pub centers: Array2<T>,
    pub epsilon: f64,
    pub with_constant: bool,
    pub seed: u64,
}

/// Rows of the identity observables; represents the 0/1 matrix `B` (L × D).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentitySelector {
    pub rows: Vec<usize>,
    pub len: usize,
}

impl IdentitySelector {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// `Bᵀ v`.
    pub fn select<T: Real>(&self, phi: ArrayView1<T>) -> Array1<T> {
        self.rows.iter().map(|&r| phi[r]).collect()
    }

    /// `K B`: the identity columns of `k`.
    pub fn extract_columns<T: Real>(&self, k: ArrayView2<T>) -> Array2<T> {
        k.select(Axis(1), &self.rows)
    }

    pub fn dense<T: Real>(&self) -> Array2<T> {
        let mut b = Array2::zeros((self.len, self.rows.len()));
        for (j, &r) in self.rows.iter().enumerate() {
            b[[r, j]] = T::one();
        }
        b
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

impl TotalDegreeMonomials {
    pub fn new(dim: usize, max_degree: u32) -> Result<Self> {
        if dim == 0 || max_degree == 0 {
            return Err(Error::arg("monomial dictionary needs D >= 1 and degree >= 1"));
        }
        let expected = binomial((dim + max_degree as usize) as u128, max_degree as u128);
        if expected > MAX_DENSE_LEN {
            return Err(Error::arg(format!("{expected} monomials is too many to enumerate")));
        }
        // rows of the previous degree as (row index, last variable)
        let mut rows: Vec<Vec<u32>> = vec![vec![0; dim]];
        let mut recipe = Vec::new();
        let mut frontier: Vec<(usize, usize)> = vec![(0, 0)];
        for _ in 1..=max_degree {
            let mut next = Vec::new();
            for &(parent, last) in &frontier {
                for v in last..dim {
                    let mut e = rows[parent].clone();
                    e[v] += 1;
                    next.push((rows.len(), v));
                    recipe.push((parent, v));
                    rows.push(e);
                }
            }
            frontier = next;
        }
        debug_assert_eq!(rows.len() as u128, expected);
        let exponents = Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("rectangular rows");
        Ok(Self {
            dim,
            max_degree,
            exponents,
            recipe,
        })
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn exponents(&self) -> &Array2<u32> {
        &self.exponents
    }

    fn lift_into<T: Real>(&self, x: ArrayView1<T>, mut out: ArrayViewMut1<T>) {
        out[0] = T::one();
        for (i, &(parent, v)) in self.recipe.iter().enumerate() {
            out[i + 1] = out[parent] * x[v];
        }
    }
}

impl PerVariableMonomials {
    pub fn new(dim: usize, max_degree: u32) -> Result<Self> {
        if dim == 0 || max_degree == 0 {
            return Err(Error::arg("monomial dictionary needs D >= 1 and degree >= 1"));
        }
        let s = Self { dim, max_degree };
        if s.checked_size().is_none() {
            return Err(Error::arg("per-variable dictionary size overflows"));
        }
        Ok(s)
    }

    fn checked_size(&self) -> Option<u128> {
        (self.max_degree as u128 + 1).checked_pow(self.dim as u32)
    }

    pub fn size(&self) -> u128 {
        self.checked_size().expect("checked at construction")
    }

    /// Exponent vector of flat index `index`.
    pub fn exponents_of(&self, mut index: u128) -> Vec<u32> {
        let base = self.max_degree as u128 + 1;
        let mut e = vec![0; self.dim];
        for d in (0..self.dim).rev() {
            e[d] = (index % base) as u32;
            index /= base;
        }
        e
    }

    pub fn index_of(&self, exponents: &[u32]) -> u128 {
        let base = self.max_degree as u128 + 1;
        exponents.iter().fold(0, |acc, &n| acc * base + n as u128)
    }

    fn lift_into<T: Real>(&self, x: ArrayView1<T>, mut out: ArrayViewMut1<T>) {
        // row-major Kronecker product of (1, x_d, .., x_d^N) over d
        let n = self.max_degree as usize + 1;
        out[0] = T::one();
        let mut filled = 1;
        for d in 0..self.dim {
            let powers: Vec<T> = std::iter::successors(Some(T::one()), |&p| Some(p * x[d])).take(n).collect();
            for i in (0..filled).rev() {
                let base = out[i];
                for (k, &p) in powers.iter().enumerate() {
                    out[i * n + k] = base * p;
                }
            }
            filled *= n;
        }
    }
}

impl<T: Real> RbfDictionary<T> {
    /// Samples `len - D` (or `len - D - 1` with a constant) distinct rows of
    /// `inputs` as centers, without replacement.
    pub fn sample(len: usize, inputs: ArrayView2<T>, epsilon: f64, with_constant: bool, seed: u64) -> Result<Self> {
        let dim = inputs.ncols();
        let fixed = dim + with_constant as usize;
        if dim == 0 || len <= fixed {
            return Err(Error::arg(format!("RBF dictionary of size {len} leaves no room for centers")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::arg("RBF epsilon must be positive"));
        }
        if inputs.nrows() == 0 {
            return Err(Error::arg("no snapshot rows to sample centers from"));
        }
        let count = len - fixed;
        let mut order: Vec<usize> = (0..inputs.nrows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = HashSet::new();
        let mut chosen = Vec::with_capacity(count);
        for i in order {
            let key: Vec<u64> = inputs.row(i).iter().map(|v| v.as_f64().to_bits()).collect();
            if seen.insert(key) {
                chosen.push(i);
                if chosen.len() == count {
                    break;
                }
            }
        }
        if chosen.len() < count {
            return Err(Error::arg(format!(
                "need {count} distinct centers but only {} distinct rows exist",
                chosen.len()
            )));
        }
        Ok(Self {
            centers: inputs.select(Axis(0), &chosen),
            epsilon,
            with_constant,
            seed,
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.nrows()
    }

    fn lift_into(&self, x: ArrayView1<T>, mut out: ArrayViewMut1<T>) {
        let dim = x.len();
        for d in 0..dim {
            out[d] = x[d];
        }
        let mut at = dim;
        if self.with_constant {
            out[at] = T::one();
            at += 1;
        }
        let neg_eps = -T::of(self.epsilon);
        for (j, c) in self.centers.rows().into_iter().enumerate() {
            let sq: T = c.iter().zip(x.iter()).map(|(&c, &x)| (x - c) * (x - c)).sum();
            out[at + j] = (neg_eps * sq).exp();
        }
    }
}

impl<T: Real> Dictionary<T> {
    pub fn monomial_total_degree(dim: usize, max_degree: u32) -> Result<Self> {
        TotalDegreeMonomials::new(dim, max_degree).map(Dictionary::TotalDegree)
    }

    pub fn monomial_per_variable(dim: usize, max_degree: u32) -> Result<Self> {
        PerVariableMonomials::new(dim, max_degree).map(Dictionary::PerVariable)
    }

    pub fn rbf(len: usize, inputs: ArrayView2<T>, epsilon: f64, seed: u64) -> Result<Self> {
        RbfDictionary::sample(len, inputs, epsilon, false, seed).map(Dictionary::Rbf)
    }

    pub fn rbf_with_constant(len: usize, inputs: ArrayView2<T>, epsilon: f64, seed: u64) -> Result<Self> {
        RbfDictionary::sample(len, inputs, epsilon, true, seed).map(Dictionary::Rbf)
    }

    pub fn dim(&self) -> usize {
        match self {
            Dictionary::TotalDegree(m) => m.dim,
            Dictionary::PerVariable(m) => m.dim,
            Dictionary::Rbf(r) => r.centers.ncols(),
        }
    }

    /// Number of observables `L`, exact even when it exceeds `usize`.
    pub fn size(&self) -> u128 {
        match self {
            Dictionary::TotalDegree(m) => m.exponents.nrows() as u128,
            Dictionary::PerVariable(m) => m.size(),
            Dictionary::Rbf(r) => (r.centers.ncols() + r.with_constant as usize + r.centers.nrows()) as u128,
        }
    }

    /// `L` for dictionaries small enough to lift densely.
    pub fn len(&self) -> Result<usize> {
        let size = self.size();
        if size > MAX_DENSE_LEN {
            return Err(Error::Unsupported(format!(
                "dictionary of size {size} cannot be lifted densely; use the tensor-train engine"
            )));
        }
        Ok(size as usize)
    }

    /// Free parameters needed to store the dictionary itself.
    pub fn center_param_count(&self) -> usize {
        match self {
            Dictionary::Rbf(r) => r.centers.len(),
            _ => 0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Dictionary::TotalDegree(m) => format!("monomial-total-{}", m.max_degree),
            Dictionary::PerVariable(m) => format!("monomial-per-variable-{}", m.max_degree),
            Dictionary::Rbf(r) => format!("rbf-{}", self.size() - r.with_constant as u128 - r.centers.ncols() as u128),
        }
    }

    /// Writes `Φ(x)` into `out` (length `L`).
    pub fn lift_into(&self, x: ArrayView1<T>, out: ArrayViewMut1<T>) -> Result<()> {
        let len = self.len()?;
        if x.len() != self.dim() {
            return Err(Error::shape("lift input", self.dim(), x.len()));
        }
        if out.len() != len {
            return Err(Error::shape("lift output", len, out.len()));
        }
        match self {
            Dictionary::TotalDegree(m) => m.lift_into(x, out),
            Dictionary::PerVariable(m) => m.lift_into(x, out),
            Dictionary::Rbf(r) => r.lift_into(x, out),
        }
        Ok(())
    }

    pub fn lift(&self, x: ArrayView1<T>) -> Result<Array1<T>> {
        let mut out = Array1::zeros(self.len()?);
        self.lift_into(x, out.view_mut())?;
        Ok(out)
    }

    /// Row `i` of the result is `Φ(x_i)ᵀ`.
    pub fn lift_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        let mut out = Array2::zeros((x.nrows(), self.len()?));
        self.lift_rows_into(x, &mut out)?;
        Ok(out)
    }

    /// Lifts the rows of `x` into the leading columns of `out`, whatever its memory order.
    pub fn lift_rows_into(&self, x: ArrayView2<T>, out: &mut Array2<T>) -> Result<()> {
        let len = self.len()?;
        if out.nrows() != x.nrows() || out.ncols() < len {
            return Err(Error::shape("lift target", (x.nrows(), len), out.dim()));
        }
        let mut buf = Array1::zeros(len);
        for (row, mut target) in x.rows().into_iter().zip(out.rows_mut()) {
            self.lift_into(row, buf.view_mut())?;
            target.slice_mut(ndarray::s![..len]).assign(&buf);
        }
        Ok(())
    }

    pub fn identity_selector(&self) -> Result<IdentitySelector> {
        let dim = self.dim();
        match self {
            Dictionary::TotalDegree(m) => Ok(IdentitySelector {
                rows: (1..=dim).collect(),
                len: m.exponents.nrows(),
            }),
            Dictionary::PerVariable(m) => {
                let len = self.len()?;
                let rows = (0..dim)
                    .map(|j| {
                        let mut e = vec![0; dim];
                        e[j] = 1;
                        m.index_of(&e) as usize
                    })
                    .collect();
                Ok(IdentitySelector { rows, len })
            }
            Dictionary::Rbf(_) => Ok(IdentitySelector {
                rows: (0..dim).collect(),
                len: self.size() as usize,
            }),
        }
    }

    pub fn to_record(&self) -> DictionaryRecord {
        match self {
            Dictionary::TotalDegree(m) => DictionaryRecord {
                kind: DictionaryKind::MonomialTotalDegree,
                dim: m.dim,
                len: self.size().to_string(),
                max_degree: Some(m.max_degree),
                exponents: Some(m.exponents.rows().into_iter().map(|r| r.to_vec()).collect()),
                centers: None,
                epsilon: None,
                seed: None,
                with_constant: None,
            },
            Dictionary::PerVariable(m) => DictionaryRecord {
                kind: DictionaryKind::MonomialPerVariable,
                dim: m.dim,
                len: self.size().to_string(),
                max_degree: Some(m.max_degree),
                exponents: None,
                centers: None,
                epsilon: None,
                seed: None,
                with_constant: None,
            },
            Dictionary::Rbf(r) => DictionaryRecord {
                kind: DictionaryKind::RbfPlusIdentity,
                dim: r.centers.ncols(),
                len: self.size().to_string(),
                max_degree: None,
                exponents: None,
                centers: Some(
                    r.centers
                        .rows()
                        .into_iter()
                        .map(|c| c.iter().map(|v| v.as_f64()).collect())
                        .collect(),
                ),
                epsilon: Some(r.epsilon),
                seed: Some(r.seed),
                with_constant: Some(r.with_constant),
            },
        }
    }

    pub fn from_record(rec: &DictionaryRecord) -> Result<Self> {
        let missing = |what: &str| Error::Format(format!("dictionary record lacks `{what}`"));
        let dict = match rec.kind {
            DictionaryKind::MonomialTotalDegree => {
                let dict = Self::monomial_total_degree(rec.dim, rec.max_degree.ok_or_else(|| missing("max_degree"))?)?;
                if let (Some(rows), Dictionary::TotalDegree(m)) = (&rec.exponents, &dict) {
                    let same = rows.len() == m.exponents.nrows()
                        && rows.iter().zip(m.exponents.rows()).all(|(a, b)| a.as_slice() == b.as_slice().unwrap());
                    if !same {
                        return Err(Error::Format("exponent rows do not match the canonical order".into()));
                    }
                }
                dict
            }
            DictionaryKind::MonomialPerVariable => {
                Self::monomial_per_variable(rec.dim, rec.max_degree.ok_or_else(|| missing("max_degree"))?)?
            }
            DictionaryKind::RbfPlusIdentity => {
                let rows = rec.centers.as_ref().ok_or_else(|| missing("centers"))?;
                let epsilon = rec.epsilon.ok_or_else(|| missing("epsilon"))?;
                if !(epsilon > 0.0) {
                    return Err(Error::Format("RBF epsilon must be positive".into()));
                }
                if rows.iter().any(|r| r.len() != rec.dim) {
                    return Err(Error::Format("center width differs from D".into()));
                }
                let flat: Vec<T> = rows.iter().flatten().map(|&v| T::of(v)).collect();
                Dictionary::Rbf(RbfDictionary {
                    centers: Array2::from_shape_vec((rows.len(), rec.dim), flat).expect("widths checked"),
                    epsilon,
                    with_constant: rec.with_constant.unwrap_or(false),
                    seed: rec.seed.unwrap_or(0),
                })
            }
        };
        if dict.size().to_string() != rec.len {
            return Err(Error::Format(format!("record says L = {}, rebuilt {}", rec.len, dict.size())));
        }
        Ok(dict)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(&serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryKind {
    MonomialTotalDegree,
    MonomialPerVariable,
    RbfPlusIdentity,
}

/// Text form of a dictionary. `len` is a decimal string because per-variable
/// grids outgrow 64 bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryRecord {
    pub kind: DictionaryKind,
    pub dim: usize,
    pub len: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_degree: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponents: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_constant: Option<bool>,
}
