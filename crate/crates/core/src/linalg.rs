//! Dense kernels: row-major matrices, thin QR, small one-sided Jacobi SVD,
//! stable softmax and deterministic top-k selection.
//!
//! Everything here is a pure function of its inputs. Decompositions run in
//! 64-bit internally regardless of the storage scalar.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::real::Real;

/// Largest dimension accepted by [`svd_small`].
pub const SVD_MAX_DIM: usize = 64;

/// Accumulator width for products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulate {
    /// Accumulate in the storage scalar.
    Native,
    /// Accumulate in `f64` and round once at the end.
    #[default]
    Wide,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("DenseMatrix::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", rhs.shape()),
            ));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "DenseMatrix::add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "DenseMatrix::sub", |a, b| a - b)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self, acc: Accumulate) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dim("matmul", self.cols, rhs.rows));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        match acc {
            Accumulate::Wide => {
                let mut row = vec![0.0f64; rhs.cols];
                for i in 0..self.rows {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for (l, &a) in self.row(i).iter().enumerate() {
                        let a = a.as_f64();
                        for (r, &b) in row.iter_mut().zip(rhs.row(l)) {
                            *r += a * b.as_f64();
                        }
                    }
                    for (o, &r) in out.row_mut(i).iter_mut().zip(&row) {
                        *o = T::of(r);
                    }
                }
            }
            Accumulate::Native => {
                for i in 0..self.rows {
                    for l in 0..self.cols {
                        let a = self.get(i, l);
                        let src = rhs.row(l);
                        for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                            *o = *o + a * b;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T], acc: Accumulate) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::dim("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x, acc)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[T], acc: Accumulate) -> Result<Vec<T>> {
        if y.len() != self.rows {
            return Err(Error::dim("matvec_t", self.rows, y.len()));
        }
        Ok(match acc {
            Accumulate::Wide => {
                let mut out = vec![0.0f64; self.cols];
                for (i, &yi) in y.iter().enumerate() {
                    let yi = yi.as_f64();
                    for (o, &a) in out.iter_mut().zip(self.row(i)) {
                        *o += yi * a.as_f64();
                    }
                }
                out.into_iter().map(T::of).collect()
            }
            Accumulate::Native => {
                let mut out = vec![T::zero(); self.cols];
                for (i, &yi) in y.iter().enumerate() {
                    for (o, &a) in out.iter_mut().zip(self.row(i)) {
                        *o = *o + yi * a;
                    }
                }
                out
            }
        })
    }
}

/// Inner product with the requested accumulator.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T], acc: Accumulate) -> T {
    match acc {
        Accumulate::Wide => T::of(
            a.iter()
                .zip(b)
                .map(|(&x, &y)| x.as_f64() * y.as_f64())
                .sum::<f64>(),
        ),
        Accumulate::Native => a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y),
    }
}

pub fn norm2<T: Real>(v: &[T]) -> f64 {
    v.iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Thin QR of a `d×r` matrix (`d ≥ r`) by Householder reflections.
///
/// The diagonal of the triangular factor is nonnegative. Rank-deficient
/// input is fine: `q` stays orthonormal and the corresponding diagonal
/// entries of `r` come out zero.
pub fn qr_thin<T: Real>(m: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let (q, r) = qr_thin_f64(&m.cast::<f64>())?;
    Ok((q.cast(), r.cast()))
}

pub(crate) fn qr_thin_f64(m: &DenseMatrix<f64>) -> Result<(DenseMatrix<f64>, DenseMatrix<f64>)> {
    let (d, r) = m.shape();
    if d < r {
        return Err(Error::dim("qr_thin", format!("rows >= cols ({r})"), d));
    }
    let mut a = m.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(r);
    for j in 0..r {
        let x: Vec<f64> = (j..d).map(|i| a.get(i, j)).collect();
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vnorm);
        for c in j..r {
            let proj: f64 = (j..d).map(|i| v[i - j] * a.get(i, c)).sum();
            for i in j..d {
                let val = a.get(i, c) - 2.0 * v[i - j] * proj;
                a.set(i, c, val);
            }
        }
        reflectors.push(Some(v));
    }

    let mut rf = DenseMatrix::from_fn(r, r, |i, j| if j >= i { a.get(i, j) } else { 0.0 });
    let mut q = DenseMatrix::from_fn(d, r, |i, j| if i == j { 1.0 } else { 0.0 });
    for (j, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        for c in 0..r {
            let proj: f64 = (j..d).map(|i| v[i - j] * q.get(i, c)).sum();
            for i in j..d {
                let val = q.get(i, c) - 2.0 * v[i - j] * proj;
                q.set(i, c, val);
            }
        }
    }
    for j in 0..r {
        if rf.get(j, j) < 0.0 {
            for c in 0..r {
                rf.set(j, c, -rf.get(j, c));
            }
            for i in 0..d {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    Ok((q, rf))
}

/// Full singular value decomposition `m = u · diag(sigma) · v_t`.
#[derive(Debug, Clone)]
pub struct Svd<T = f32> {
    /// `p×p` orthogonal.
    pub u: DenseMatrix<T>,
    /// `min(p, q)` values, nonnegative, descending.
    pub sigma: Vec<T>,
    /// `q×q` orthogonal.
    pub v_t: DenseMatrix<T>,
}

/// SVD of a small matrix (both sides at most [`SVD_MAX_DIM`]) by one-sided Jacobi.
pub fn svd_small<T: Real>(m: &DenseMatrix<T>) -> Result<Svd<T>> {
    let svd = svd_small_f64(&m.cast::<f64>())?;
    Ok(Svd {
        u: svd.u.cast(),
        sigma: svd.sigma.iter().map(|&s| T::of(s)).collect(),
        v_t: svd.v_t.cast(),
    })
}

pub(crate) fn svd_small_f64(m: &DenseMatrix<f64>) -> Result<Svd<f64>> {
    let (p, q) = m.shape();
    if p > SVD_MAX_DIM || q > SVD_MAX_DIM {
        return Err(Error::Oversize {
            op: "svd_small",
            rows: p,
            cols: q,
            limit: SVD_MAX_DIM,
        });
    }
    if p == 0 || q == 0 {
        return Err(Error::Empty("svd_small"));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd_small"));
    }
    if p >= q {
        let (u, sigma, v) = jacobi_tall(m);
        Ok(Svd {
            u,
            sigma,
            v_t: v.transpose(),
        })
    } else {
        // m = (mᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&m.transpose());
        Ok(Svd {
            u: v_t,
            sigma,
            v_t: u_t.transpose(),
        })
    }
}

/// One-sided Jacobi on a `p×q` matrix with `p ≥ q`. Returns a full `p×p`
/// left basis, the `q` singular values, and the `q×q` right basis `V`.
fn jacobi_tall(m: &DenseMatrix<f64>) -> (DenseMatrix<f64>, Vec<f64>, DenseMatrix<f64>) {
    let (p, q) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..q).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha: f64 = cols[i].iter().map(|x| x * x).sum();
                let beta: f64 = cols[j].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms.iter().copied().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * (p as f64);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut sigma = Vec::with_capacity(q);
    let mut v_sorted = DenseMatrix::zeros(q, q);
    for (k, &j) in order.iter().enumerate() {
        sigma.push(norms[j]);
        for i in 0..q {
            v_sorted.set(i, k, v[j][i]);
        }
        if norms[j] > tol && norms[j] > 0.0 {
            basis.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            basis.push(Vec::new());
        }
    }
    // Columns attached to (numerically) zero singular values, plus the p - q
    // columns beyond the core, are filled with an orthonormal completion.
    let filled: Vec<Vec<f64>> = basis.iter().filter(|b| !b.is_empty()).cloned().collect();
    let mut extra = complete_basis(&filled, p).into_iter();
    let mut u = DenseMatrix::zeros(p, p);
    for (k, b) in basis.iter().enumerate() {
        let col = if b.is_empty() {
            extra.next().expect("completion covers missing columns")
        } else {
            b.clone()
        };
        for i in 0..p {
            u.set(i, k, col[i]);
        }
    }
    for k in q..p {
        let col = extra.next().expect("completion covers trailing columns");
        for i in 0..p {
            u.set(i, k, col[i]);
        }
    }
    (u, sigma, v_sorted)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let t = *a;
        *a = c * t - s * *b;
        *b = s * t + c * *b;
    }
}

/// Extends an orthonormal set to a basis of `R^dim`, returning only the new vectors.
fn complete_basis(existing: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let mut all: Vec<Vec<f64>> = existing.to_vec();
    let mut added = Vec::new();
    while all.len() < dim {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for b in &all {
                    let proj: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                    cand.iter_mut().zip(b).for_each(|(c, x)| *c -= proj * x);
                }
            }
            let n = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, cand));
            }
        }
        let (n, mut cand) = best.expect("dim > 0");
        cand.iter_mut().for_each(|x| *x /= n);
        all.push(cand.clone());
        added.push(cand);
    }
    added
}

/// Softmax with max-subtraction, evaluated in 64-bit.
pub fn softmax_stable<T: Real>(v: &[T]) -> Result<Vec<T>> {
    let wide: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    Ok(softmax_f64(&wide)?.into_iter().map(T::of).collect())
}

pub fn softmax_f64(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax_stable"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax_stable"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Indices of the `k` largest values, ordered by value descending and then
/// by index ascending. Returns `min(k, v.len())` indices.
pub fn top_k_indices<T: Real>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("top_k_indices: k must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| match v[b].partial_cmp(&v[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });
    idx.truncate(k.min(v.len()));
    Ok(idx)
}
