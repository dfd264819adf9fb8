//! Low-rank weight increments `ΔW = (alpha / base_rank) · B · A` and their
//! exact algebra.
//!
//! Sums and differences are represented by concatenating factors, so the
//! represented increment is exact and the rank grows. [`LowRankDelta::truncate`]
//! is the only lossy operation and reports what it discards.

use crate::error::{Error, Result};
use crate::linalg::{qr_thin_f64, svd_small_f64, DenseMatrix, SVD_MAX_DIM};
use crate::real::Real;

/// Guard against accidentally materializing a huge dense increment.
pub const MATERIALIZE_LIMIT: usize = 4096;

/// Below this Frobenius norm an increment has no meaningful prototype.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A low-rank increment for one weight site.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta<T = f32> {
    /// Down-projection, `rank × k_in`.
    a: DenseMatrix<T>,
    /// Up-projection, `d_out × rank`.
    b: DenseMatrix<T>,
    alpha: f64,
    base_rank: usize,
}

impl<T: Real> LowRankDelta<T> {
    pub fn new(a: DenseMatrix<T>, b: DenseMatrix<T>, alpha: f64, base_rank: usize) -> Result<Self> {
        if a.rows() == 0 {
            return Err(Error::InvalidArgument("low-rank delta needs rank >= 1".into()));
        }
        if a.rows() != b.cols() {
            return Err(Error::dim("LowRankDelta::new", a.rows(), b.cols()));
        }
        if base_rank == 0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid scaling alpha={alpha}, base_rank={base_rank}"
            )));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("LowRankDelta::new"));
        }
        Ok(Self {
            a,
            b,
            alpha,
            base_rank,
        })
    }

    /// Unit scaling: `alpha = base_rank = rank`, so `ΔW = B · A` verbatim.
    pub fn from_factors(a: DenseMatrix<T>, b: DenseMatrix<T>) -> Result<Self> {
        let r = a.rows();
        Self::new(a, b, r as f64, r.max(1))
    }

    pub fn zeros(d_out: usize, k_in: usize, rank: usize) -> Self {
        Self {
            a: DenseMatrix::zeros(rank, k_in),
            b: DenseMatrix::zeros(d_out, rank),
            alpha: rank as f64,
            base_rank: rank,
        }
    }

    pub fn a(&self) -> &DenseMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix<T> {
        &self.b
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut DenseMatrix<T>, &mut DenseMatrix<T>) {
        (&mut self.a, &mut self.b)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn base_rank(&self) -> usize {
        self.base_rank
    }

    /// `alpha / base_rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.base_rank as f64
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn k_in(&self) -> usize {
        self.a.cols()
    }

    /// `(d_out, k_in)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.d_out(), self.k_in())
    }

    pub fn cast<U: Real>(&self) -> LowRankDelta<U> {
        LowRankDelta {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
            base_rank: self.base_rank,
        }
    }

    /// Dense `d_out × k_in` increment, accumulated in 64-bit.
    pub fn materialize(&self) -> Result<DenseMatrix<T>> {
        let (d, k) = self.dims();
        if d > MATERIALIZE_LIMIT || k > MATERIALIZE_LIMIT {
            return Err(Error::Oversize {
                op: "materialize",
                rows: d,
                cols: k,
                limit: MATERIALIZE_LIMIT,
            });
        }
        let s = self.scaling();
        let r = self.rank();
        let mut out = DenseMatrix::zeros(d, k);
        for i in 0..d {
            let brow = self.b.row(i);
            for c in 0..k {
                let mut acc = 0.0f64;
                for (j, &bij) in brow.iter().enumerate().take(r) {
                    acc += bij.as_f64() * self.a.get(j, c).as_f64();
                }
                out.set(i, c, T::of(s * acc));
            }
        }
        Ok(out)
    }

    /// `ΔW · x` computed as `B · (A · x)`.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.apply_wide(x)?.into_iter().map(T::of).collect())
    }

    pub(crate) fn apply_wide(&self, x: &[T]) -> Result<Vec<f64>> {
        if x.len() != self.k_in() {
            return Err(Error::dim("LowRankDelta::apply", self.k_in(), x.len()));
        }
        let s = self.scaling();
        let u: Vec<f64> = (0..self.rank())
            .map(|j| {
                self.a
                    .row(j)
                    .iter()
                    .zip(x)
                    .map(|(&a, &x)| a.as_f64() * x.as_f64())
                    .sum::<f64>()
            })
            .collect();
        Ok((0..self.d_out())
            .map(|i| {
                s * self
                    .b
                    .row(i)
                    .iter()
                    .zip(&u)
                    .map(|(&b, &u)| b.as_f64() * u)
                    .sum::<f64>()
            })
            .collect())
    }

    /// Multiplies the increment by `c`; only the up-projection is touched.
    pub fn scale(&self, c: f64) -> Self {
        debug_assert!(c.is_finite());
        let mut out = self.clone();
        out.b = self.b.scaled(T::of(c));
        out
    }

    /// Exact sum by factor concatenation: `A = [s₁A₁; s₂A₂]`-style stacking with
    /// each block's scaling folded into its `B` block so the result carries
    /// unit scaling.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::dim(
                "LowRankDelta::add",
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        let (d, k) = self.dims();
        let (r1, r2) = (self.rank(), other.rank());
        let r = r1 + r2;
        let (s1, s2) = (T::of(self.scaling()), T::of(other.scaling()));
        let a = DenseMatrix::from_fn(r, k, |i, j| {
            if i < r1 {
                self.a.get(i, j)
            } else {
                other.a.get(i - r1, j)
            }
        });
        let b = DenseMatrix::from_fn(d, r, |i, j| {
            if j < r1 {
                fold(self.b.get(i, j), s1)
            } else {
                fold(other.b.get(i, j - r1), s2)
            }
        });
        Ok(Self {
            a,
            b,
            alpha: r as f64,
            base_rank: r,
        })
    }

    /// `self − other`, exact, rank `r₁ + r₂`.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(-1.0))
    }

    /// Singular values of the represented increment, descending.
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        Ok(self.reduced_svd()?.sigma)
    }

    /// Number of singular values above `rel_tol · σ_max`.
    pub fn effective_rank(&self, rel_tol: f64) -> Result<usize> {
        let sigma = self.singular_values()?;
        let top = sigma.first().copied().unwrap_or(0.0);
        if top <= DEGENERATE_NORM {
            return Ok(0);
        }
        Ok(sigma.iter().filter(|&&s| s > rel_tol * top).count())
    }

    /// Best rank-`r_new` approximation and the Frobenius norm of what was dropped.
    ///
    /// When `r_new` is at least the current rank the delta is returned unchanged.
    pub fn truncate(&self, r_new: usize) -> Result<(Self, f64)> {
        if r_new == 0 {
            return Err(Error::InvalidArgument("truncate: r_new must be at least 1".into()));
        }
        if r_new >= self.rank() {
            return Ok((self.clone(), 0.0));
        }
        let svd = self.reduced_svd()?;
        let (d, k) = self.dims();
        let kept = r_new.min(svd.sigma.len());
        let err = svd.sigma[kept..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let b = DenseMatrix::from_fn(d, r_new, |i, j| {
            if j < kept {
                T::of(svd.left.get(i, j) * svd.sigma[j])
            } else {
                T::zero()
            }
        });
        let a = DenseMatrix::from_fn(r_new, k, |i, j| {
            if i < kept {
                T::of(svd.right.get(i, j))
            } else {
                T::zero()
            }
        });
        Ok((
            Self {
                a,
                b,
                alpha: r_new as f64,
                base_rank: r_new,
            },
            err,
        ))
    }

    /// Top right singular vector of the increment, unit norm, with its first
    /// component of magnitude above `1e-8` made positive.
    pub fn prototype(&self) -> Result<Vec<T>> {
        let svd = self.reduced_svd()?;
        let norm = svd.sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
        if norm <= DEGENERATE_NORM {
            return Err(Error::Degenerate(format!(
                "increment has Frobenius norm {norm:e}; no prototype"
            )));
        }
        let mut v = svd.right.row(0).to_vec();
        canonicalize_sign(&mut v);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| T::of(x / n)).collect())
    }

    /// SVD of the increment without forming it densely: QR of `B`, then a
    /// small SVD of the `R · A` core (with a second QR when `k_in` is large).
    fn reduced_svd(&self) -> Result<ReducedSvd> {
        let (d, k) = self.dims();
        let r = self.rank();
        let s = self.scaling();
        let a = self.a.cast::<f64>();
        let b = self.b.cast::<f64>().scaled(s);

        let (left, core) = if d >= r {
            let (q, rf) = qr_thin_f64(&b)?;
            (Some(q), mul(&rf, &a))
        } else {
            (None, mul(&b, &a))
        };
        let p = core.rows();
        if p > SVD_MAX_DIM {
            return Err(Error::Oversize {
                op: "low-rank core",
                rows: p,
                cols: k,
                limit: SVD_MAX_DIM,
            });
        }

        let (u_core, sigma, right) = if k <= SVD_MAX_DIM {
            let svd = svd_small_f64(&core)?;
            let m = svd.sigma.len();
            let right = DenseMatrix::from_fn(m, k, |i, j| svd.v_t.get(i, j));
            (svd.u, svd.sigma, right)
        } else {
            // core = Raᵀ Qaᵀ with Qa (k×p) orthonormal.
            let (qa, ra) = qr_thin_f64(&core.transpose())?;
            let svd = svd_small_f64(&ra.transpose())?;
            let right = mul(&svd.v_t, &qa.transpose());
            (svd.u, svd.sigma, right)
        };
        let m = sigma.len();
        let u_core = DenseMatrix::from_fn(u_core.rows(), m, |i, j| u_core.get(i, j));
        let left = match left {
            Some(q) => mul(&q, &u_core),
            None => u_core,
        };
        Ok(ReducedSvd { left, sigma, right })
    }
}

#[inline]
fn fold<T: Real>(b: T, s: T) -> T {
    if s == T::one() {
        b
    } else {
        b * s
    }
}

fn mul(x: &DenseMatrix<f64>, y: &DenseMatrix<f64>) -> DenseMatrix<f64> {
    x.matmul(y, crate::linalg::Accumulate::Native)
        .expect("internal shapes agree")
}

pub(crate) fn canonicalize_sign(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// `ΔW = left · diag(sigma) · right`, `left` d×m, `right` m×k.
struct ReducedSvd {
    left: DenseMatrix<f64>,
    sigma: Vec<f64>,
    right: DenseMatrix<f64>,
}
