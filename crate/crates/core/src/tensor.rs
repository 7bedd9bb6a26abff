//! Dense 3-mode tensors and CP decomposition.
//!
//! Storage is row-major over `(i, j, k)`. Contractions follow the convention
//! `[T x_2 v]_{i,k} = sum_j T_{i,j,k} v_j`; the remaining modes keep their
//! relative order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, PsrnnError, Result};

/// One of the three tensor modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    First,
    Second,
    Third,
}

impl Mode {
    /// Maps the 1-based mode number used in the math to a `Mode`.
    pub fn from_number(n: usize) -> Result<Mode> {
        match n {
            1 => Ok(Mode::First),
            2 => Ok(Mode::Second),
            3 => Ok(Mode::Third),
            _ => Err(PsrnnError::InvalidArgument(format!(
                "tensor mode must be 1, 2 or 3, got {n}"
            ))),
        }
    }

    fn index(self) -> usize {
        match self {
            Mode::First => 0,
            Mode::Second => 1,
            Mode::Third => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Tensor3 {
        Tensor3 {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Tensor3> {
        check_dim("tensor value count", dims[0] * dims[1] * dims[2], data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PsrnnError::NumericalFailure("tensor values must be finite".into()));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Tensor3 {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3 { dims, data }
    }

    /// Entries drawn i.i.d. uniform on `[-scale, scale]`.
    pub fn random(dims: [usize; 3], scale: f64, rng: &mut impl Rng) -> Tensor3 {
        Tensor3::from_fn(dims, |_, _, _| rng.random_range(-scale..=scale))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor3) -> Result<()> {
        if self.dims != other.dims {
            return Err(PsrnnError::DimensionMismatch(format!(
                "tensor add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `self += alpha * a ⊗ b ⊗ c` without materializing the outer product.
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64], c: &[f64]) -> Result<()> {
        check_dim("outer mode 1", self.dims[0], a.len())?;
        check_dim("outer mode 2", self.dims[1], b.len())?;
        check_dim("outer mode 3", self.dims[2], c.len())?;
        let (d2, d3) = (self.dims[1], self.dims[2]);
        for (i, &ai) in a.iter().enumerate() {
            let ai = alpha * ai;
            if ai == 0.0 {
                continue;
            }
            for (j, &bj) in b.iter().enumerate() {
                let s = ai * bj;
                if s == 0.0 {
                    continue;
                }
                let row = &mut self.data[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
                row.iter_mut().zip(c).for_each(|(t, &ck)| *t += s * ck);
            }
        }
        Ok(())
    }

    /// Relative Frobenius distance `‖self − other‖ / ‖other‖` (absolute when `other` is zero).
    pub fn relative_error(&self, other: &Tensor3) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = other.frobenius_norm();
        if base > 0.0 {
            diff / base
        } else {
            diff
        }
    }

    /// Contract one mode with a vector; returns the matrix over the two
    /// remaining modes in their original order.
    pub fn contract_vec(&self, mode: Mode, v: &[f64]) -> Result<DMatrix<f64>> {
        let [d1, d2, d3] = self.dims;
        check_dim("contraction vector", self.dims[mode.index()], v.len())?;
        let out = match mode {
            Mode::First => {
                let mut m = DMatrix::zeros(d2, d3);
                for (i, &vi) in v.iter().enumerate() {
                    for j in 0..d2 {
                        for k in 0..d3 {
                            m[(j, k)] += self.get(i, j, k) * vi;
                        }
                    }
                }
                m
            }
            Mode::Second => {
                let mut m = DMatrix::zeros(d1, d3);
                for i in 0..d1 {
                    for (j, &vj) in v.iter().enumerate() {
                        for k in 0..d3 {
                            m[(i, k)] += self.get(i, j, k) * vj;
                        }
                    }
                }
                m
            }
            Mode::Third => {
                let mut m = DMatrix::zeros(d1, d2);
                for i in 0..d1 {
                    for j in 0..d2 {
                        let o = self.offset(i, j, 0);
                        m[(i, j)] = self.data[o..o + d3].iter().zip(v).map(|(t, x)| t * x).sum();
                    }
                }
                m
            }
        };
        Ok(out)
    }

    /// Mode-`n` product with a matrix `m` of shape `r × dims[n]`:
    /// `[T ×₃ M]_{i,j,l} = Σ_k T_{i,j,k} M_{l,k}`.
    pub fn mode_product(&self, mode: Mode, m: &DMatrix<f64>) -> Result<Tensor3> {
        let idx = mode.index();
        check_dim("mode product columns", self.dims[idx], m.ncols())?;
        let mut dims = self.dims;
        dims[idx] = m.nrows();
        let product = m * self.unfold(mode);
        Ok(Tensor3::fold(mode, dims, &product))
    }

    /// Inverse of [`Tensor3::unfold`] for a tensor of shape `dims`.
    pub fn fold(mode: Mode, dims: [usize; 3], m: &DMatrix<f64>) -> Tensor3 {
        let [_, d2, d3] = dims;
        Tensor3::from_fn(dims, |i, j, k| match mode {
            Mode::First => m[(i, j * d3 + k)],
            Mode::Second => m[(j, i * d3 + k)],
            Mode::Third => m[(k, i * d2 + j)],
        })
    }

    /// Mode-`n` unfolding: rows indexed by mode `n`, columns by the other two
    /// modes with the earlier mode varying slowest.
    pub fn unfold(&self, mode: Mode) -> DMatrix<f64> {
        let [d1, d2, d3] = self.dims;
        match mode {
            Mode::First => DMatrix::from_fn(d1, d2 * d3, |i, c| self.get(i, c / d3, c % d3)),
            Mode::Second => DMatrix::from_fn(d2, d1 * d3, |j, c| self.get(c / d3, j, c % d3)),
            Mode::Third => DMatrix::from_fn(d3, d1 * d2, |k, c| self.get(c / d2, c % d2, k)),
        }
    }
}

pub fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Tensor3 {
    Tensor3::from_fn([a.len(), b.len(), c.len()], |i, j, k| a[i] * b[j] * c[k])
}

/// CP factors; row `r` of `a`, `b`, `c` holds the `r`-th rank-one component.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl CpFactors {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<CpFactors> {
        if a.nrows() != b.nrows() || a.nrows() != c.nrows() {
            return Err(PsrnnError::DimensionMismatch(format!(
                "CP factor ranks differ: {}, {}, {}",
                a.nrows(),
                b.nrows(),
                c.nrows()
            )));
        }
        Ok(CpFactors { a, b, c })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.a.ncols(), self.b.ncols(), self.c.ncols()]
    }

    pub fn reconstruct(&self) -> Tensor3 {
        cp_reconstruct(self)
    }
}

pub fn cp_reconstruct(f: &CpFactors) -> Tensor3 {
    let mut out = Tensor3::zeros(f.dims());
    for r in 0..f.rank() {
        let a: Vec<f64> = f.a.row(r).iter().copied().collect();
        let b: Vec<f64> = f.b.row(r).iter().copied().collect();
        let c: Vec<f64> = f.c.row(r).iter().copied().collect();
        out.add_outer(1.0, &a, &b, &c)
            .expect("factor dims agree with output dims");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpAlsOptions {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop when the relative error improves by less than this between sweeps.
    pub tol: f64,
    /// Tikhonov term added to each normal-equation system, relative to the
    /// mean diagonal of its Gram matrix. Keeps overcomplete decompositions
    /// from growing large cancelling components.
    pub ridge: f64,
    pub seed: u64,
}

impl CpAlsOptions {
    pub fn new(rank: usize) -> CpAlsOptions {
        CpAlsOptions {
            rank,
            max_iters: 500,
            tol: 1e-12,
            ridge: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CpAlsResult {
    pub factors: CpFactors,
    /// Relative Frobenius reconstruction error after each sweep (and after
    /// the polish, when one ran).
    pub errors: Vec<f64>,
    pub converged: bool,
}

const ALS_RIDGE: f64 = 1e-10;

pub fn cp_als(t: &Tensor3, rank: usize, max_iters: usize, tol: f64, seed: u64) -> Result<CpFactors> {
    cp_als_traced(
        t,
        &CpAlsOptions {
            rank,
            max_iters,
            tol,
            ridge: 0.0,
            seed,
        },
    )
    .map(|r| r.factors)
}

/// Alternating least squares over the three mode unfoldings.
///
/// Factors start i.i.d. uniform on `[-1, 1]`. Each sweep solves the normal
/// equations `(BᵀB ∘ CᵀC) Aᵀ = MTTKRP` per mode; a singular system is retried
/// once with `1e-10·I` added. From the third sweep on, a step of length
/// `it^(1/3)` along the change made by the sweep is accepted when it lowers
/// the error. Small unregularized problems that have not converged after
/// `max_iters` sweeps finish with a Levenberg-Marquardt polish.
pub fn cp_als_traced(t: &Tensor3, opts: &CpAlsOptions) -> Result<CpAlsResult> {
    if opts.rank == 0 {
        return Err(PsrnnError::InvalidArgument("CP rank must be at least 1".into()));
    }
    if opts.max_iters == 0 {
        return Err(PsrnnError::InvalidArgument(
            "CP-ALS needs at least one iteration".into(),
        ));
    }
    let [d1, d2, d3] = t.dims();
    let n = opts.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draw = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..=1.0));
    // Factor matrices are kept as dims × rank while iterating.
    let mut a = draw(d1, n);
    let mut b = draw(d2, n);
    let mut c = draw(d3, n);

    let mut errors = Vec::new();
    let mut converged = false;
    let mut prev = f64::INFINITY;
    let error = |a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>| {
        let f = CpFactors {
            a: a.transpose(),
            b: b.transpose(),
            c: c.transpose(),
        };
        cp_reconstruct(&f).relative_error(t)
    };
    for it in 0..opts.max_iters {
        let (pa, pb, pc) = (a.clone(), b.clone(), c.clone());
        a = als_update(t, Mode::First, &b, &c, opts.ridge)?;
        b = als_update(t, Mode::Second, &a, &c, opts.ridge)?;
        c = als_update(t, Mode::Third, &a, &b, opts.ridge)?;
        rebalance(&mut a, &mut b, &mut c);
        let mut err = error(&a, &b, &c);

        // Extrapolate along the sweep direction; kept only if it helps.
        if it >= 2 {
            let s = ((it + 1) as f64).cbrt();
            let ea = &pa + (&a - &pa) * s;
            let eb = &pb + (&b - &pb) * s;
            let ec = &pc + (&c - &pc) * s;
            let e = error(&ea, &eb, &ec);
            if e < err {
                (a, b, c, err) = (ea, eb, ec, e);
                rebalance(&mut a, &mut b, &mut c);
            }
        }
        errors.push(err);
        if !err.is_finite() {
            return Err(PsrnnError::NumericalFailure(
                "CP-ALS reconstruction error is not finite".into(),
            ));
        }
        if prev - err < opts.tol || err < 1e-15 {
            converged = true;
            break;
        }
        prev = err;
    }
    if !converged && opts.ridge == 0.0 && lm_affordable(t.dims(), n) {
        let before = *errors.last().expect("at least one sweep");
        if let Some((la, lb, lc, e)) = lm_polish(t, &a, &b, &c, LM_ITERS) {
            if e < before {
                (a, b, c) = (la, lb, lc);
                rebalance(&mut a, &mut b, &mut c);
                errors.push(e);
                converged = e < 1e-12;
            }
        }
    }
    Ok(CpAlsResult {
        factors: CpFactors {
            a: a.transpose(),
            b: b.transpose(),
            c: c.transpose(),
        },
        errors,
        converged,
    })
}

const LM_ITERS: usize = 300;

/// Bound on `entries · params²` for the dense Gauss-Newton polish.
fn lm_affordable(dims: [usize; 3], rank: usize) -> bool {
    let entries = (dims[0] * dims[1] * dims[2]) as f64;
    let params = (rank * (dims[0] + dims[1] + dims[2])) as f64;
    entries * params * params <= 5e8
}

/// Residual `vec(T) − vec([[A, B, C]])` in storage order.
fn cp_residual(t: &Tensor3, a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> DVector<f64> {
    let [d1, d2, d3] = t.dims();
    let n = a.ncols();
    let mut res = DVector::zeros(t.len());
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let v: f64 = (0..n).map(|r| a[(i, r)] * b[(j, r)] * c[(k, r)]).sum();
                res[t.offset(i, j, k)] = t.get(i, j, k) - v;
            }
        }
    }
    res
}

/// Levenberg-Marquardt on all three factors at once (dims × rank layout).
/// Returns the polished factors and their relative error, or `None` when no
/// step was accepted.
fn lm_polish(
    t: &Tensor3,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    iters: usize,
) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64)> {
    let [d1, d2, d3] = t.dims();
    let n = a.ncols();
    let norm = t.frobenius_norm().max(f64::MIN_POSITIVE);
    let (pb, pc) = (d1 * n, (d1 + d2) * n);
    let p = (d1 + d2 + d3) * n;
    let (mut a, mut b, mut c) = (a.clone(), b.clone(), c.clone());
    let mut res = cp_residual(t, &a, &b, &c);
    let mut cost = res.norm_squared();
    let mut mu = -1.0;
    let mut accepted = false;
    for _ in 0..iters {
        if cost.sqrt() / norm < 1e-14 {
            break;
        }
        let mut jac = DMatrix::zeros(t.len(), p);
        for i in 0..d1 {
            for j in 0..d2 {
                for k in 0..d3 {
                    let row = t.offset(i, j, k);
                    for r in 0..n {
                        jac[(row, i * n + r)] = b[(j, r)] * c[(k, r)];
                        jac[(row, pb + j * n + r)] = a[(i, r)] * c[(k, r)];
                        jac[(row, pc + k * n + r)] = a[(i, r)] * b[(j, r)];
                    }
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        if mu < 0.0 {
            mu = 1e-3 * jtj.diagonal().max();
        }
        let mut stepped = false;
        for _ in 0..30 {
            let mut m = jtj.clone();
            for d in 0..p {
                m[(d, d)] += mu;
            }
            let Some(ch) = m.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let delta = ch.solve(&g);
            let na = DMatrix::from_fn(d1, n, |i, r| a[(i, r)] + delta[i * n + r]);
            let nb = DMatrix::from_fn(d2, n, |j, r| b[(j, r)] + delta[pb + j * n + r]);
            let nc = DMatrix::from_fn(d3, n, |k, r| c[(k, r)] + delta[pc + k * n + r]);
            let nres = cp_residual(t, &na, &nb, &nc);
            let ncost = nres.norm_squared();
            if ncost < cost {
                (a, b, c, res, cost) = (na, nb, nc, nres, ncost);
                mu = (mu / 3.0).max(f64::MIN_POSITIVE);
                stepped = true;
                break;
            }
            mu *= 4.0;
        }
        if !stepped {
            break;
        }
        accepted = true;
    }
    accepted.then(|| (a, b, c, cost.sqrt() / norm))
}

/// Least-squares update of the factor for `mode` given the other two
/// (passed in increasing mode order).
fn als_update(t: &Tensor3, mode: Mode, f: &DMatrix<f64>, g: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let [d1, d2, d3] = t.dims();
    let n = f.ncols();
    let rows = t.dims()[mode.index()];
    // MTTKRP: m[x, r] = Σ T(..) f[y, r] g[z, r] over the two other modes.
    let mut m = DMatrix::zeros(rows, n);
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let v = t.get(i, j, k);
                if v == 0.0 {
                    continue;
                }
                let (x, y, z) = match mode {
                    Mode::First => (i, j, k),
                    Mode::Second => (j, i, k),
                    Mode::Third => (k, i, j),
                };
                for r in 0..n {
                    m[(x, r)] += v * f[(y, r)] * g[(z, r)];
                }
            }
        }
    }
    let mut gram = (f.transpose() * f).component_mul(&(g.transpose() * g));
    if ridge > 0.0 {
        let mu = ridge * gram.trace() / n as f64;
        for r in 0..n {
            gram[(r, r)] += mu;
        }
    }
    let rhs = m.transpose();
    let solved = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let repaired = gram + DMatrix::identity(n, n) * ALS_RIDGE;
            match repaired.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => return Err(PsrnnError::SingularUpdate { mode: mode.index() + 1 }),
            }
        }
    };
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(PsrnnError::SingularUpdate { mode: mode.index() + 1 });
    }
    Ok(solved.transpose())
}

/// Equalizes column norms across the three factors so no factor drifts
/// towards overflow while the product stays fixed.
fn rebalance(a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, c: &mut DMatrix<f64>) {
    for r in 0..a.ncols() {
        let na = a.column(r).norm();
        let nb = b.column(r).norm();
        let nc = c.column(r).norm();
        if na == 0.0 || nb == 0.0 || nc == 0.0 {
            continue;
        }
        let g = (na * nb * nc).cbrt();
        a.column_mut(r).scale_mut(g / na);
        b.column_mut(r).scale_mut(g / nb);
        c.column_mut(r).scale_mut(g / nc);
    }
}
