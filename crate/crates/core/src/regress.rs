//! Moment accumulation, ridge regression and SVD pseudo-inverses.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, PsrnnError, Result};
use crate::features::FeatureTriple;
use crate::par::{chunk_ranges, Exec};
use crate::tensor::Tensor3;

/// Streaming sums over `(η_t, ω_t, φ_t, φ_{t+1})` triples.
///
/// Sums are kept raw (never divided by the count) so two accumulators built
/// on disjoint data merge by addition.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    /// Σ φ_t
    pub future_sum: DVector<f64>,
    /// Σ η_t ⊗ φ_t, shape `d_h × d_f`.
    pub cross: DMatrix<f64>,
    /// Σ φ_{t+1} ⊗ ω_t ⊗ η_t, over triples that have a next window.
    pub transition: Tensor3,
    /// Σ ω_t ⊗ ω_t ⊗ η_t
    pub normalizer: Tensor3,
    pub count: usize,
    /// Number of triples that contributed to `transition`.
    pub pair_count: usize,
}

impl MomentAccumulator {
    pub fn new(d_history: usize, d_obs: usize, d_future: usize) -> MomentAccumulator {
        MomentAccumulator {
            future_sum: DVector::zeros(d_future),
            cross: DMatrix::zeros(d_history, d_future),
            transition: Tensor3::zeros([d_future, d_obs, d_history]),
            normalizer: Tensor3::zeros([d_obs, d_obs, d_history]),
            count: 0,
            pair_count: 0,
        }
    }

    /// `(d_history, d_obs, d_future)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.cross.nrows(), self.normalizer.dims()[0], self.cross.ncols())
    }

    pub fn accumulate(&mut self, t: &FeatureTriple) -> Result<()> {
        let (dh, d_o, df) = self.dims();
        check_dim("history features", dh, t.history.len())?;
        check_dim("observation features", d_o, t.observation.len())?;
        check_dim("future features", df, t.future.len())?;
        if let Some(nf) = &t.next_future {
            check_dim("next future features", df, nf.len())?;
        }
        for (s, v) in self.future_sum.iter_mut().zip(&t.future) {
            *s += v;
        }
        for (i, &h) in t.history.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            for (j, &f) in t.future.iter().enumerate() {
                self.cross[(i, j)] += h * f;
            }
        }
        if let Some(nf) = &t.next_future {
            self.transition.add_outer(1.0, nf, &t.observation, &t.history)?;
            self.pair_count += 1;
        }
        self.normalizer
            .add_outer(1.0, &t.observation, &t.observation, &t.history)?;
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(PsrnnError::DimensionMismatch(format!(
                "merging accumulators of dims {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        self.future_sum += &other.future_sum;
        self.cross += &other.cross;
        self.transition.add_assign(&other.transition)?;
        self.normalizer.add_assign(&other.normalizer)?;
        self.count += other.count;
        self.pair_count += other.pair_count;
        Ok(())
    }

    /// Accumulates `triples` in contiguous chunks and merges the partial sums
    /// in chunk order, so the result does not depend on the thread count.
    pub fn from_triples(
        triples: &[FeatureTriple],
        dims: (usize, usize, usize),
        exec: Exec,
    ) -> Result<MomentAccumulator> {
        let (dh, d_o, df) = dims;
        let ranges = chunk_ranges(triples.len(), 16);
        let parts = exec.map(&ranges, |r| {
            let mut acc = MomentAccumulator::new(dh, d_o, df);
            for t in &triples[r.clone()] {
                acc.accumulate(t)?;
            }
            Ok::<_, PsrnnError>(acc)
        });
        let mut total = MomentAccumulator::new(dh, d_o, df);
        for p in parts {
            total.merge(&p?)?;
        }
        Ok(total)
    }
}

fn svd_parts(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(PsrnnError::NumericalFailure("matrix has non-finite entries".into()));
    }
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| PsrnnError::NumericalFailure("SVD did not return U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| PsrnnError::NumericalFailure("SVD did not return Vᵀ".into()))?;
    Ok((u, svd.singular_values, v_t))
}

/// Filtered inverse `V diag(f(σ)) Uᵀ` of `m = U diag(σ) Vᵀ`.
fn spectral_inverse(m: &DMatrix<f64>, f: impl Fn(f64, f64) -> f64) -> Result<DMatrix<f64>> {
    let (u, s, v_t) = svd_parts(m)?;
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let mut scaled = v_t.transpose();
    for (c, &sv) in s.iter().enumerate() {
        let g = f(sv, s_max);
        scaled.column_mut(c).scale_mut(g);
    }
    Ok(scaled * u.transpose())
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond · σ_max` are
/// treated as zero. A zero matrix maps to the zero matrix.
pub fn pinv(m: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    if rcond < 0.0 {
        return Err(PsrnnError::InvalidArgument("rcond must be non-negative".into()));
    }
    spectral_inverse(
        m,
        |s, s_max| {
            if s_max > 0.0 && s > rcond * s_max {
                1.0 / s
            } else {
                0.0
            }
        },
    )
}

/// Truncated ridge inverse `(MᵀM + λI)⁻¹Mᵀ` restricted to singular directions
/// with `σ > rcond · σ_max`. With `λ = 0` this is [`pinv`].
pub fn regularized_pinv(m: &DMatrix<f64>, lambda: f64, rcond: f64) -> Result<DMatrix<f64>> {
    if lambda < 0.0 || rcond < 0.0 {
        return Err(PsrnnError::InvalidArgument(
            "ridge λ and rcond must be non-negative".into(),
        ));
    }
    spectral_inverse(m, |s, s_max| {
        if s_max > 0.0 && s > rcond * s_max {
            s / (s * s + lambda)
        } else {
            0.0
        }
    })
}

/// Ridge regression `argmin_W ‖XW − Y‖² + λ‖W‖²` = `(XᵀX + λI)⁻¹XᵀY`.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    if lambda < 0.0 {
        return Err(PsrnnError::InvalidArgument("ridge λ must be non-negative".into()));
    }
    check_dim("ridge rows", x.nrows(), y.nrows())?;
    let gram = x.transpose() * x + DMatrix::identity(x.ncols(), x.ncols()) * lambda;
    let rhs = x.transpose() * y;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let jittered = gram + DMatrix::identity(x.ncols(), x.ncols()) * 1e-12;
            jittered
                .cholesky()
                .ok_or_else(|| {
                    PsrnnError::NumericalFailure("ridge normal equations indefinite after 1e-12 jitter".into())
                })?
                .solve(&rhs)
        }
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(PsrnnError::NumericalFailure("ridge solution is not finite".into()));
    }
    Ok(w)
}

/// Ridge regression with an unpenalized intercept. Returns `(weights, bias)`
/// with `weights` of shape `p × q`, so predictions are `xᵀW + bᵀ`.
pub fn ridge_with_intercept(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dim("ridge rows", x.nrows(), y.nrows())?;
    if x.nrows() == 0 {
        return Err(PsrnnError::EmptyData("ridge regression on zero rows".into()));
    }
    let n = x.nrows() as f64;
    let x_mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let y_mean = DVector::from_fn(y.ncols(), |j, _| y.column(j).sum() / n);
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - y_mean[j]);
    let w = ridge_solve(&xc, &yc, lambda)?;
    let bias = &y_mean - w.transpose() * &x_mean;
    Ok((w, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn ridge_identity_case() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let w = ridge_solve(&i2, &i2, 1.0).unwrap();
        assert!((w - i2 * 0.5).amax() < 1e-15);
    }

    #[test]
    fn ridge_zero_lambda_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(4, 4, &mut rng) + DMatrix::identity(4, 4) * 2.0;
        let y = random_matrix(4, 3, &mut rng);
        let w = ridge_solve(&x, &y, 0.0).unwrap();
        let direct = x.clone().try_inverse().unwrap() * &y;
        assert!((w - direct).amax() < 1e-10);
    }

    #[test]
    fn ridge_rejects_negative_lambda() {
        let x = DMatrix::<f64>::identity(2, 2);
        assert!(ridge_solve(&x, &x, -1.0).is_err());
    }

    #[test]
    fn ridge_minimizes_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(20, 4, &mut rng);
        let y = random_matrix(20, 2, &mut rng);
        let lambda = 0.7;
        let w = ridge_solve(&x, &y, lambda).unwrap();
        let objective = |w: &DMatrix<f64>| (&x * w - &y).norm_squared() + lambda * w.norm_squared();
        let base = objective(&w);
        for _ in 0..50 {
            let mut d = random_matrix(4, 2, &mut rng);
            d *= 1e-3 / d.norm();
            assert!(objective(&(&w + d)) >= base);
        }
    }

    #[test]
    fn intercept_regression_recovers_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(50, 3, &mut rng);
        let y = DMatrix::from_element(50, 1, 2.5);
        let (w, b) = ridge_with_intercept(&x, &y, 1e-3).unwrap();
        assert!(w.amax() < 1e-12);
        assert!((b[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pinv_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv(&d, 1e-10).unwrap();
        assert!((p - DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])).amax() < 1e-15);

        let th: f64 = 0.3;
        let q = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        assert!((pinv(&q, 1e-10).unwrap() - q.transpose()).amax() < 1e-14);

        assert_eq!(pinv(&DMatrix::zeros(3, 2), 1e-10).unwrap(), DMatrix::zeros(2, 3));
    }

    #[test]
    fn pinv_penrose_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(5, 3), (3, 5), (50, 50), (12, 40)] {
            let m = random_matrix(r, c, &mut rng);
            let p = pinv(&m, 1e-10).unwrap();
            assert!((&m * &p * &m - &m).amax() < 1e-8);
            assert!((&p * &m * &p - &p).amax() < 1e-8);
            let mp = &m * &p;
            assert!((&mp - mp.transpose()).amax() < 1e-8);
            let pm = &p * &m;
            assert!((&pm - pm.transpose()).amax() < 1e-8);
        }
    }

    #[test]
    fn regularized_pinv_matches_ridge_and_truncates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_matrix(6, 4, &mut rng);
        let lambda = 0.3;
        let r = regularized_pinv(&m, lambda, 0.0).unwrap();
        let direct = (m.transpose() * &m + DMatrix::identity(4, 4) * lambda)
            .try_inverse()
            .unwrap()
            * m.transpose();
        assert!((r - direct).amax() < 1e-12);
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-3]);
        let t = regularized_pinv(&d, 0.0, 1e-2).unwrap();
        assert_eq!(t[(1, 1)], 0.0);
        assert!((t[(0, 0)] - 1.0).abs() < 1e-15);
    }

    fn triple(h: usize, o: usize, f: usize, f2: usize) -> FeatureTriple {
        FeatureTriple {
            history: one_hot(2, h),
            observation: one_hot(3, o),
            future: one_hot(2, f),
            next_future: Some(one_hot(2, f2)),
        }
    }

    #[test]
    fn single_triple_is_outer_product() {
        let mut acc = MomentAccumulator::new(2, 3, 2);
        acc.accumulate(&triple(1, 2, 0, 1)).unwrap();
        assert_eq!(acc.count, 1);
        let expect = crate::tensor::outer3(&one_hot(2, 1), &one_hot(3, 2), &one_hot(2, 1));
        assert_eq!(acc.transition, expect);
        assert_eq!(acc.cross[(1, 0)], 1.0);
        assert_eq!(acc.cross.sum(), 1.0);
        let mut last = triple(1, 2, 0, 1);
        last.next_future = None;
        acc.accumulate(&last).unwrap();
        assert_eq!((acc.count, acc.pair_count), (2, 1));
        assert_eq!(acc.transition, expect);
    }

    #[test]
    fn accumulate_checks_dims() {
        let mut acc = MomentAccumulator::new(2, 3, 2);
        let mut t = triple(0, 0, 0, 0);
        t.observation.push(0.0);
        assert!(matches!(acc.accumulate(&t), Err(PsrnnError::DimensionMismatch(_))));
        assert!(acc.merge(&MomentAccumulator::new(3, 3, 2)).is_err());
    }

    #[test]
    fn order_and_chunking_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let triples: Vec<FeatureTriple> = (0..300)
            .map(|_| FeatureTriple {
                history: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                observation: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
                future: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                next_future: Some((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            })
            .collect();
        let dims = (3, 2, 4);
        let a = MomentAccumulator::from_triples(&triples, dims, Exec::Sequential).unwrap();
        let b = MomentAccumulator::from_triples(&triples, dims, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let mut rev = triples.clone();
        rev.reverse();
        let mut c = MomentAccumulator::new(3, 2, 4);
        for t in &rev {
            c.accumulate(t).unwrap();
        }
        let rel = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let n: f64 = x.iter().map(|p| p * p).sum::<f64>().sqrt();
            d / n
        };
        assert!(rel(a.transition.data(), c.transition.data()) < 1e-9);
        assert!(rel(a.cross.as_slice(), c.cross.as_slice()) < 1e-9);
        assert_eq!(a.count, c.count);
    }
}
