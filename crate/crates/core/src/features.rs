//! Feature maps and (history, observation, future) triple construction.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Sequence;
use crate::error::{check_dim, PsrnnError, Result};
use crate::par::Exec;

/// Random Fourier features for the Gaussian kernel
/// `k(x, y) = exp(−‖x − y‖² / (2σ²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    /// `D × d_in`, entries `N(0, σ⁻²)`.
    pub frequencies: DMatrix<f64>,
    /// Uniform on `[0, 2π)`.
    pub phases: DVector<f64>,
    pub bandwidth: f64,
}

impl RffMap {
    pub fn sample(d_in: usize, n_features: usize, bandwidth: f64, seed: u64) -> Result<RffMap> {
        if n_features == 0 || d_in == 0 {
            return Err(PsrnnError::InvalidArgument(
                "RFF needs positive input and feature dimensions".into(),
            ));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(PsrnnError::InvalidArgument(format!(
                "RFF bandwidth must be positive, got {bandwidth}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = DMatrix::from_fn(n_features, d_in, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z / bandwidth
        });
        let phases = DVector::from_fn(n_features, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
        Ok(RffMap {
            frequencies,
            phases,
            bandwidth,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.frequencies.nrows()
    }

    pub fn scale(&self) -> f64 {
        (2.0 / self.output_dim() as f64).sqrt()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("RFF input", self.input_dim(), x.len())?;
        let scale = self.scale();
        Ok((0..self.output_dim())
            .map(|r| {
                let dot: f64 = self.frequencies.row(r).iter().zip(x).map(|(w, v)| w * v).sum();
                scale * (dot + self.phases[r]).cos()
            })
            .collect())
    }
}

/// Median pairwise Euclidean distance over a seeded subsample of at most
/// 2000 points.
pub fn fit_bandwidth(points: &[Vec<f64>], seed: u64) -> Result<f64> {
    const CAP: usize = 2000;
    if points.len() < 2 {
        return Err(PsrnnError::InvalidArgument(
            "median heuristic needs at least two points".into(),
        ));
    }
    let chosen: Vec<&Vec<f64>> = if points.len() > CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, points.len(), CAP).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &points[i]).collect()
    } else {
        points.iter().collect()
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for (i, a) in chosen.iter().enumerate() {
        for b in &chosen[i + 1..] {
            check_dim("bandwidth sample point", a.len(), b.len())?;
            let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(d.sqrt());
        }
    }
    let sigma = median(&mut dists);
    if !(sigma > 0.0) {
        return Err(PsrnnError::DegenerateSample(
            "median pairwise distance is zero; supply the bandwidth explicitly".into(),
        ));
    }
    Ok(sigma)
}

fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// History/future window lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub past: usize,
    pub future: usize,
}

impl WindowSpec {
    pub fn new(past: usize, future: usize) -> Result<WindowSpec> {
        if past == 0 || future == 0 {
            return Err(PsrnnError::InvalidArgument(
                "history and future windows must be at least 1".into(),
            ));
        }
        Ok(WindowSpec { past, future })
    }

    /// 0-based triple indices for a sequence of length `len`: the history
    /// window `t−past..t` and future window `t..t+future` both fit.
    pub fn triple_indices(&self, len: usize) -> Range<usize> {
        if len < self.past + self.future {
            return 0..0;
        }
        self.past..len - self.future + 1
    }
}

/// Linear dimensionality reduction `x ↦ basis · (x − mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `d_out × D`, orthonormal rows.
    pub basis: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Fraction of centered energy captured by the basis.
    pub explained: f64,
    /// Set when the `d_out`-th singular value is below 1e-12.
    pub rank_deficient: bool,
}

impl Projection {
    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("projection input", self.mean.len(), x.len())?;
        let centered = DVector::from_fn(x.len(), |i, _| x[i] - self.mean[i]);
        Ok((&self.basis * centered).iter().copied().collect())
    }
}

/// Above this size the basis comes from a randomized range finder.
const EXACT_SVD_LIMIT: usize = 600;

/// Centered SVD projection of `features` (one sample per row) onto its top
/// `d_out` right singular directions.
pub fn fit_projection(features: &DMatrix<f64>, d_out: usize, seed: u64) -> Result<Projection> {
    let (n, d) = features.shape();
    if d_out == 0 || d_out > d.min(n) {
        return Err(PsrnnError::InvalidArgument(format!(
            "projection dimension {d_out} must be in 1..={}",
            d.min(n)
        )));
    }
    let mean = DVector::from_fn(d, |j, _| features.column(j).sum() / n as f64);
    let mut centered = features.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let total = centered.norm_squared();
    let (basis, singular) = if n.min(d) <= EXACT_SVD_LIMIT {
        top_right_singular(&centered, d_out)?
    } else {
        randomized_right_singular(&centered, d_out, seed)?
    };
    let kept: f64 = singular.iter().map(|s| s * s).sum();
    let explained = if total > 0.0 { (kept / total).min(1.0) } else { 1.0 };
    let rank_deficient = singular.last().is_none_or(|&s| s < 1e-12);
    Ok(Projection {
        basis,
        mean,
        explained,
        rank_deficient,
    })
}

fn sorted_svd(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let svd = m.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| PsrnnError::NumericalFailure("SVD did not return Vᵀ".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let rows = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    Ok((s, rows))
}

fn top_right_singular(m: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (s, v_t) = sorted_svd(m)?;
    Ok((v_t.rows(0, k).into_owned(), s[..k].to_vec()))
}

fn randomized_right_singular(m: &DMatrix<f64>, k: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    const OVERSAMPLE: usize = 10;
    const POWER_ITERS: usize = 4;
    let l = (k + OVERSAMPLE).min(m.ncols()).min(m.nrows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(m.ncols(), l, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = (m * omega).qr().q();
    for _ in 0..POWER_ITERS {
        let z = (m.transpose() * &q).qr().q();
        q = (m * z).qr().q();
    }
    let b = q.transpose() * m;
    let (s, v_t) = sorted_svd(&b)?;
    Ok((v_t.rows(0, k).into_owned(), s[..k].to_vec()))
}

pub fn augment_constant(x: &[f64], c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() + 1);
    out.extend_from_slice(x);
    out.push(c);
    out
}

/// Encodes a window of raw observations into a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamEncoder {
    /// Concatenated indicator vectors of the symbols in the window.
    OneHot { alphabet: usize },
    /// Concatenated raw vectors.
    Identity { dim: usize },
    /// RFF of the stacked window followed by an optional projection.
    Rff {
        rff: RffMap,
        projection: Option<Projection>,
    },
}

impl StreamEncoder {
    pub fn output_dim(&self, window: usize) -> usize {
        match self {
            StreamEncoder::OneHot { alphabet } => alphabet * window,
            StreamEncoder::Identity { dim } => dim * window,
            StreamEncoder::Rff { rff, projection } => {
                projection.as_ref().map_or(rff.output_dim(), Projection::output_dim)
            }
        }
    }

    pub fn encode(&self, seq: &Sequence, range: Range<usize>) -> Result<Vec<f64>> {
        if range.end > seq.len() {
            return Err(PsrnnError::InvalidArgument(format!(
                "window {range:?} exceeds sequence length {}",
                seq.len()
            )));
        }
        match (self, seq) {
            (StreamEncoder::OneHot { alphabet }, Sequence::Discrete(s)) => {
                let mut out = vec![0.0; alphabet * range.len()];
                for (w, &sym) in s[range].iter().enumerate() {
                    if sym >= *alphabet {
                        return Err(PsrnnError::InvalidArgument(format!(
                            "symbol {sym} outside alphabet of {alphabet}"
                        )));
                    }
                    out[w * alphabet + sym] = 1.0;
                }
                Ok(out)
            }
            (StreamEncoder::Identity { dim }, Sequence::Continuous(rows)) => {
                let n = range.len();
                let stacked = stack(&rows[range])?;
                check_dim("identity stream", dim * n, stacked.len())?;
                Ok(stacked)
            }
            (StreamEncoder::Rff { rff, projection }, Sequence::Continuous(rows)) => {
                let f = rff.apply(&stack(&rows[range])?)?;
                match projection {
                    Some(p) => p.apply(&f),
                    None => Ok(f),
                }
            }
            _ => Err(PsrnnError::InvalidArgument(
                "encoder kind does not match the sequence kind".into(),
            )),
        }
    }
}

pub(crate) fn stack(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(dim * rows.len());
    for r in rows {
        check_dim("observation width", dim, r.len())?;
        out.extend_from_slice(r);
    }
    Ok(out)
}

/// One moment sample. `next_future` is `None` at the last index of a
/// sequence, where `φ_{t+1}` would run past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTriple {
    pub history: Vec<f64>,
    pub observation: Vec<f64>,
    pub future: Vec<f64>,
    pub next_future: Option<Vec<f64>>,
}

/// The three stream encoders used by two-stage regression.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleEncoders {
    pub history: StreamEncoder,
    pub observation: StreamEncoder,
    pub future: StreamEncoder,
    /// Constant appended to every future feature vector.
    pub future_constant: Option<f64>,
}

impl TripleEncoders {
    /// `(d_history, d_obs, d_future)`
    pub fn dims(&self, w: WindowSpec) -> (usize, usize, usize) {
        (
            self.history.output_dim(w.past),
            self.observation.output_dim(1),
            self.future.output_dim(w.future) + usize::from(self.future_constant.is_some()),
        )
    }

    fn future(&self, seq: &Sequence, range: Range<usize>) -> Result<Vec<f64>> {
        let f = self.future.encode(seq, range)?;
        Ok(match self.future_constant {
            Some(c) => augment_constant(&f, c),
            None => f,
        })
    }
}

/// Builds every triple of every sequence; windows never cross sequence
/// boundaries. Sequences are processed independently and concatenated in
/// order.
pub fn build_triples(seqs: &[Sequence], w: WindowSpec, enc: &TripleEncoders, exec: Exec) -> Result<Vec<FeatureTriple>> {
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < w.past + w.future {
            return Err(PsrnnError::SequenceTooShort {
                index: i,
                len: s.len(),
                need: w.past + w.future,
            });
        }
    }
    let per_seq = exec.map(seqs, |seq| {
        let idx = w.triple_indices(seq.len());
        let last = idx.end - 1;
        idx.map(|t| {
            let next_future = if t < last {
                Some(enc.future(seq, t + 1..t + 1 + w.future)?)
            } else {
                None
            };
            Ok(FeatureTriple {
                history: enc.history.encode(seq, t - w.past..t)?,
                observation: enc.observation.encode(seq, t..t + 1)?,
                future: enc.future(seq, t..t + w.future)?,
                next_future,
            })
        })
        .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::new();
    for part in per_seq {
        out.extend(part?);
    }
    Ok(out)
}

/// Stacked windows of `len` observations starting at every index in
/// `starts` (for fitting stream encoders).
pub fn window_samples(seqs: &[Sequence], starts: impl Fn(usize) -> Range<usize>, len: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for seq in seqs {
        let Sequence::Continuous(rows) = seq else {
            return Err(PsrnnError::InvalidArgument(
                "window samples need continuous observations".into(),
            ));
        };
        for t in starts(rows.len()) {
            if t + len <= rows.len() {
                out.push(stack(&rows[t..t + len])?);
            }
        }
    }
    Ok(out)
}

/// Fits an RFF-then-projection encoder on stacked windows: bandwidth from the
/// median heuristic, `n_features` frequencies, projection to `d_out`.
/// At most `max_fit_samples` windows (seeded subsample) enter the SVD.
pub fn fit_rff_encoder(
    samples: &[Vec<f64>],
    n_features: usize,
    d_out: usize,
    max_fit_samples: usize,
    seed: u64,
) -> Result<StreamEncoder> {
    let bandwidth = fit_bandwidth(samples, seed)?;
    let d_in = samples[0].len();
    let rff = RffMap::sample(d_in, n_features, bandwidth, seed.wrapping_add(1))?;
    let chosen: Vec<&Vec<f64>> = if samples.len() > max_fit_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let mut idx = index::sample(&mut rng, samples.len(), max_fit_samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &samples[i]).collect()
    } else {
        samples.iter().collect()
    };
    let mut feats = DMatrix::zeros(chosen.len(), n_features);
    for (r, x) in chosen.iter().enumerate() {
        for (c, v) in rff.apply(x)?.into_iter().enumerate() {
            feats[(r, c)] = v;
        }
    }
    let d_out = d_out.min(chosen.len()).min(n_features);
    let projection = fit_projection(&feats, d_out, seed.wrapping_add(3))?;
    Ok(StreamEncoder::Rff {
        rff,
        projection: Some(projection),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn bandwidth_examples() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(fit_bandwidth(&pts, 0).unwrap(), 2.0);
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(fit_bandwidth(&two, 0).unwrap(), 5.0);
        let same = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(fit_bandwidth(&same, 0), Err(PsrnnError::DegenerateSample(_))));
        assert!(fit_bandwidth(&[vec![1.0]], 0).is_err());
    }

    #[test]
    fn bandwidth_subsample_is_seeded() {
        let mut r = rng(1);
        let pts: Vec<Vec<f64>> = (0..2500).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        assert_eq!(fit_bandwidth(&pts, 4).unwrap(), fit_bandwidth(&pts, 4).unwrap());
    }

    #[test]
    fn rff_self_and_far_kernel() {
        let sigma = 1.5;
        let m = RffMap::sample(3, 2000, sigma, 7).unwrap();
        let x = [0.3, -0.2, 1.0];
        let fx = m.apply(&x).unwrap();
        assert!((dot(&fx, &fx) - 1.0).abs() < 0.1);
        let y = [0.3 + 10.0 * sigma, -0.2, 1.0];
        let fy = m.apply(&y).unwrap();
        assert!(dot(&fx, &fy).abs() < 0.1);
        let s = m.scale();
        assert!(fx.iter().all(|v| v.abs() <= s));
        assert_eq!(fx.len(), 2000);
    }

    #[test]
    fn rff_kernel_approximation_statistics() {
        let sigma = 1.0;
        let m = RffMap::sample(4, 2000, sigma, 11).unwrap();
        let mut r = rng(12);
        let mut total = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let err = (dot(&m.apply(&x).unwrap(), &m.apply(&y).unwrap()) - gaussian_kernel(&x, &y, sigma)).abs();
            assert!(err <= 0.15);
            total += err;
        }
        assert!(total / 100.0 <= 0.05);
    }

    #[test]
    fn rff_errors_and_determinism() {
        assert!(RffMap::sample(2, 10, 0.0, 0).is_err());
        assert!(RffMap::sample(2, 0, 1.0, 0).is_err());
        let m = RffMap::sample(2, 10, 1.0, 3).unwrap();
        assert!(matches!(m.apply(&[1.0]), Err(PsrnnError::DimensionMismatch(_))));
        assert_eq!(m, RffMap::sample(2, 10, 1.0, 3).unwrap());
    }

    #[test]
    fn augment_examples() {
        assert_eq!(augment_constant(&[1.0, 2.0], 1.0), vec![1.0, 2.0, 1.0]);
        let x = [3.0, 4.0];
        let a = augment_constant(&x, 0.0);
        assert_eq!(dot(&a, &a).sqrt(), 5.0);
    }

    fn angle(a: &[f64], b: &[f64]) -> f64 {
        (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt()))
            .clamp(-1.0, 1.0)
            .acos()
    }

    #[test]
    fn constant_shrinks_normalization_angle() {
        // Two positive vectors: compare the sum-normalized and two-norm
        // normalized versions of each after augmentation; the sum-normalized
        // difference direction and the two-norm one align as c grows.
        let p = [0.7, 0.2, 0.1];
        let q = [0.1, 0.3, 0.6];
        let mut last = f64::INFINITY;
        for c in [1.0, 10.0, 100.0] {
            let pa = augment_constant(&p, c);
            let qa = augment_constant(&q, c);
            let s = |v: &[f64]| -> Vec<f64> {
                let t: f64 = v.iter().sum();
                v.iter().map(|x| x / t).collect()
            };
            let n = |v: &[f64]| -> Vec<f64> {
                let t = dot(v, v).sqrt();
                v.iter().map(|x| x / t).collect()
            };
            let ds: Vec<f64> = s(&pa).iter().zip(s(&qa)).map(|(a, b)| a - b).collect();
            let dn: Vec<f64> = n(&pa).iter().zip(n(&qa)).map(|(a, b)| a - b).collect();
            let th = angle(&ds, &dn);
            assert!(th < last, "c = {c}: {th} !< {last}");
            last = th;
        }
    }

    #[test]
    fn projection_of_orthogonal_features_is_rotation() {
        // Rows already span a 2-D space in R²: projection is a rotation and
        // reconstruction through basisᵀ is exact.
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
        let p = fit_projection(&x, 2, 0).unwrap();
        let bbt = &p.basis * p.basis.transpose();
        assert!((bbt - DMatrix::identity(2, 2)).amax() < 1e-10);
        for r in 0..4 {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            let z = DVector::from_vec(p.apply(&row).unwrap());
            let back = p.basis.transpose() * z + &p.mean;
            assert!((back - DVector::from_vec(row)).amax() < 1e-12);
        }
        assert!((p.explained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_of_rank_one_matrix() {
        let mut r = rng(5);
        let u: Vec<f64> = (0..30).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = DMatrix::from_fn(30, 8, |i, j| u[i] * v[j]);
        let p = fit_projection(&x, 1, 0).unwrap();
        // Full-SVD oracle: explained variance of the top direction of the
        // centered matrix.
        let mean = DVector::from_fn(8, |j, _| x.column(j).mean());
        let c = DMatrix::from_fn(30, 8, |i, j| x[(i, j)] - mean[j]);
        let s = c.clone().svd(false, false).singular_values;
        let top = s.iter().copied().fold(0.0, f64::max);
        let oracle = top * top / c.norm_squared();
        assert!((p.explained - oracle).abs() < 1e-12);
        assert!((p.explained - 1.0).abs() < 1e-10);
        assert!(!p.rank_deficient);
        let p2 = fit_projection(&x, 2, 0).unwrap();
        assert!(p2.rank_deficient);
    }

    #[test]
    fn randomized_projection_is_orthonormal() {
        let mut r = rng(8);
        let x = DMatrix::from_fn(700, 650, |_, _| r.random_range(-1.0..1.0));
        let p = fit_projection(&x, 20, 1).unwrap();
        let bbt = &p.basis * p.basis.transpose();
        assert!((bbt - DMatrix::identity(20, 20)).amax() < 1e-10);
        assert!(fit_projection(&x, 0, 1).is_err());
    }

    #[test]
    fn window_indices() {
        let w = WindowSpec::new(1, 1).unwrap();
        assert_eq!(w.triple_indices(2), 1..2);
        assert_eq!(w.triple_indices(1), 0..0);
        let w = WindowSpec::new(2, 3).unwrap();
        assert_eq!(w.triple_indices(12), 2..10);
        assert!(WindowSpec::new(0, 1).is_err());
    }

    fn discrete_encoders(alphabet: usize) -> TripleEncoders {
        TripleEncoders {
            history: StreamEncoder::OneHot { alphabet },
            observation: StreamEncoder::OneHot { alphabet },
            future: StreamEncoder::OneHot { alphabet },
            future_constant: None,
        }
    }

    #[test]
    fn two_symbol_example() {
        let seq = Sequence::Discrete(vec![0, 1]);
        let w = WindowSpec::new(1, 1).unwrap();
        let t = build_triples(&[seq], w, &discrete_encoders(2), Exec::Sequential).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].history, vec![1.0, 0.0]);
        assert_eq!(t[0].observation, vec![0.0, 1.0]);
        assert_eq!(t[0].future, vec![0.0, 1.0]);
        assert_eq!(t[0].next_future, None);
    }

    #[test]
    fn too_short_sequence() {
        let w = WindowSpec::new(2, 2).unwrap();
        let err = build_triples(
            &[Sequence::Discrete(vec![0, 1, 0])],
            w,
            &discrete_encoders(2),
            Exec::Sequential,
        );
        assert!(matches!(
            err,
            Err(PsrnnError::SequenceTooShort {
                index: 0,
                len: 3,
                need: 4
            })
        ));
    }

    #[test]
    fn windows_align_with_raw_sequence() {
        let raw: Vec<usize> = vec![0, 2, 1, 1, 0, 2, 2, 1, 0, 0, 1, 2];
        let seq = Sequence::Discrete(raw.clone());
        for (p, k) in [(1, 1), (2, 3), (3, 2), (1, 10)] {
            let w = WindowSpec::new(p, k).unwrap();
            let mut enc = discrete_encoders(3);
            enc.future_constant = Some(1.0);
            let triples = build_triples(std::slice::from_ref(&seq), w, &enc, Exec::Parallel).unwrap();
            assert_eq!(triples.len(), raw.len() - p - k + 1);
            for (n, tr) in triples.iter().enumerate() {
                let t = p + n;
                let hot = |syms: &[usize]| {
                    let mut v = vec![0.0; 3 * syms.len()];
                    for (i, &s) in syms.iter().enumerate() {
                        v[3 * i + s] = 1.0;
                    }
                    v
                };
                assert_eq!(tr.history, hot(&raw[t - p..t]));
                assert_eq!(tr.observation, hot(&raw[t..t + 1]));
                assert_eq!(tr.future, augment_constant(&hot(&raw[t..t + k]), 1.0));
                match &tr.next_future {
                    Some(nf) => assert_eq!(nf, &augment_constant(&hot(&raw[t + 1..t + 1 + k]), 1.0)),
                    None => assert_eq!(t + k, raw.len()),
                }
            }
        }
    }

    #[test]
    fn rff_stream_on_continuous_windows() {
        let mut r = rng(3);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        let seqs = vec![Sequence::Continuous(rows)];
        let samples = window_samples(&seqs, |n| 0..n, 3).unwrap();
        assert_eq!(samples.len(), 58);
        let enc = fit_rff_encoder(&samples, 200, 5, 1000, 9).unwrap();
        assert_eq!(enc.output_dim(3), 5);
        let v = enc.encode(&seqs[0], 4..7).unwrap();
        assert_eq!(v.len(), 5);
        assert!(enc.encode(&Sequence::Discrete(vec![0, 1, 2]), 0..3).is_err());
    }
}
