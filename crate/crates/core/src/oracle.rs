//! Exact discrete HMM ground truth: sampling and the normalized forward filter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{PsrnnError, Result};

/// Hidden Markov model with column-stochastic parameters:
/// `transition[(s', s)] = P(s' | s)` and `emission[(o, s)] = P(o | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmSpecJson", into = "HmmSpecJson")]
pub struct HmmSpec {
    transition: DMatrix<f64>,
    emission: DMatrix<f64>,
    initial: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HmmSpecJson {
    /// Rows indexed by next state, columns by current state.
    transition: Vec<Vec<f64>>,
    /// Rows indexed by symbol, columns by state.
    emission: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PsrnnError::InvalidArgument(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TryFrom<HmmSpecJson> for HmmSpec {
    type Error = PsrnnError;

    fn try_from(j: HmmSpecJson) -> Result<HmmSpec> {
        HmmSpec::new(
            rows_to_matrix("transition", &j.transition)?,
            rows_to_matrix("emission", &j.emission)?,
            DVector::from_vec(j.initial),
        )
    }
}

impl From<HmmSpec> for HmmSpecJson {
    fn from(s: HmmSpec) -> HmmSpecJson {
        HmmSpecJson {
            transition: matrix_to_rows(&s.transition),
            emission: matrix_to_rows(&s.emission),
            initial: s.initial.iter().copied().collect(),
        }
    }
}

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_stochastic(name: &str, m: &DMatrix<f64>) -> Result<()> {
    for (c, col) in m.column_iter().enumerate() {
        if col.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(PsrnnError::InvalidArgument(format!(
                "{name}: column {c} has a negative or non-finite entry"
            )));
        }
        let s: f64 = col.sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(PsrnnError::InvalidArgument(format!("{name}: column {c} sums to {s}")));
        }
    }
    Ok(())
}

impl HmmSpec {
    pub fn new(transition: DMatrix<f64>, emission: DMatrix<f64>, initial: DVector<f64>) -> Result<HmmSpec> {
        let s = transition.nrows();
        if s == 0 || transition.ncols() != s || emission.ncols() != s || initial.len() != s {
            return Err(PsrnnError::DimensionMismatch(format!(
                "HMM shapes: transition {:?}, emission {:?}, initial {}",
                transition.shape(),
                emission.shape(),
                initial.len()
            )));
        }
        if emission.nrows() == 0 {
            return Err(PsrnnError::InvalidArgument("HMM needs at least one symbol".into()));
        }
        check_stochastic("transition", &transition)?;
        check_stochastic("emission", &emission)?;
        check_stochastic("initial", &DMatrix::from_column_slice(s, 1, initial.as_slice()))?;
        Ok(HmmSpec {
            transition,
            emission,
            initial,
        })
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn n_symbols(&self) -> usize {
        self.emission.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn emission(&self) -> &DMatrix<f64> {
        &self.emission
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    /// Stationary state distribution by power iteration.
    pub fn stationary(&self) -> DVector<f64> {
        let n = self.n_states();
        let mut p = DVector::from_element(n, 1.0 / n as f64);
        for _ in 0..100_000 {
            let next = &self.transition * &p;
            let delta = (&next - &p).amax();
            p = next;
            if delta < 1e-16 {
                break;
            }
        }
        let s = p.sum();
        p / s
    }

    /// Stationary symbol distribution `O π∞`.
    pub fn stationary_symbols(&self) -> DVector<f64> {
        &self.emission * self.stationary()
    }

    /// Deterministic cycle `0 → 1 → … → n−1 → 0` with identity emissions.
    pub fn cycle(n: usize) -> HmmSpec {
        let t = DMatrix::from_fn(n, n, |i, j| if i == (j + 1) % n { 1.0 } else { 0.0 });
        let mut initial = DVector::zeros(n);
        initial[0] = 1.0;
        HmmSpec::new(t, DMatrix::identity(n, n), initial).expect("cycle HMM is valid")
    }

    /// Draws a spec with Dirichlet(1) columns, resampling until it passes
    /// `opts`. Deterministic per seed.
    pub fn random(states: usize, symbols: usize, seed: u64, opts: &RandomHmmOptions) -> Result<HmmSpec> {
        if states == 0 || symbols == 0 {
            return Err(PsrnnError::InvalidArgument(
                "random HMM needs at least one state and one symbol".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..opts.max_attempts {
            let t = dirichlet_columns(states, states, &mut rng);
            let e = dirichlet_columns(symbols, states, &mut rng);
            let init = dirichlet_columns(states, 1, &mut rng);
            let spec = HmmSpec::new(t, e, DVector::from_column_slice(init.as_slice()))?;
            if spec.acceptable(opts) {
                return Ok(spec);
            }
        }
        Err(PsrnnError::DegenerateSample(format!(
            "no acceptable {states}-state/{symbols}-symbol HMM in {} draws",
            opts.max_attempts
        )))
    }

    fn acceptable(&self, opts: &RandomHmmOptions) -> bool {
        let min_t = self.transition.min();
        let min_e = self.emission.min();
        if min_t < opts.min_entry || min_e < opts.min_entry {
            return false;
        }
        if opts.min_condition <= 0.0 {
            return true;
        }
        let sv = self.bigram().singular_values;
        let r = self.n_states().min(self.n_symbols());
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv[0] > 0.0 && sv[r - 1] / sv[0] >= opts.min_condition
    }

    /// SVD of the stationary bigram matrix `P(o_t = i, o_{t−1} = j)`.
    fn bigram(&self) -> nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
        let st = self.stationary();
        let joint = &self.emission * &self.transition * DMatrix::from_diagonal(&st) * self.emission.transpose();
        joint.svd(false, false)
    }

    pub fn sample(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut state = categorical(self.initial.iter().copied(), &mut rng);
        for _ in 0..len {
            out.push(categorical(self.emission.column(state).iter().copied(), &mut rng));
            state = categorical(self.transition.column(state).iter().copied(), &mut rng);
        }
        out
    }

    /// Normalized forward recursion over `seq`.
    ///
    /// `predictive[t]` is `p(o_{t+1} | o_{1:t})` (0-based: the distribution of
    /// `seq[t + 1]` after observing `seq[..=t]`). BPC and OSPA score those
    /// predictions against `seq[1..]`, matching how models are scored.
    pub fn forward_filter(&self, seq: &[usize]) -> Result<ForwardResult> {
        let mut beliefs = Vec::with_capacity(seq.len());
        let mut predictive = Vec::with_capacity(seq.len());
        let mut prior = self.initial.clone();
        for (t, &o) in seq.iter().enumerate() {
            if o >= self.n_symbols() {
                return Err(PsrnnError::InvalidArgument(format!(
                    "symbol {o} at step {t} outside alphabet of {}",
                    self.n_symbols()
                )));
            }
            let mut post = prior.component_mul(&self.emission.row(o).transpose());
            let z = post.sum();
            if !(z > 0.0) {
                return Err(PsrnnError::ZeroProbabilityObservation { step: t, symbol: o });
            }
            post /= z;
            prior = &self.transition * &post;
            predictive.push((&self.emission * &prior).iter().copied().collect::<Vec<f64>>());
            beliefs.push(post.iter().copied().collect::<Vec<f64>>());
        }
        let (bpc, ospa) = score(&predictive, seq)?;
        Ok(ForwardResult {
            beliefs,
            predictive,
            bpc,
            ospa,
        })
    }
}

/// Scores `predictive[t]` against `seq[t + 1]`.
fn score(predictive: &[Vec<f64>], seq: &[usize]) -> Result<(f64, f64)> {
    if seq.len() < 2 {
        return Ok((f64::NAN, f64::NAN));
    }
    let n = seq.len() - 1;
    let mut bits = 0.0;
    let mut hits = 0usize;
    for t in 0..n {
        let p = &predictive[t];
        let target = seq[t + 1];
        if !(p[target] > 0.0) {
            return Err(PsrnnError::ZeroProbabilityObservation {
                step: t + 1,
                symbol: target,
            });
        }
        bits -= p[target].log2();
        if argmax(p) == target {
            hits += 1;
        }
    }
    Ok((bits / n as f64, hits as f64 / n as f64))
}

/// First index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// Posterior `P(s_t | o_{1:t})` per step.
    pub beliefs: Vec<Vec<f64>>,
    /// `p(o_{t+1} | o_{1:t})` per step.
    pub predictive: Vec<Vec<f64>>,
    pub bpc: f64,
    pub ospa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomHmmOptions {
    /// Reject specs with any transition/emission probability below this.
    pub min_entry: f64,
    /// Reject specs whose stationary bigram matrix has
    /// `σ_r / σ_1 < min_condition`, `r = min(states, symbols)`.
    pub min_condition: f64,
    pub max_attempts: usize,
}

impl Default for RandomHmmOptions {
    fn default() -> Self {
        RandomHmmOptions {
            min_entry: 1e-3,
            min_condition: 0.05,
            max_attempts: 1_000_000,
        }
    }
}

fn dirichlet_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = Exp1.sample(rng);
        x
    });
    for mut c in m.column_iter_mut() {
        let s = c.sum();
        c /= s;
        // Exact column sums so the 1e-12 stochasticity check never trips.
        let fix = 1.0 - c.sum();
        c[0] += fix;
    }
    m
}

fn categorical(probs: impl Iterator<Item = f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if p > 0.0 {
            last = i;
        }
        if u < acc {
            return i;
        }
    }
    last
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
