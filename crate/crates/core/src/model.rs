//! PSRNN cells, filtering and CP factorization of trained cells.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{check_dim, PsrnnError, Result};
use crate::features::RffMap;
use crate::tensor::{cp_als_traced, cp_reconstruct, CpAlsOptions, CpFactors, Tensor3};

/// Smallest pre-normalization norm accepted by the two-norm update.
pub const NORM_EPS: f64 = 1e-12;
/// Default ridge added to `Z ×₃ q` before inversion in the full-normalization
/// update.
pub const DEFAULT_INV_EPS: f64 = 1e-8;

/// `u / ‖u‖₂`, or [`PsrnnError::NormalizationUnderflow`] when `‖u‖ < 1e-12`.
pub fn normalize(u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let norm = u.norm();
    if !(norm >= NORM_EPS) {
        return Err(PsrnnError::NormalizationUnderflow { norm });
    }
    Ok((u / norm, norm))
}

/// `u / max(‖u‖₂, 1e-12)`; the flag reports whether the floor was used.
pub fn normalize_guarded(u: &DVector<f64>) -> (DVector<f64>, f64, bool) {
    let norm = u.norm();
    if norm >= NORM_EPS {
        (u / norm, norm, false)
    } else {
        (u / NORM_EPS, NORM_EPS, true)
    }
}

/// Full bilinear cell: `u = W ×₂ o ×₃ q + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsrnnCell {
    /// `d_q × d_o × d_q`
    pub w: Tensor3,
    pub b: DVector<f64>,
}

impl PsrnnCell {
    pub fn new(w: Tensor3, b: DVector<f64>) -> Result<PsrnnCell> {
        let [dq, _, dq2] = w.dims();
        check_dim("cell tensor state modes", dq, dq2)?;
        check_dim("cell bias", dq, b.len())?;
        Ok(PsrnnCell { w, b })
    }

    pub fn preactivation(&self, q: &DVector<f64>, o: &DVector<f64>) -> Result<DVector<f64>> {
        let [dq, d_o, _] = self.w.dims();
        check_dim("state", dq, q.len())?;
        check_dim("observation", d_o, o.len())?;
        let data = self.w.data();
        let mut u = self.b.clone();
        for i in 0..dq {
            let mut acc = 0.0;
            for j in 0..d_o {
                let oj = o[j];
                if oj == 0.0 {
                    continue;
                }
                let row = &data[(i * d_o + j) * dq..(i * d_o + j + 1) * dq];
                let dot: f64 = row.iter().zip(q.iter()).map(|(w, v)| w * v).sum();
                acc += oj * dot;
            }
            u[i] += acc;
        }
        Ok(u)
    }
}

/// CP-factorized cell: `u = Aᵀ(B o ⊙ C q) + b`; row `r` of each factor holds
/// component `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedCell {
    pub factors: CpFactors,
    pub b: DVector<f64>,
}

impl FactorizedCell {
    pub fn new(factors: CpFactors, b: DVector<f64>) -> Result<FactorizedCell> {
        let [dq, _, dq2] = factors.dims();
        check_dim("factor state modes", dq, dq2)?;
        check_dim("cell bias", dq, b.len())?;
        Ok(FactorizedCell { factors, b })
    }

    pub fn preactivation(&self, q: &DVector<f64>, o: &DVector<f64>) -> Result<DVector<f64>> {
        let [dq, d_o, _] = self.factors.dims();
        check_dim("state", dq, q.len())?;
        check_dim("observation", d_o, o.len())?;
        let bo = &self.factors.b * o;
        let cq = &self.factors.c * q;
        Ok(self.factors.a.transpose() * bo.component_mul(&cq) + &self.b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Full(PsrnnCell),
    Factorized(FactorizedCell),
}

impl Cell {
    pub fn state_dim(&self) -> usize {
        match self {
            Cell::Full(c) => c.w.dims()[0],
            Cell::Factorized(c) => c.factors.dims()[0],
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Cell::Full(c) => c.w.dims()[1],
            Cell::Factorized(c) => c.factors.dims()[1],
        }
    }

    pub fn bias(&self) -> &DVector<f64> {
        match self {
            Cell::Full(c) => &c.b,
            Cell::Factorized(c) => &c.b,
        }
    }

    pub fn bias_mut(&mut self) -> &mut DVector<f64> {
        match self {
            Cell::Full(c) => &mut c.b,
            Cell::Factorized(c) => &mut c.b,
        }
    }

    pub fn preactivation(&self, q: &DVector<f64>, o: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Cell::Full(c) => c.preactivation(q, o),
            Cell::Factorized(c) => c.preactivation(q, o),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Cell::Full(c) => c.w.len() + c.b.len(),
            Cell::Factorized(c) => c.factors.a.len() + c.factors.b.len() + c.factors.c.len() + c.b.len(),
        }
    }
}

/// Two-norm normalized update of a full cell.
pub fn cell_update(cell: &PsrnnCell, q: &DVector<f64>, o: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(normalize(&cell.preactivation(q, o)?)?.0)
}

/// Two-norm normalized update of a factorized cell.
pub fn factorized_update(cell: &FactorizedCell, q: &DVector<f64>, o: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(normalize(&cell.preactivation(q, o)?)?.0)
}

/// Full-normalization update: `M = W ×₃ q`, `N = (Z ×₃ q + εI)⁻¹`, result is
/// `M N o` divided by its sum.
pub fn cell_update_full_norm(
    w: &Tensor3,
    z: &Tensor3,
    q: &DVector<f64>,
    o: &DVector<f64>,
    eps_inv: f64,
) -> Result<DVector<f64>> {
    let d_o = z.dims()[0];
    check_dim("observation", d_o, o.len())?;
    let m = w.contract_vec(crate::tensor::Mode::Third, q.as_slice())?;
    let zq = z.contract_vec(crate::tensor::Mode::Third, q.as_slice())? + DMatrix::identity(d_o, d_o) * eps_inv;
    let n_o = zq.lu().solve(o).ok_or(PsrnnError::SingularNormalizer)?;
    let v = m * n_o;
    let s = v.sum();
    if !s.is_finite() || s.abs() < NORM_EPS || v.iter().any(|x| !x.is_finite()) {
        return Err(PsrnnError::SingularNormalizer);
    }
    Ok(v / s)
}

/// Observation encoder: raw features (indicator or RFF or identity), minus a
/// fixed offset, times a trainable projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub input: InputKind,
    pub rff: Option<RffMap>,
    pub offset: DVector<f64>,
    /// `d_o × raw_dim`
    pub projection: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    Symbols { alphabet: usize },
    Vectors { dim: usize },
}

impl Encoder {
    pub fn one_hot(alphabet: usize) -> Encoder {
        Encoder {
            input: InputKind::Symbols { alphabet },
            rff: None,
            offset: DVector::zeros(alphabet),
            projection: DMatrix::identity(alphabet, alphabet),
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Features before the projection (offset already subtracted).
    pub fn raw_features(&self, seq: &Sequence, t: usize) -> Result<DVector<f64>> {
        let f = match (self.input, seq) {
            (InputKind::Symbols { alphabet }, Sequence::Discrete(s)) => {
                let sym = s[t];
                if sym >= alphabet {
                    return Err(PsrnnError::InvalidArgument(format!(
                        "symbol {sym} outside alphabet of {alphabet}"
                    )));
                }
                let mut v = DVector::zeros(alphabet);
                v[sym] = 1.0;
                v
            }
            (InputKind::Vectors { dim }, Sequence::Continuous(rows)) => {
                check_dim("observation width", dim, rows[t].len())?;
                match &self.rff {
                    Some(r) => DVector::from_vec(r.apply(&rows[t])?),
                    None => DVector::from_column_slice(&rows[t]),
                }
            }
            _ => {
                return Err(PsrnnError::InvalidArgument(
                    "sequence kind does not match the model input".into(),
                ))
            }
        };
        check_dim("encoder features", self.raw_dim(), f.len())?;
        Ok(f - &self.offset)
    }

    pub fn encode(&self, seq: &Sequence, t: usize) -> Result<DVector<f64>> {
        Ok(&self.projection * self.raw_features(seq, t)?)
    }
}

/// Affine readout from the top-layer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `d_y × d_q`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Decoder {
    pub fn apply(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.weight * q + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub cell: Cell,
    pub q1: DVector<f64>,
}

/// Bookkeeping stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub original_biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byte_alphabet: Option<Vec<u8>>,
    #[serde(default)]
    pub init: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsrnnModel {
    pub encoder: Encoder,
    pub layers: Vec<Layer>,
    pub decoder: Decoder,
    pub meta: ModelMeta,
}

/// Result of running a model over one sequence. `states[l][t]` is layer
/// `l`'s state after consuming observation `t`; `predictions[t]` decodes the
/// top state into a prediction of observation `t + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutput {
    pub states: Vec<Vec<DVector<f64>>>,
    pub predictions: Vec<DVector<f64>>,
    pub underflows: usize,
}

impl PsrnnModel {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(PsrnnError::InvalidArgument("model has no layers".into()));
        }
        let mut input = self.encoder.output_dim();
        for (l, layer) in self.layers.iter().enumerate() {
            check_dim(&format!("layer {l} observation"), input, layer.cell.obs_dim())?;
            check_dim(&format!("layer {l} q1"), layer.cell.state_dim(), layer.q1.len())?;
            input = layer.cell.state_dim();
        }
        check_dim("decoder input", input, self.decoder.weight.ncols())?;
        check_dim("decoder bias", self.decoder.weight.nrows(), self.decoder.bias.len())?;
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.encoder.input, InputKind::Symbols { .. })
    }

    pub fn top_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.cell.state_dim())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.projection.len()
            + self
                .layers
                .iter()
                .map(|l| l.cell.param_count() + l.q1.len())
                .sum::<usize>()
            + self.decoder.weight.len()
            + self.decoder.bias.len()
    }

    /// Evaluation filter: any normalization underflow is an error.
    pub fn filter(&self, seq: &Sequence) -> Result<FilterOutput> {
        self.run(seq, false)
    }

    /// Training-path filter: underflows are floored and counted.
    pub fn filter_guarded(&self, seq: &Sequence) -> Result<FilterOutput> {
        self.run(seq, true)
    }

    fn run(&self, seq: &Sequence, guarded: bool) -> Result<FilterOutput> {
        self.validate()?;
        let n_layers = self.layers.len();
        let mut out = FilterOutput {
            states: vec![Vec::with_capacity(seq.len()); n_layers],
            predictions: Vec::with_capacity(seq.len()),
            underflows: 0,
        };
        let mut q: Vec<DVector<f64>> = self.layers.iter().map(|l| l.q1.clone()).collect();
        for t in 0..seq.len() {
            let mut input = self.encoder.encode(seq, t)?;
            for (l, layer) in self.layers.iter().enumerate() {
                let u = layer.cell.preactivation(&q[l], &input)?;
                let next = if guarded {
                    let (v, _, floored) = normalize_guarded(&u);
                    out.underflows += usize::from(floored);
                    v
                } else {
                    normalize(&u)?.0
                };
                out.states[l].push(next.clone());
                q[l] = next.clone();
                input = next;
            }
            out.predictions.push(self.decoder.apply(&input));
        }
        Ok(out)
    }

    /// Mean post-update state of every layer over `seqs`.
    pub fn mean_states(&self, seqs: &[Sequence]) -> Result<Vec<DVector<f64>>> {
        let mut sums: Vec<DVector<f64>> = self.layers.iter().map(|l| DVector::zeros(l.cell.state_dim())).collect();
        let mut n = 0usize;
        for s in seqs {
            let f = self.filter_guarded(s)?;
            for (sum, states) in sums.iter_mut().zip(&f.states) {
                for q in states {
                    *sum += q;
                }
            }
            n += s.len();
        }
        if n == 0 {
            return Err(PsrnnError::EmptyData("no observations to average states over".into()));
        }
        Ok(sums.into_iter().map(|s| s / n as f64).collect())
    }
}

/// Summary of one layer's CP factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizeReport {
    pub rank: usize,
    pub relative_errors: Vec<f64>,
    pub converged: Vec<bool>,
    pub bias_scale: Option<f64>,
}

/// Settings for [`factorize_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorizeOptions {
    pub rank: usize,
    /// When set, each layer's bias becomes `ε ·` its mean filtered state.
    pub bias_scale: Option<f64>,
    /// Relative ridge for the CP-ALS solves.
    pub als_ridge: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        FactorizeOptions {
            rank: 10,
            bias_scale: Some(0.1),
            als_ridge: 1e-4,
            max_iters: 500,
            seed: 0,
        }
    }
}

/// Replaces every full cell with rank-`rank` CP factors. With
/// `bias_scale = Some(ε)` each layer's bias becomes `ε ·` its mean filtered
/// state over `train` (computed with the factorized weights and the original
/// biases); the original biases go into the metadata.
pub fn factorize_model(
    model: &PsrnnModel,
    opts: &FactorizeOptions,
    train: &[Sequence],
) -> Result<(PsrnnModel, FactorizeReport)> {
    let (rank, bias_scale) = (opts.rank, opts.bias_scale);
    if rank == 0 {
        return Err(PsrnnError::InvalidArgument("CP rank must be at least 1".into()));
    }
    let mut out = model.clone();
    let mut report = FactorizeReport {
        rank,
        relative_errors: Vec::new(),
        converged: Vec::new(),
        bias_scale,
    };
    for (l, layer) in out.layers.iter_mut().enumerate() {
        if let Cell::Full(cell) = &layer.cell {
            let als = CpAlsOptions {
                max_iters: opts.max_iters,
                ridge: opts.als_ridge,
                seed: opts.seed.wrapping_add(l as u64),
                ..CpAlsOptions::new(rank)
            };
            let res = cp_als_traced(&cell.w, &als)?;
            let err = cell.w.relative_error(&cp_reconstruct(&res.factors));
            report.relative_errors.push(err);
            report.converged.push(res.converged);
            layer.cell = Cell::Factorized(FactorizedCell::new(res.factors, cell.b.clone())?);
        }
    }
    if let Some(eps) = bias_scale {
        let means = out.mean_states(train)?;
        out.meta.original_biases = out
            .layers
            .iter()
            .map(|l| l.cell.bias().iter().copied().collect())
            .collect();
        for (layer, m) in out.layers.iter_mut().zip(means) {
            *layer.cell.bias_mut() = m * eps;
        }
    }
    out.meta.bias_scale = bias_scale;
    Ok((out, report))
}

/// The full-normalization filter built from 2SR estimates of `W` and `Z`,
/// for discrete data with indicator observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FullNormModel {
    pub w: Tensor3,
    pub z: Tensor3,
    pub q1: DVector<f64>,
    pub eps_inv: f64,
    /// Number of leading state coordinates that predict the next symbol.
    pub alphabet: usize,
}

impl FullNormModel {
    /// One-step predictive distributions `p(o_{t+1} | o_{1:t})` read off the
    /// first `alphabet` state coordinates (negatives clipped, renormalized).
    pub fn predict(&self, seq: &[usize]) -> Result<Vec<DVector<f64>>> {
        let d_o = self.z.dims()[0];
        let s = self.q1.sum();
        let mut q = &self.q1 / s;
        let mut out = Vec::with_capacity(seq.len());
        for &sym in seq {
            if sym >= d_o {
                return Err(PsrnnError::InvalidArgument(format!(
                    "symbol {sym} outside alphabet of {d_o}"
                )));
            }
            let mut o = DVector::zeros(d_o);
            o[sym] = 1.0;
            q = cell_update_full_norm(&self.w, &self.z, &q, &o, self.eps_inv)?;
            let mut p = DVector::from_fn(self.alphabet, |i, _| q[i].max(0.0));
            let total = p.sum();
            if total > 0.0 {
                p /= total;
            } else {
                p.fill(1.0 / self.alphabet as f64);
            }
            out.push(p);
        }
        Ok(out)
    }
}
