//! Two-stage regression: method-of-moments estimates of `q₁`, `W` and `Z`,
//! the decoder, and layer-by-layer initialization of a model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{PsrnnError, Result};
use crate::features::{
    build_triples, fit_rff_encoder, window_samples, RffMap, StreamEncoder, TripleEncoders, WindowSpec,
};
use crate::model::{
    normalize, Cell, Decoder, Encoder, FullNormModel, InputKind, Layer, ModelMeta, PsrnnCell, PsrnnModel,
    DEFAULT_INV_EPS,
};
use crate::par::Exec;
use crate::regress::{pinv, regularized_pinv, ridge_with_intercept, MomentAccumulator};
use crate::tensor::{Mode, Tensor3};

/// How the stage-one cross-covariance is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOptions {
    /// Ridge `λ = ridge_scale · count`, applied once to the combined inverse.
    pub ridge_scale: f64,
    /// Singular values below `rcond · σ_max` are dropped.
    pub rcond: f64,
    /// Use the plain pseudo-inverse (`rcond = 1e-10`, no ridge).
    pub pure_pinv: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            ridge_scale: 1e-2,
            rcond: 1e-2,
            pure_pinv: false,
        }
    }
}

/// Diagnostics for one regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub d_history: usize,
    pub d_obs: usize,
    pub d_future: usize,
    pub count: usize,
    pub lambda: f64,
    pub kept_rank: usize,
    /// `‖C − C P C‖ / ‖C‖` for the cross-covariance `C` and its inverse `P`.
    pub stage1_residual: f64,
    /// `‖W ×₃ C − N‖ / ‖N‖` for the transition numerator `N`.
    pub stage2_residual: f64,
    pub warnings: Vec<String>,
}

/// Mean future feature, two-norm normalized.
pub fn estimate_q1(acc: &MomentAccumulator) -> Result<DVector<f64>> {
    if acc.count == 0 {
        return Err(PsrnnError::EmptyData("no triples accumulated".into()));
    }
    let mean = &acc.future_sum / acc.count as f64;
    Ok(normalize(&mean)?.0)
}

/// The `d_f × d_h` inverse of the cross-covariance and diagnostics.
fn stage_one(acc: &MomentAccumulator, opts: &StageOptions) -> Result<(DMatrix<f64>, StageInfo)> {
    if acc.count == 0 {
        return Err(PsrnnError::EmptyData("no triples accumulated".into()));
    }
    let (dh, d_o, df) = acc.dims();
    let c = &acc.cross;
    let (p, lambda, rcond) = if opts.pure_pinv {
        (pinv(c, 1e-10)?, 0.0, 1e-10)
    } else {
        let lambda = opts.ridge_scale * acc.count as f64;
        (regularized_pinv(c, lambda, opts.rcond)?, lambda, opts.rcond)
    };
    let s = c.clone().singular_values();
    let s_max = s.iter().copied().fold(0.0, f64::max);
    let kept_rank = s.iter().filter(|&&v| s_max > 0.0 && v > rcond * s_max).count();
    let mut warnings = Vec::new();
    if acc.count < df || acc.count < dh {
        warnings.push(format!(
            "rank warning: {} samples for {dh} history and {df} future features",
            acc.count
        ));
    }
    if kept_rank < dh.min(df) {
        warnings.push(format!(
            "rank warning: cross-covariance keeps {kept_rank} of {} directions",
            dh.min(df)
        ));
    }
    let cn = c.norm();
    let stage1_residual = if cn > 0.0 { (c - c * &p * c).norm() / cn } else { 0.0 };
    Ok((
        p,
        StageInfo {
            d_history: dh,
            d_obs: d_o,
            d_future: df,
            count: acc.count,
            lambda,
            kept_rank,
            stage1_residual,
            stage2_residual: 0.0,
            warnings,
        },
    ))
}

fn apply_inverse(numerator: &Tensor3, acc: &MomentAccumulator, p: &DMatrix<f64>) -> Result<(Tensor3, f64)> {
    let t = numerator.mode_product(Mode::Third, p)?;
    let back = t.mode_product(Mode::Third, &acc.cross)?;
    let nn = numerator.frobenius_norm();
    let resid = if nn > 0.0 { back.relative_error(numerator) } else { 0.0 };
    Ok((t, resid))
}

/// `W = (Σ φ_{t+1} ⊗ ω_t ⊗ η_t) ×₃ P` with `P` the regularized inverse of
/// `Σ η_t ⊗ φ_t`; the numerator is rescaled when the last triple of a
/// sequence had no next window.
pub fn estimate_w(acc: &MomentAccumulator, opts: &StageOptions) -> Result<(Tensor3, StageInfo)> {
    let (p, mut info) = stage_one(acc, opts)?;
    if acc.pair_count == 0 {
        return Err(PsrnnError::EmptyData("no consecutive future windows".into()));
    }
    let mut numerator = acc.transition.clone();
    numerator.scale(acc.count as f64 / acc.pair_count as f64);
    let (w, resid) = apply_inverse(&numerator, acc, &p)?;
    info.stage2_residual = resid;
    Ok((w, info))
}

/// `Z = (Σ ω_t ⊗ ω_t ⊗ η_t) ×₃ P`.
pub fn estimate_z(acc: &MomentAccumulator, opts: &StageOptions) -> Result<(Tensor3, StageInfo)> {
    let (p, mut info) = stage_one(acc, opts)?;
    let (z, resid) = apply_inverse(&acc.normalizer, acc, &p)?;
    info.stage2_residual = resid;
    Ok((z, info))
}

/// Regression targets for the decoder.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Next symbols; the decoder emits logits.
    Symbols { symbols: &'a [usize], alphabet: usize },
    /// Next observation vectors, one per row.
    Values(&'a DMatrix<f64>),
}

/// Ridge regression (unpenalized intercept) from states (rows of `states`)
/// to targets. For symbols the regression predicts indicator vectors `P̂`,
/// turned into logits by linearizing the log around the add-one smoothed
/// symbol frequencies `p̄`: `logit = log p̄ + (P̂ − p̄)/p̄`.
pub fn init_decoder(states: &DMatrix<f64>, targets: Targets<'_>, lambda: f64) -> Result<Decoder> {
    match targets {
        Targets::Values(y) => {
            let (w, b) = ridge_with_intercept(states, y, lambda)?;
            Ok(Decoder {
                weight: w.transpose(),
                bias: b,
            })
        }
        Targets::Symbols { symbols, alphabet } => {
            let n = symbols.len();
            if n != states.nrows() {
                return Err(PsrnnError::DimensionMismatch(format!(
                    "decoder: {} states for {n} targets",
                    states.nrows()
                )));
            }
            let mut y = DMatrix::zeros(n, alphabet);
            let mut counts = vec![0.0; alphabet];
            for (r, &s) in symbols.iter().enumerate() {
                if s >= alphabet {
                    return Err(PsrnnError::InvalidArgument(format!(
                        "symbol {s} outside alphabet of {alphabet}"
                    )));
                }
                y[(r, s)] = 1.0;
                counts[s] += 1.0;
            }
            let (w, b) = ridge_with_intercept(states, &y, lambda)?;
            let pbar: Vec<f64> = counts
                .iter()
                .map(|c| (c + 1.0) / (n as f64 + alphabet as f64))
                .collect();
            let weight = DMatrix::from_fn(alphabet, states.ncols(), |i, j| w[(j, i)] / pbar[i]);
            let bias = DVector::from_fn(alphabet, |i, _| pbar[i].ln() + (b[i] - pbar[i]) / pbar[i]);
            Ok(Decoder { weight, bias })
        }
    }
}

/// Everything two-stage initialization needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub past: usize,
    pub future: usize,
    /// Constant appended to the future features (and hence the state).
    pub future_constant: Option<f64>,
    pub stage: StageOptions,
    /// Decoder ridge `λ = decoder_ridge · n`.
    pub decoder_ridge: f64,
    pub rff_count: usize,
    pub obs_dim: usize,
    pub history_dim: usize,
    /// State dimension for continuous data (includes the constant).
    pub states: usize,
    /// Cap on the windows used to fit each RFF projection.
    pub max_fit_samples: usize,
    pub layers: usize,
    /// Each layer's `W` is rescaled so the geometric mean of `‖u‖` over the
    /// training steps equals this value. The bias is zero after estimation,
    /// so the filter is unchanged; only the parametrization SGD sees moves.
    pub preactivation_scale: Option<f64>,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            past: 1,
            future: 1,
            future_constant: Some(1.0),
            stage: StageOptions::default(),
            decoder_ridge: 1e-6,
            rff_count: 2000,
            obs_dim: 20,
            history_dim: 20,
            states: 20,
            max_fit_samples: 5000,
            layers: 1,
            preactivation_scale: Some(16.0),
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.past, self.future)
    }

    pub fn validate(&self) -> Result<()> {
        self.window()?;
        if self.layers == 0 {
            return Err(PsrnnError::InvalidArgument("layers must be at least 1".into()));
        }
        if self.decoder_ridge < 0.0 || self.stage.ridge_scale < 0.0 || self.stage.rcond < 0.0 {
            return Err(PsrnnError::InvalidArgument(
                "ridge parameters must be non-negative".into(),
            ));
        }
        if self.preactivation_scale.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(PsrnnError::InvalidArgument(
                "preactivation_scale must be positive".into(),
            ));
        }
        if self.rff_count == 0 || self.obs_dim == 0 || self.history_dim == 0 {
            return Err(PsrnnError::InvalidArgument(
                "feature dimensions must be positive".into(),
            ));
        }
        let reserved = usize::from(self.future_constant.is_some());
        if self.states <= reserved {
            return Err(PsrnnError::InvalidArgument(format!("states must exceed {reserved}")));
        }
        Ok(())
    }
}

/// Per-layer section of the initialization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub stage: StageInfo,
    /// Mean squared distance between the state before step `t` and the unit
    /// vector along `φ_t`.
    pub state_prediction_error: f64,
    /// Factor applied to `W` after estimation (1 when not rescaled).
    pub w_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub layers: Vec<LayerReport>,
    pub decoder_lambda: f64,
    pub decoder_samples: usize,
    pub param_count: usize,
}

fn encoders_for_layer(seqs: &[Sequence], layer: usize, cfg: &InitConfig) -> Result<TripleEncoders> {
    let w = cfg.window()?;
    let first = seqs
        .first()
        .ok_or_else(|| PsrnnError::EmptyData("no training sequences".into()))?;
    match first {
        Sequence::Discrete(_) => {
            let alphabet = 1 + seqs
                .iter()
                .filter_map(Sequence::symbols)
                .flat_map(|s| s.iter().copied())
                .max()
                .unwrap_or(0);
            let enc = StreamEncoder::OneHot { alphabet };
            Ok(TripleEncoders {
                history: enc.clone(),
                observation: enc.clone(),
                future: enc,
                future_constant: cfg.future_constant,
            })
        }
        Sequence::Continuous(rows) if layer > 0 => {
            let dim = rows.first().map_or(0, Vec::len);
            let enc = StreamEncoder::Identity { dim };
            Ok(TripleEncoders {
                history: enc.clone(),
                observation: enc.clone(),
                future: enc,
                future_constant: cfg.future_constant,
            })
        }
        Sequence::Continuous(_) => {
            let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(layer as u64 * 101);
            let hist = window_samples(seqs, |n| 0..n, w.past)?;
            let obs = window_samples(seqs, |n| 0..n, 1)?;
            let fut = window_samples(seqs, |n| 0..n, w.future)?;
            let reserved = usize::from(cfg.future_constant.is_some());
            Ok(TripleEncoders {
                history: fit_rff_encoder(&hist, cfg.rff_count, cfg.history_dim, cfg.max_fit_samples, seed)?,
                observation: fit_rff_encoder(
                    &obs,
                    cfg.rff_count,
                    cfg.obs_dim,
                    cfg.max_fit_samples,
                    seed.wrapping_add(10),
                )?,
                future: fit_rff_encoder(
                    &fut,
                    cfg.rff_count,
                    cfg.states - reserved,
                    cfg.max_fit_samples,
                    seed.wrapping_add(20),
                )?,
                future_constant: cfg.future_constant,
            })
        }
    }
}

/// The model-side encoder that reproduces a stream encoder on single
/// observations.
fn model_encoder(enc: &StreamEncoder) -> Result<Encoder> {
    match enc {
        StreamEncoder::OneHot { alphabet } => Ok(Encoder::one_hot(*alphabet)),
        StreamEncoder::Identity { dim } => Ok(Encoder {
            input: InputKind::Vectors { dim: *dim },
            rff: None,
            offset: DVector::zeros(*dim),
            projection: DMatrix::identity(*dim, *dim),
        }),
        StreamEncoder::Rff { rff, projection } => {
            let dim = rff.input_dim();
            match projection {
                Some(p) => Ok(Encoder {
                    input: InputKind::Vectors { dim },
                    rff: Some(rff.clone()),
                    offset: p.mean.clone(),
                    projection: p.basis.clone(),
                }),
                None => Ok(Encoder {
                    input: InputKind::Vectors { dim },
                    rff: Some(rff.clone()),
                    offset: DVector::zeros(rff.output_dim()),
                    projection: DMatrix::identity(rff.output_dim(), rff.output_dim()),
                }),
            }
        }
    }
}

/// Fits one layer on `seqs`; returns the layer and its stage diagnostics.
pub fn fit_layer(
    seqs: &[Sequence],
    enc: &TripleEncoders,
    cfg: &InitConfig,
    exec: Exec,
) -> Result<(Layer, StageInfo, Vec<crate::features::FeatureTriple>)> {
    let w = cfg.window()?;
    let triples = build_triples(seqs, w, enc, exec)?;
    let acc = MomentAccumulator::from_triples(&triples, enc.dims(w), exec)?;
    let q1 = estimate_q1(&acc)?;
    let (wt, info) = estimate_w(&acc, &cfg.stage)?;
    let dq = wt.dims()[0];
    let cell = PsrnnCell::new(wt, DVector::zeros(dq))?;
    Ok((
        Layer {
            cell: Cell::Full(cell),
            q1,
        },
        info,
        triples,
    ))
}

fn layer_states(
    encoder: &Encoder,
    layers: &[Layer],
    seqs: &[Sequence],
    exec: Exec,
) -> Result<Vec<Vec<Vec<DVector<f64>>>>> {
    let top = layers.last().map_or(0, |l| l.cell.state_dim());
    let tmp = PsrnnModel {
        encoder: encoder.clone(),
        layers: layers.to_vec(),
        decoder: Decoder {
            weight: DMatrix::zeros(1, top),
            bias: DVector::zeros(1),
        },
        meta: ModelMeta::default(),
    };
    exec.map(seqs, |s| tmp.filter(s).map(|o| o.states))
        .into_iter()
        .collect()
}

fn state_prediction_error(
    states: &[Vec<DVector<f64>>],
    q1: &DVector<f64>,
    triples: &[crate::features::FeatureTriple],
    seqs: &[Sequence],
    w: WindowSpec,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut offset = 0;
    for (s, seq) in states.iter().zip(seqs) {
        let idx = w.triple_indices(seq.len());
        for (k, t) in idx.clone().enumerate() {
            let q = if t == 0 { q1 } else { &s[t - 1] };
            let f = DVector::from_column_slice(&triples[offset + k].future);
            let fn_ = f.norm();
            if fn_ > 0.0 {
                total += (q - f / fn_).norm_squared();
                n += 1;
            }
        }
        offset += idx.len();
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Next-step decoder design: the top state after observation `t` against
/// observation `t + 1`, over every training sequence.
fn fit_decoder(top_states: &[Vec<DVector<f64>>], seqs: &[Sequence], cfg: &InitConfig) -> Result<(Decoder, f64, usize)> {
    let n: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    if n == 0 {
        return Err(PsrnnError::EmptyData("no next-step targets for the decoder".into()));
    }
    let dq = top_states[0].first().map_or(0, DVector::len);
    let mut x = DMatrix::zeros(n, dq);
    let mut r = 0;
    for st in top_states {
        for q in st.iter().take(st.len().saturating_sub(1)) {
            x.row_mut(r).copy_from(&q.transpose());
            r += 1;
        }
    }
    let lambda = cfg.decoder_ridge * n as f64;
    let decoder = match &seqs[0] {
        Sequence::Discrete(_) => {
            let symbols: Vec<usize> = seqs
                .iter()
                .filter_map(Sequence::symbols)
                .flat_map(|s| s[1..].iter().copied())
                .collect();
            let alphabet = 1 + symbols.iter().copied().max().unwrap_or(0);
            init_decoder(
                &x,
                Targets::Symbols {
                    symbols: &symbols,
                    alphabet,
                },
                lambda,
            )?
        }
        Sequence::Continuous(rows) => {
            let d = rows[0].len();
            let mut y = DMatrix::zeros(n, d);
            let mut r = 0;
            for s in seqs {
                for row in &s.rows().unwrap_or(&[])[1..] {
                    y.row_mut(r).copy_from_slice(row);
                    r += 1;
                }
            }
            init_decoder(&x, Targets::Values(&y), lambda)?
        }
    };
    Ok((decoder, lambda, n))
}

/// Geometric mean over all training steps of each layer's pre-normalization
/// norm.
fn preactivation_gmeans(encoder: &Encoder, layers: &[Layer], train: &[Sequence], exec: Exec) -> Result<Vec<f64>> {
    let per_seq = exec.map(train, |seq| -> Result<(Vec<f64>, usize)> {
        let mut q: Vec<DVector<f64>> = layers.iter().map(|l| l.q1.clone()).collect();
        let mut sums = vec![0.0; layers.len()];
        for t in 0..seq.len() {
            let mut x = encoder.encode(seq, t)?;
            for (l, layer) in layers.iter().enumerate() {
                let u = layer.cell.preactivation(&q[l], &x)?;
                let (next, n) = normalize(&u)?;
                sums[l] += n.ln();
                q[l] = next.clone();
                x = next;
            }
        }
        Ok((sums, seq.len()))
    });
    let mut total = vec![0.0; layers.len()];
    let mut steps = 0;
    for r in per_seq {
        let (s, n) = r?;
        total.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        steps += n;
    }
    if steps == 0 {
        return Err(PsrnnError::EmptyData("no training steps".into()));
    }
    Ok(total.into_iter().map(|s| (s / steps as f64).exp()).collect())
}

/// Initializes an `L`-layer model by two-stage regression. Layer 1 sees the
/// observations; layer `ℓ + 1` sees layer `ℓ`'s post-update states through
/// identity features. The decoder is fitted on top-layer states.
///
/// `alphabet` overrides the alphabet inferred from the training symbols.
pub fn init_model(
    train: &[Sequence],
    alphabet: Option<usize>,
    cfg: &InitConfig,
    exec: Exec,
) -> Result<(PsrnnModel, InitReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PsrnnError::EmptyData("no training sequences".into()));
    }
    let w = cfg.window()?;
    let mut layers: Vec<Layer> = Vec::with_capacity(cfg.layers);
    let mut reports = Vec::with_capacity(cfg.layers);
    let mut encoder: Option<Encoder> = None;
    let mut inputs: Vec<Sequence> = train.to_vec();
    let mut states = Vec::new();
    for l in 0..cfg.layers {
        let mut enc = encoders_for_layer(&inputs, l, cfg)?;
        if let (Some(a), StreamEncoder::OneHot { .. }) = (alphabet, &enc.observation) {
            let oh = StreamEncoder::OneHot { alphabet: a };
            enc.history = oh.clone();
            enc.observation = oh.clone();
            enc.future = oh;
        }
        if l == 0 {
            encoder = Some(model_encoder(&enc.observation)?);
        }
        let (layer, info, triples) = fit_layer(&inputs, &enc, cfg, exec)?;
        layers.push(layer);
        let model_enc = encoder.as_ref().expect("set on the first layer");
        states = layer_states(model_enc, &layers, train, exec)?;
        let this: Vec<Vec<DVector<f64>>> = states.iter().map(|s| s[l].clone()).collect();
        let err = state_prediction_error(&this, &layers[l].q1, &triples, &inputs, w);
        reports.push(LayerReport {
            stage: info,
            state_prediction_error: err,
            w_scale: 1.0,
        });
        inputs = this
            .into_iter()
            .map(|s| Sequence::Continuous(s.into_iter().map(|v| v.iter().copied().collect()).collect()))
            .collect();
    }
    if let Some(target) = cfg.preactivation_scale {
        let model_enc = encoder.as_ref().expect("set on the first layer");
        let gm = preactivation_gmeans(model_enc, &layers, train, exec)?;
        for ((layer, report), g) in layers.iter_mut().zip(&mut reports).zip(gm) {
            let s = target / g;
            if let Cell::Full(c) = &mut layer.cell {
                c.w.scale(s);
            }
            report.w_scale = s;
        }
    }
    let top: Vec<Vec<DVector<f64>>> = states.into_iter().map(|mut s| s.pop().unwrap_or_default()).collect();
    let (mut decoder, lambda, n) = fit_decoder(&top, train, cfg)?;
    if let Some(a) = alphabet {
        if decoder.weight.nrows() < a {
            // Symbols never seen in training still get a (very negative) logit.
            let dq = decoder.weight.ncols();
            let old = decoder.clone();
            let floor = (1.0 / (n as f64 + a as f64)).ln();
            decoder.weight = DMatrix::from_fn(a, dq, |i, j| {
                if i < old.weight.nrows() {
                    old.weight[(i, j)]
                } else {
                    0.0
                }
            });
            decoder.bias = DVector::from_fn(a, |i, _| if i < old.bias.len() { old.bias[i] } else { floor });
        }
    }
    let model = PsrnnModel {
        encoder: encoder.expect("at least one layer"),
        layers,
        decoder,
        meta: ModelMeta {
            init: "two-stage".into(),
            ..ModelMeta::default()
        },
    };
    model.validate()?;
    let report = InitReport {
        layers: reports,
        decoder_lambda: lambda,
        decoder_samples: n,
        param_count: model.param_count(),
    };
    Ok((model, report))
}

/// A model with the same shapes as [`init_model`] would produce, with
/// Xavier-uniform weights, zero biases and a random unit `q₁`.
pub fn random_model(train: &[Sequence], alphabet: Option<usize>, cfg: &InitConfig) -> Result<PsrnnModel> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| PsrnnError::EmptyData("no training sequences".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_1a11);
    let reserved = usize::from(cfg.future_constant.is_some());
    let (encoder, d_out, dq1) = match first {
        Sequence::Discrete(_) => {
            let a = alphabet.unwrap_or_else(|| {
                1 + train
                    .iter()
                    .filter_map(Sequence::symbols)
                    .flat_map(|s| s.iter().copied())
                    .max()
                    .unwrap_or(0)
            });
            (Encoder::one_hot(a), a, cfg.future * a + reserved)
        }
        Sequence::Continuous(rows) => {
            let dim = rows[0].len();
            let obs = window_samples(train, |n| 0..n, 1)?;
            let bw = crate::features::fit_bandwidth(&obs, cfg.seed)?;
            let rff = RffMap::sample(dim, cfg.rff_count, bw, cfg.seed.wrapping_add(1))?;
            let projection = xavier(cfg.obs_dim, cfg.rff_count, &mut rng);
            (
                Encoder {
                    input: InputKind::Vectors { dim },
                    rff: Some(rff),
                    offset: DVector::zeros(cfg.rff_count),
                    projection,
                },
                dim,
                cfg.states,
            )
        }
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut d_in = encoder.output_dim();
    let mut dq = dq1;
    for l in 0..cfg.layers {
        if l > 0 {
            dq = cfg.future * d_in + reserved;
        }
        let bound = (6.0 / (d_in * dq + dq) as f64).sqrt();
        let w = Tensor3::from_fn([dq, d_in, dq], |_, _, _| rng.random_range(-bound..bound));
        let q1 = DVector::from_fn(dq, |_, _| rng.random_range(-1.0..1.0)).normalize();
        layers.push(Layer {
            cell: Cell::Full(PsrnnCell::new(w, DVector::zeros(dq))?),
            q1,
        });
        d_in = dq;
    }
    let decoder = Decoder {
        weight: xavier(d_out, dq, &mut rng),
        bias: DVector::zeros(d_out),
    };
    let model = PsrnnModel {
        encoder,
        layers,
        decoder,
        meta: ModelMeta {
            init: "random".into(),
            ..ModelMeta::default()
        },
    };
    model.validate()?;
    Ok(model)
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Full-normalization filter for discrete data: indicator features, no
/// constant, `W` and `Z` from the same inverse.
pub fn full_norm_model(
    train: &[Sequence],
    alphabet: usize,
    window: WindowSpec,
    opts: &StageOptions,
    exec: Exec,
) -> Result<FullNormModel> {
    let oh = StreamEncoder::OneHot { alphabet };
    let enc = TripleEncoders {
        history: oh.clone(),
        observation: oh.clone(),
        future: oh,
        future_constant: None,
    };
    let triples = build_triples(train, window, &enc, exec)?;
    let acc = MomentAccumulator::from_triples(&triples, enc.dims(window), exec)?;
    let mean = &acc.future_sum / acc.count as f64;
    let (w, _) = estimate_w(&acc, opts)?;
    let (z, _) = estimate_z(&acc, opts)?;
    Ok(FullNormModel {
        w,
        z,
        q1: mean,
        eps_inv: DEFAULT_INV_EPS,
        alphabet,
    })
}
