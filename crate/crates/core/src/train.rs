//! Losses, reverse-mode BPTT, SGD refinement and finite-difference checks.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sequence;
use crate::error::{check_dim, PsrnnError, Result};
use crate::model::{normalize, normalize_guarded, Cell, PsrnnModel};
use crate::par::Exec;
use crate::tensor::{CpFactors, Tensor3};

/// Mean `−log₂ softmax(logits)[target]`.
pub fn loss_bpc(logits: &[DVector<f64>], targets: &[usize]) -> Result<f64> {
    check_dim("logits/targets", logits.len(), targets.len())?;
    if logits.is_empty() {
        return Err(PsrnnError::EmptyData("no predictions to score".into()));
    }
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(targets) {
        if y >= z.len() {
            return Err(PsrnnError::InvalidArgument(format!(
                "target {y} outside {} logits",
                z.len()
            )));
        }
        total += log_sum_exp(z) - z[y];
    }
    Ok(total / logits.len() as f64 / std::f64::consts::LN_2)
}

/// Fraction of steps whose largest logit is the target.
pub fn metric_ospa(logits: &[DVector<f64>], targets: &[usize]) -> Result<f64> {
    check_dim("logits/targets", logits.len(), targets.len())?;
    if logits.is_empty() {
        return Err(PsrnnError::EmptyData("no predictions to score".into()));
    }
    let hits = logits.iter().zip(targets).filter(|(z, &y)| z.imax() == y).count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Mean squared Euclidean error.
pub fn loss_mse(preds: &[DVector<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_dim("predictions/targets", preds.len(), targets.len())?;
    if preds.is_empty() {
        return Err(PsrnnError::EmptyData("no predictions to score".into()));
    }
    let mut total = 0.0;
    for (p, y) in preds.iter().zip(targets) {
        check_dim("target width", p.len(), y.len())?;
        total += p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

fn log_sum_exp(z: &DVector<f64>) -> f64 {
    let m = z.max();
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Gradient of one cell's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CellGrad {
    Full { w: Tensor3, b: DVector<f64> },
    Factorized { factors: CpFactors, b: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub cell: CellGrad,
    pub q1: DVector<f64>,
}

/// One array per parameter tensor, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub projection: DMatrix<f64>,
    pub layers: Vec<LayerGrad>,
    pub decoder_weight: DMatrix<f64>,
    pub decoder_bias: DVector<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &PsrnnModel) -> GradientSet {
        let (pr, pc) = model.encoder.projection.shape();
        GradientSet {
            projection: DMatrix::zeros(pr, pc),
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    cell: match &l.cell {
                        Cell::Full(c) => CellGrad::Full {
                            w: Tensor3::zeros(c.w.dims()),
                            b: DVector::zeros(c.b.len()),
                        },
                        Cell::Factorized(c) => CellGrad::Factorized {
                            factors: CpFactors {
                                a: DMatrix::zeros(c.factors.a.nrows(), c.factors.a.ncols()),
                                b: DMatrix::zeros(c.factors.b.nrows(), c.factors.b.ncols()),
                                c: DMatrix::zeros(c.factors.c.nrows(), c.factors.c.ncols()),
                            },
                            b: DVector::zeros(c.b.len()),
                        },
                    },
                    q1: DVector::zeros(l.q1.len()),
                })
                .collect(),
            decoder_weight: DMatrix::zeros(model.decoder.weight.nrows(), model.decoder.weight.ncols()),
            decoder_bias: DVector::zeros(model.decoder.bias.len()),
        }
    }

    /// Named flat views, in the same order as [`param_groups_mut`].
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("encoder.projection".into(), self.projection.as_slice())];
        for (l, g) in self.layers.iter().enumerate() {
            match &g.cell {
                CellGrad::Full { w, b } => {
                    out.push((format!("layer{l}.W"), w.data()));
                    out.push((format!("layer{l}.b"), b.as_slice()));
                }
                CellGrad::Factorized { factors, b } => {
                    out.push((format!("layer{l}.A"), factors.a.as_slice()));
                    out.push((format!("layer{l}.B"), factors.b.as_slice()));
                    out.push((format!("layer{l}.C"), factors.c.as_slice()));
                    out.push((format!("layer{l}.b"), b.as_slice()));
                }
            }
            out.push((format!("layer{l}.q1"), g.q1.as_slice()));
        }
        out.push(("decoder.weight".into(), self.decoder_weight.as_slice()));
        out.push(("decoder.bias".into(), self.decoder_bias.as_slice()));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![("encoder.projection".into(), self.projection.as_mut_slice())];
        for (l, g) in self.layers.iter_mut().enumerate() {
            match &mut g.cell {
                CellGrad::Full { w, b } => {
                    out.push((format!("layer{l}.W"), w.data_mut()));
                    out.push((format!("layer{l}.b"), b.as_mut_slice()));
                }
                CellGrad::Factorized { factors, b } => {
                    out.push((format!("layer{l}.A"), factors.a.as_mut_slice()));
                    out.push((format!("layer{l}.B"), factors.b.as_mut_slice()));
                    out.push((format!("layer{l}.C"), factors.c.as_mut_slice()));
                    out.push((format!("layer{l}.b"), b.as_mut_slice()));
                }
            }
            out.push((format!("layer{l}.q1"), g.q1.as_mut_slice()));
        }
        out.push(("decoder.weight".into(), self.decoder_weight.as_mut_slice()));
        out.push(("decoder.bias".into(), self.decoder_bias.as_mut_slice()));
        out
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a) in self.groups_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.groups()
            .iter()
            .map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first group holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.groups()
            .into_iter()
            .find(|(_, a)| a.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Mutable flat views of the model parameters, matching
/// [`GradientSet::groups`].
pub fn param_groups_mut(model: &mut PsrnnModel) -> Vec<(String, &mut [f64])> {
    let mut out: Vec<(String, &mut [f64])> =
        vec![("encoder.projection".into(), model.encoder.projection.as_mut_slice())];
    for (l, layer) in model.layers.iter_mut().enumerate() {
        match &mut layer.cell {
            Cell::Full(c) => {
                out.push((format!("layer{l}.W"), c.w.data_mut()));
                out.push((format!("layer{l}.b"), c.b.as_mut_slice()));
            }
            Cell::Factorized(c) => {
                out.push((format!("layer{l}.A"), c.factors.a.as_mut_slice()));
                out.push((format!("layer{l}.B"), c.factors.b.as_mut_slice()));
                out.push((format!("layer{l}.C"), c.factors.c.as_mut_slice()));
                out.push((format!("layer{l}.b"), c.b.as_mut_slice()));
            }
        }
        out.push((format!("layer{l}.q1"), layer.q1.as_mut_slice()));
    }
    out.push(("decoder.weight".into(), model.decoder.weight.as_mut_slice()));
    out.push(("decoder.bias".into(), model.decoder.bias.as_mut_slice()));
    out
}

struct StepCache {
    raw: DVector<f64>,
    /// Per layer: input, previous state, new state, pre-normalization norm.
    layers: Vec<(DVector<f64>, DVector<f64>, DVector<f64>, f64)>,
    pred: DVector<f64>,
}

/// Result of differentiating one window of one stream.
#[derive(Debug, Clone)]
pub struct WindowGrad {
    pub grad: GradientSet,
    /// Summed (not averaged) loss over the window, nats or squared error.
    pub loss: f64,
    pub steps: usize,
    /// State of every layer after the last step, to carry into the next
    /// window.
    pub end_states: Vec<DVector<f64>>,
    pub underflows: usize,
}

/// Where a window's initial states come from.
#[derive(Debug, Clone)]
pub enum StartState {
    /// The model's `q₁` (differentiated).
    Initial,
    /// States carried from the previous window (treated as constants).
    Carried(Vec<DVector<f64>>),
}

/// Reverse-mode gradient of the summed loss over steps `steps` of `seq`.
/// Step `t` consumes observation `t` and is scored against observation
/// `t + 1`.
pub fn window_gradient(
    model: &PsrnnModel,
    seq: &Sequence,
    steps: Range<usize>,
    start: &StartState,
    guarded: bool,
) -> Result<WindowGrad> {
    if steps.end >= seq.len() && !steps.is_empty() {
        return Err(PsrnnError::InvalidArgument(format!(
            "window {steps:?} needs a target beyond sequence length {}",
            seq.len()
        )));
    }
    let n_layers = model.layers.len();
    let mut q: Vec<DVector<f64>> = match start {
        StartState::Initial => model.layers.iter().map(|l| l.q1.clone()).collect(),
        StartState::Carried(s) => s.clone(),
    };
    let mut caches: Vec<StepCache> = Vec::with_capacity(steps.len());
    let mut underflows = 0;
    let mut loss = 0.0;
    for t in steps.clone() {
        let raw = model.encoder.raw_features(seq, t)?;
        let mut input = &model.encoder.projection * &raw;
        let mut lc = Vec::with_capacity(n_layers);
        for (l, layer) in model.layers.iter().enumerate() {
            let u = layer.cell.preactivation(&q[l], &input)?;
            let (next, norm) = if guarded {
                let (v, n, floored) = normalize_guarded(&u);
                underflows += usize::from(floored);
                (v, n)
            } else {
                normalize(&u)?
            };
            lc.push((input, q[l].clone(), next.clone(), norm));
            q[l] = next.clone();
            input = next;
        }
        let pred = model.decoder.apply(&input);
        loss += step_loss(&pred, seq, t + 1)?.0;
        caches.push(StepCache { raw, layers: lc, pred });
    }

    let mut g = GradientSet::zeros_like(model);
    let mut carry: Vec<DVector<f64>> = model
        .layers
        .iter()
        .map(|l| DVector::zeros(l.cell.state_dim()))
        .collect();
    for (k, cache) in caches.iter().enumerate().rev() {
        let t = steps.start + k;
        let dz = step_loss(&cache.pred, seq, t + 1)?.1;
        let top = &cache.layers[n_layers - 1].2;
        g.decoder_weight += &dz * top.transpose();
        g.decoder_bias += &dz;
        let mut from_above = model.decoder.weight.transpose() * &dz;
        for l in (0..n_layers).rev() {
            let (x, q_prev, q_new, norm) = &cache.layers[l];
            let gq = &carry[l] + &from_above;
            let du = (&gq - q_new * q_new.dot(&gq)) / *norm;
            let (dx, dq_prev) = cell_backward(&model.layers[l].cell, &mut g.layers[l].cell, x, q_prev, &du);
            carry[l] = dq_prev;
            from_above = dx;
        }
        g.projection += &from_above * cache.raw.transpose();
    }
    if matches!(start, StartState::Initial) && !caches.is_empty() {
        // q₁ enters the forward pass as stored; the update projects it back
        // onto the unit sphere.
        for (l, c) in carry.iter().enumerate() {
            g.layers[l].q1 += c;
        }
    }
    Ok(WindowGrad {
        grad: g,
        loss,
        steps: caches.len(),
        end_states: q,
        underflows,
    })
}

/// Loss of one prediction against observation `target_t` of `seq` and its
/// gradient with respect to the prediction.
fn step_loss(pred: &DVector<f64>, seq: &Sequence, target_t: usize) -> Result<(f64, DVector<f64>)> {
    match seq {
        Sequence::Discrete(s) => {
            let y = s[target_t];
            if y >= pred.len() {
                return Err(PsrnnError::InvalidArgument(format!(
                    "target {y} outside {} logits",
                    pred.len()
                )));
            }
            let mut d = softmax(pred);
            d[y] -= 1.0;
            Ok((log_sum_exp(pred) - pred[y], d))
        }
        Sequence::Continuous(rows) => {
            let y = &rows[target_t];
            check_dim("target width", pred.len(), y.len())?;
            let diff = DVector::from_fn(y.len(), |i, _| pred[i] - y[i]);
            Ok((diff.norm_squared(), diff * 2.0))
        }
    }
}

/// Accumulates parameter gradients of one cell step and returns the
/// gradients with respect to the input and the previous state.
fn cell_backward(
    cell: &Cell,
    g: &mut CellGrad,
    x: &DVector<f64>,
    q_prev: &DVector<f64>,
    du: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    match (cell, g) {
        (Cell::Full(c), CellGrad::Full { w: gw, b: gb }) => {
            *gb += du;
            let [dq, d_o, _] = c.w.dims();
            let data = c.w.data();
            let gdata = gw.data_mut();
            let mut dx = DVector::zeros(d_o);
            let mut dqp = DVector::zeros(dq);
            for i in 0..dq {
                let dui = du[i];
                if dui == 0.0 {
                    continue;
                }
                for j in 0..d_o {
                    let base = (i * d_o + j) * dq;
                    let row = &data[base..base + dq];
                    let xj = x[j];
                    dx[j] += dui * row.iter().zip(q_prev.iter()).map(|(w, q)| w * q).sum::<f64>();
                    if xj != 0.0 {
                        let s = dui * xj;
                        for k in 0..dq {
                            gdata[base + k] += s * q_prev[k];
                            dqp[k] += s * row[k];
                        }
                    }
                }
            }
            (dx, dqp)
        }
        (Cell::Factorized(c), CellGrad::Factorized { factors: gf, b: gb }) => {
            *gb += du;
            let f = &c.factors;
            let v = &f.b * x;
            let w = &f.c * q_prev;
            let h = v.component_mul(&w);
            let dh = &f.a * du;
            gf.a += &h * du.transpose();
            let dv = dh.component_mul(&w);
            let dw = dh.component_mul(&v);
            gf.b += &dv * x.transpose();
            gf.c += &dw * q_prev.transpose();
            (f.b.transpose() * dv, f.c.transpose() * dw)
        }
        _ => unreachable!("gradient layout mirrors the model"),
    }
}

/// Summed gradient of one whole sequence, cut into windows of `horizon`
/// steps with the state carried (and detached) between windows.
pub fn sequence_gradient(model: &PsrnnModel, seq: &Sequence, horizon: Option<usize>) -> Result<WindowGrad> {
    let n = seq.len().saturating_sub(1);
    let h = horizon.unwrap_or(n).max(1);
    let mut total = GradientSet::zeros_like(model);
    let mut start = StartState::Initial;
    let mut loss = 0.0;
    let mut steps = 0;
    let mut underflows = 0;
    let mut end = model.layers.iter().map(|l| l.q1.clone()).collect();
    let mut t0 = 0;
    while t0 < n {
        let t1 = (t0 + h).min(n);
        let w = window_gradient(model, seq, t0..t1, &start, false)?;
        total.add_assign(&w.grad);
        loss += w.loss;
        steps += w.steps;
        underflows += w.underflows;
        end = w.end_states.clone();
        start = StartState::Carried(w.end_states);
        t0 = t1;
    }
    Ok(WindowGrad {
        grad: total,
        loss,
        steps,
        end_states: end,
        underflows,
    })
}

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `None` unrolls whole sequences.
    pub bptt_horizon: Option<usize>,
    pub epochs: usize,
    /// Streams per update: a single training sequence is cut into this many
    /// contiguous streams, several sequences are grouped this many at a time.
    pub batch_size: usize,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub train_q1: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            bptt_horizon: Some(35),
            epochs: 5,
            batch_size: 32,
            grad_clip: 5.0,
            train_q1: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(PsrnnError::InvalidArgument("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.bptt_horizon == Some(0) {
            return Err(PsrnnError::InvalidArgument(
                "batch size and horizon must be positive".into(),
            ));
        }
        if self.grad_clip < 0.0 {
            return Err(PsrnnError::InvalidArgument("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Evaluation metrics over a set of sequences, each filtered from `q₁`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ospa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub steps: usize,
    /// Largest `|‖q‖₂ − 1|` over every emitted state.
    pub max_norm_deviation: f64,
    pub underflows: usize,
}

pub fn evaluate(model: &PsrnnModel, seqs: &[Sequence], exec: Exec) -> Result<Metrics> {
    let outs = exec.map(seqs, |s| model.filter(s));
    let mut logits = Vec::new();
    let mut symbols = Vec::new();
    let mut preds = Vec::new();
    let mut values = Vec::new();
    let mut dev: f64 = 0.0;
    for (o, s) in outs.into_iter().zip(seqs) {
        let o = o?;
        for layer in &o.states {
            for q in layer {
                dev = dev.max((q.norm() - 1.0).abs());
            }
        }
        let n = s.len().saturating_sub(1);
        match s {
            Sequence::Discrete(sym) => {
                logits.extend(o.predictions.into_iter().take(n));
                symbols.extend_from_slice(&sym[1..]);
            }
            Sequence::Continuous(rows) => {
                preds.extend(o.predictions.into_iter().take(n));
                values.extend_from_slice(&rows[1..]);
            }
        }
    }
    let mut m = Metrics {
        max_norm_deviation: dev,
        ..Metrics::default()
    };
    if !logits.is_empty() {
        m.bpc = Some(loss_bpc(&logits, &symbols)?);
        m.ospa = Some(metric_ospa(&logits, &symbols)?);
        m.steps = logits.len();
    } else if !preds.is_empty() {
        m.mse = Some(loss_mse(&preds, &values)?);
        m.steps = preds.len();
    } else {
        return Err(PsrnnError::EmptyData("no scored steps".into()));
    }
    Ok(m)
}

/// One row of the learning-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<CurvePoint>,
    pub updates: usize,
    pub clip_events: usize,
    pub underflows: usize,
    /// Largest `|‖q‖₂ − 1|` seen by any evaluation.
    pub max_norm_deviation: f64,
}

impl TrainReport {
    pub fn value(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.curves
            .iter()
            .find(|c| c.epoch == epoch && c.split == split && c.metric == metric)
            .map(|c| c.value)
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for c in &self.curves {
            s.push_str(&format!("{},{},{},{}\n", c.epoch, c.split, c.metric, c.value));
        }
        s
    }

    fn record(&mut self, epoch: usize, split: &str, m: &Metrics) {
        let mut push = |metric: &str, v: Option<f64>| {
            if let Some(value) = v {
                self.curves.push(CurvePoint {
                    epoch,
                    split: split.into(),
                    metric: metric.into(),
                    value,
                });
            }
        };
        push("bpc", m.bpc);
        push("ospa", m.ospa);
        push("mse", m.mse);
        self.max_norm_deviation = self.max_norm_deviation.max(m.max_norm_deviation);
    }
}

struct Stream {
    seq: Sequence,
    state: StartState,
    pos: usize,
}

fn epoch_batches(train: &[Sequence], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<Sequence>> {
    if train.len() == 1 {
        let parts = train[0].chunks(cfg.batch_size);
        let parts = if parts.iter().all(|p| p.len() >= 2) {
            parts
        } else {
            train.to_vec()
        };
        return vec![parts];
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(cfg.batch_size)
        .map(|c| c.iter().map(|&i| train[i].clone()).collect())
        .collect()
}

/// Plain SGD with truncated BPTT. Records train (and, if given, test)
/// metrics before training and after every epoch.
pub fn sgd_refine(
    model: &PsrnnModel,
    train: &[Sequence],
    test: Option<&[Sequence]>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(PsrnnModel, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    let mut model = model.clone();
    let mut report = TrainReport::default();
    report.record(0, "train", &evaluate(&model, train, exec)?);
    if let Some(t) = test {
        report.record(0, "test", &evaluate(&model, t, exec)?);
    }
    for epoch in 1..=cfg.epochs {
        for batch in epoch_batches(train, cfg, epoch) {
            let mut streams: Vec<Stream> = batch
                .into_iter()
                .map(|seq| Stream {
                    seq,
                    state: StartState::Initial,
                    pos: 0,
                })
                .collect();
            loop {
                let active: Vec<usize> = (0..streams.len())
                    .filter(|&i| streams[i].pos + 1 < streams[i].seq.len())
                    .collect();
                if active.is_empty() {
                    break;
                }
                let results = exec.map(&active, |&i| {
                    let s = &streams[i];
                    let n = s.seq.len() - 1;
                    let end = cfg.bptt_horizon.map_or(n, |h| (s.pos + h).min(n));
                    window_gradient(&model, &s.seq, s.pos..end, &s.state, true)
                });
                let mut total = GradientSet::zeros_like(&model);
                let mut steps = 0;
                for (&i, r) in active.iter().zip(results) {
                    let r = r?;
                    total.add_assign(&r.grad);
                    steps += r.steps;
                    report.underflows += r.underflows;
                    streams[i].pos += r.steps;
                    streams[i].state = StartState::Carried(r.end_states);
                }
                total.scale(1.0 / steps as f64);
                if let Some(param) = total.first_non_finite() {
                    return Err(PsrnnError::NonFiniteGradient {
                        param,
                        step: report.updates,
                    });
                }
                apply_update(&mut model, &mut total, cfg, &mut report);
            }
        }
        report.record(epoch, "train", &evaluate(&model, train, exec)?);
        if let Some(t) = test {
            report.record(epoch, "test", &evaluate(&model, t, exec)?);
        }
    }
    Ok((model, report))
}

fn apply_update(model: &mut PsrnnModel, g: &mut GradientSet, cfg: &TrainConfig, report: &mut TrainReport) {
    if cfg.grad_clip > 0.0 {
        let n = g.norm();
        if n > cfg.grad_clip {
            g.scale(cfg.grad_clip / n);
            report.clip_events += 1;
        }
    }
    let lr = cfg.learning_rate;
    for ((name, p), (_, d)) in param_groups_mut(model).into_iter().zip(g.groups()) {
        if !cfg.train_q1 && name.ends_with(".q1") {
            continue;
        }
        for (x, y) in p.iter_mut().zip(d) {
            *x -= lr * y;
        }
    }
    if cfg.train_q1 {
        for layer in &mut model.layers {
            let n = layer.q1.norm();
            if n > 0.0 {
                layer.q1 /= n;
            }
        }
    }
    report.updates += 1;
}

/// Largest per-entry relative error of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub threshold: f64,
    pub passed: bool,
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold for [`grad_check`].
pub const GRAD_TOL: f64 = 1e-5;
/// Denominator floor in the per-entry relative error
/// `|a − n| / max(|a|, |n|, floor)`.
pub const REL_FLOOR: f64 = 1e-5;

/// Random sequence of `len` observations matching the model's input.
pub fn random_sequence(model: &PsrnnModel, len: usize, seed: u64) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match model.encoder.input {
        crate::model::InputKind::Symbols { alphabet } => {
            Sequence::Discrete((0..len).map(|_| rng.random_range(0..alphabet)).collect())
        }
        crate::model::InputKind::Vectors { dim } => Sequence::Continuous(
            (0..len)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        ),
    }
}

/// Compares [`window_gradient`] of the mean loss over a 3-step window with
/// central differences for every parameter entry.
pub fn grad_check(model: &PsrnnModel, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(model, seed, |_| {})
}

/// [`grad_check`] with a hook applied to the analytic gradient before the
/// comparison.
pub fn grad_check_with(model: &PsrnnModel, seed: u64, hook: impl Fn(&mut GradientSet)) -> Result<GradCheckReport> {
    model.validate()?;
    let seq = random_sequence(model, 4, seed);
    let steps = 0..3;
    let mean_loss = |m: &PsrnnModel| -> Result<f64> {
        Ok(window_gradient(m, &seq, steps.clone(), &StartState::Initial, false)?.loss / 3.0)
    };
    let mut analytic = window_gradient(model, &seq, steps.clone(), &StartState::Initial, false)?.grad;
    analytic.scale(1.0 / 3.0);
    hook(&mut analytic);
    let mut groups = Vec::new();
    let names: Vec<(String, usize)> = analytic.groups().iter().map(|(n, a)| (n.clone(), a.len())).collect();
    let mut work = model.clone();
    for (gi, (name, len)) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for e in 0..*len {
            let orig = param_groups_mut(&mut work)[gi].1[e];
            param_groups_mut(&mut work)[gi].1[e] = orig + FD_STEP;
            let plus = mean_loss(&work)?;
            param_groups_mut(&mut work)[gi].1[e] = orig - FD_STEP;
            let minus = mean_loss(&work)?;
            param_groups_mut(&mut work)[gi].1[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.groups()[gi].1[e];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        groups.push(GroupCheck {
            name: name.clone(),
            entries: *len,
            max_rel_error: worst,
        });
    }
    let passed = groups.iter().all(|g| g.max_rel_error <= GRAD_TOL);
    Ok(GradCheckReport {
        groups,
        threshold: GRAD_TOL,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Decoder, Encoder, FactorizedCell, InputKind, Layer, ModelMeta, PsrnnCell};

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn metric_examples() {
        let uniform = vec![DVector::zeros(4); 10];
        let targets: Vec<usize> = (0..10).map(|i| i % 4).collect();
        assert!((loss_bpc(&uniform, &targets).unwrap() - 2.0).abs() < 1e-15);
        let sharp: Vec<DVector<f64>> = targets.iter().map(|&t| e(4, t) * 5.0).collect();
        assert_eq!(metric_ospa(&sharp, &targets).unwrap(), 1.0);
        let p = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert_eq!(loss_mse(&p, &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(loss_mse(&p, &[vec![0.0, 0.0]]).unwrap(), 5.0);
        assert!(loss_bpc(&[], &[]).is_err());
    }

    fn random_model(factorized: bool, layers: usize, seed: u64) -> PsrnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize, m: usize| DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let alphabet = 3;
        let dims = [4, 3];
        let mut model_layers = Vec::new();
        let mut d_in = alphabet;
        for &dq in dims.iter().take(layers) {
            let b = r(dq, 1).column(0).into_owned() * 0.3;
            let cell = if factorized {
                Cell::Factorized(
                    FactorizedCell::new(CpFactors::new(r(3, dq), r(3, d_in), r(3, dq)).unwrap(), b).unwrap(),
                )
            } else {
                let w = r(dq, d_in * dq);
                Cell::Full(
                    PsrnnCell::new(Tensor3::from_vec([dq, d_in, dq], w.as_slice().to_vec()).unwrap(), b).unwrap(),
                )
            };
            let q1 = r(dq, 1).column(0).normalize();
            model_layers.push(Layer { cell, q1 });
            d_in = dq;
        }
        let mut enc = Encoder::one_hot(alphabet);
        enc.projection += r(alphabet, alphabet) * 0.2;
        PsrnnModel {
            encoder: enc,
            layers: model_layers,
            decoder: Decoder {
                weight: r(alphabet, d_in),
                bias: r(alphabet, 1).column(0).into_owned(),
            },
            meta: ModelMeta::default(),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for factorized in [false, true] {
            for layers in [1, 2] {
                let m = random_model(factorized, layers, 10 + layers as u64);
                let rep = grad_check(&m, 3).unwrap();
                assert!(rep.passed, "factorized={factorized} layers={layers}: {:?}", rep.groups);
            }
        }
    }

    #[test]
    fn continuous_gradients_match() {
        let mut m = random_model(false, 1, 4);
        m.encoder = Encoder {
            input: InputKind::Vectors { dim: 2 },
            rff: None,
            offset: DVector::from_vec(vec![0.1, -0.2]),
            projection: DMatrix::from_row_slice(3, 2, &[1.0, 0.3, -0.5, 0.8, 0.2, 0.1]),
        };
        m.decoder = Decoder {
            weight: DMatrix::from_fn(2, 4, |i, j| 0.1 * (i as f64 + 1.0) - 0.05 * j as f64),
            bias: DVector::from_vec(vec![0.2, -0.1]),
        };
        let rep = grad_check(&m, 5).unwrap();
        assert!(rep.passed, "{:?}", rep.groups);
    }

    #[test]
    fn wrong_sign_hook_fails() {
        let m = random_model(false, 1, 2);
        let rep = grad_check_with(&m, 1, |g| g.decoder_bias.neg_mut()).unwrap();
        assert!(!rep.passed);
        let bad = rep.groups.iter().find(|g| g.name == "decoder.bias").unwrap();
        assert!(bad.max_rel_error > 1.0);
    }

    #[test]
    fn normalization_jacobian_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let u = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let v = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let n = u.norm();
            let s: DVector<f64> = &u / n;
            let jv = (&v - &s * s.dot(&v)) / n;
            let h = 1e-6;
            let fd = ((&u + &v * h).normalize() - (&u - &v * h).normalize()) / (2.0 * h);
            assert!((jv - fd).amax() < 1e-7);
        }
    }

    #[test]
    fn long_horizon_equals_untruncated() {
        let m = random_model(false, 2, 9);
        let seq = random_sequence(&m, 12, 4);
        let full = sequence_gradient(&m, &seq, None).unwrap();
        for h in [11, 12, 50] {
            let t = sequence_gradient(&m, &seq, Some(h)).unwrap();
            for ((_, a), (_, b)) in full.grad.groups().iter().zip(t.grad.groups()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
        let short = sequence_gradient(&m, &seq, Some(3)).unwrap();
        assert_eq!(short.steps, 11);
        assert!((short.loss - full.loss).abs() < 1e-9);
        assert_ne!(short.grad, full.grad);
    }

    fn hmm_data() -> (PsrnnModel, Vec<Sequence>, Vec<Sequence>) {
        let spec = crate::oracle::HmmSpec::random(3, 4, 1, &Default::default()).unwrap();
        let train = vec![Sequence::Discrete(spec.sample(3_000, 1))];
        let test = vec![Sequence::Discrete(spec.sample(1_000, 2))];
        let cfg = crate::twostage::InitConfig::default();
        let (m, _) = crate::twostage::init_model(&train, Some(4), &cfg, Exec::Parallel).unwrap();
        (m, train, test)
    }

    #[test]
    fn zero_epochs_and_zero_lr() {
        let (m, train, test) = hmm_data();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, rep) = sgd_refine(&m, &train, Some(&test), &cfg, Exec::Parallel).unwrap();
        assert_eq!(out, m);
        assert_eq!(rep.updates, 0);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (out, rep) = sgd_refine(&m, &train, Some(&test), &cfg, Exec::Parallel).unwrap();
        assert_eq!(out, m);
        let b0 = rep.value(0, "train", "bpc").unwrap();
        assert_eq!(rep.value(2, "train", "bpc").unwrap(), b0);
    }

    #[test]
    fn training_is_deterministic_across_exec_modes() {
        let (m, train, test) = hmm_data();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (a, ra) = sgd_refine(&m, &train, Some(&test), &cfg, Exec::Parallel).unwrap();
        let (b, rb) = sgd_refine(&m, &train, Some(&test), &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.curves_csv().starts_with("epoch,split,metric,value\n0,train,bpc,"));
        assert!(ra.max_norm_deviation <= 1e-12);
    }

    #[test]
    fn frozen_q1_stays_put() {
        let (m, train, _) = hmm_data();
        let cfg = TrainConfig {
            epochs: 1,
            train_q1: false,
            ..TrainConfig::default()
        };
        let (out, _) = sgd_refine(&m, &train, None, &cfg, Exec::Parallel).unwrap();
        assert_eq!(out.layers[0].q1, m.layers[0].q1);
        assert_ne!(out.layers[0].cell, m.layers[0].cell);
    }
}
