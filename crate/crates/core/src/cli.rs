//! Command implementations behind the `psrnn` binary. Each returns values
//! rather than writing files so it can be driven from tests.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_chars, load_trajectories, DataKind, Dataset, Sequence, Split};
use crate::error::{PsrnnError, Result};
use crate::model::{factorize_model, FactorizeReport, PsrnnModel};
use crate::oracle::{total_variation, HmmSpec};
use crate::par::Exec;
use crate::train::{evaluate, grad_check, sgd_refine, GradCheckReport, Metrics, TrainReport};
use crate::twostage::{init_model, random_model, InitReport};

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| PsrnnError::io(p, e))?;
            RunConfig::from_json(&s)
        }
    }
}

/// `*.json` is a saved [`Dataset`]; `*.csv`, directories and glob patterns
/// are trajectory files; anything else is a byte-level character corpus.
pub fn load_data(spec: &str, cfg: &RunConfig) -> Result<Dataset> {
    let path = Path::new(spec);
    let is_glob = spec.contains(['*', '?', '[']);
    if spec.ends_with(".json") {
        let s = fs::read_to_string(path).map_err(|e| PsrnnError::io(path, e))?;
        Dataset::from_json(&s)
    } else if is_glob || path.is_dir() || spec.ends_with(".csv") {
        let split = match cfg.data.train_files {
            Some(n) => Split::TrainFiles(n),
            None => Split::Fraction(cfg.data.train_fraction),
        };
        load_trajectories(spec, split)
    } else {
        load_chars(path, cfg.data.train_fraction)
    }
}

pub fn load_hmm(path: &Path) -> Result<HmmSpec> {
    let s = fs::read_to_string(path).map_err(|e| PsrnnError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| PsrnnError::Config(format!("{}: {e}", path.display())))
}

fn alphabet(data: &Dataset) -> Option<usize> {
    match data.kind {
        DataKind::Discrete { alphabet } => Some(alphabet),
        DataKind::Continuous { .. } => None,
    }
}

/// Model predictions against the exact forward filter on the same sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub exact_bpc: f64,
    pub exact_ospa: f64,
    pub model_bpc: f64,
    pub model_ospa: f64,
    /// Mean total-variation distance between the model's softmax and the
    /// exact one-step predictive distribution.
    pub mean_tv: f64,
    pub steps: usize,
}

pub fn compare_with_oracle(
    model: &PsrnnModel,
    hmm: &HmmSpec,
    seqs: &[Sequence],
    exec: Exec,
) -> Result<OracleComparison> {
    let per_seq = exec.map(seqs, |s| -> Result<(f64, f64, f64, usize)> {
        let sym = s
            .symbols()
            .ok_or_else(|| PsrnnError::InvalidArgument("oracle comparison needs discrete data".into()))?;
        let n = sym.len().saturating_sub(1);
        let exact = hmm.forward_filter(sym)?;
        let out = model.filter(s)?;
        let mut tv = 0.0;
        for t in 0..n {
            let z = &out.predictions[t];
            let m = z.max();
            let e = z.map(|v| (v - m).exp());
            let p: DVector<f64> = &e / e.sum();
            let mut q = exact.predictive[t].clone();
            q.resize(p.len(), 0.0);
            tv += total_variation(p.as_slice(), &q);
        }
        Ok((exact.bpc * n as f64, exact.ospa * n as f64, tv, n))
    });
    let (mut bits, mut hits, mut tv, mut steps) = (0.0, 0.0, 0.0, 0);
    for r in per_seq {
        let (b, h, t, n) = r?;
        bits += b;
        hits += h;
        tv += t;
        steps += n;
    }
    if steps == 0 {
        return Err(PsrnnError::EmptyData("no scored steps".into()));
    }
    let m = evaluate(model, seqs, exec)?;
    Ok(OracleComparison {
        exact_bpc: bits / steps as f64,
        exact_ospa: hits / steps as f64,
        model_bpc: m.bpc.unwrap_or(f64::NAN),
        model_ospa: m.ospa.unwrap_or(f64::NAN),
        mean_tv: tv / steps as f64,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOutput {
    pub config_hash: String,
    pub init: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<InitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleComparison>,
}

pub fn cmd_init(
    cfg: &RunConfig,
    data: &Dataset,
    hmm: Option<&HmmSpec>,
    exec: Exec,
) -> Result<(PsrnnModel, InitOutput)> {
    let icfg = cfg.init_config(&data.kind);
    let (mut model, report) = if cfg.model.random_init {
        (random_model(&data.train, alphabet(data), &icfg)?, None)
    } else {
        let (m, r) = init_model(&data.train, alphabet(data), &icfg, exec)?;
        (m, Some(r))
    };
    let hash = cfg.hash()?;
    model.meta.config_hash = hash.clone();
    model.meta.byte_alphabet = data.manifest.byte_alphabet.clone();
    let oracle = match hmm {
        Some(h) => {
            let seqs = if data.test.is_empty() { &data.train } else { &data.test };
            Some(compare_with_oracle(&model, h, seqs, exec)?)
        }
        None => None,
    };
    let out = InitOutput {
        config_hash: hash,
        init: model.meta.init.clone(),
        report,
        oracle,
    };
    Ok((model, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: PsrnnModel,
    pub report: TrainReport,
    /// Same refinement from a random initialization of the same shape.
    pub random: Option<TrainReport>,
}

impl TrainOutput {
    /// Learning curves; the random-initialization run uses `random-` split
    /// prefixes.
    pub fn curves_csv(&self) -> String {
        let mut s = self.report.curves_csv();
        if let Some(r) = &self.random {
            for c in &r.curves {
                s.push_str(&format!("{},random-{},{},{}\n", c.epoch, c.split, c.metric, c.value));
            }
        }
        s
    }
}

pub fn cmd_train(
    cfg: &RunConfig,
    model: &PsrnnModel,
    data: &Dataset,
    compare_random: bool,
    exec: Exec,
) -> Result<TrainOutput> {
    let tcfg = cfg.train_config(&data.kind);
    let test = (!data.test.is_empty()).then_some(data.test.as_slice());
    let (mut refined, report) = sgd_refine(model, &data.train, test, &tcfg, exec)?;
    refined.meta.config_hash = cfg.hash()?;
    let random = if compare_random {
        let mut icfg = cfg.init_config(&data.kind);
        icfg.layers = model.layers.len();
        let r = random_model(&data.train, alphabet(data), &icfg)?;
        Some(sgd_refine(&r, &data.train, test, &tcfg, exec)?.1)
    } else {
        None
    };
    Ok(TrainOutput {
        model: refined,
        report,
        random,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizeOutput {
    pub report: FactorizeReport,
    /// Largest absolute difference between the top-layer states of the
    /// factorized and the original model over the training data.
    pub state_divergence: f64,
}

pub fn cmd_factorize(
    cfg: &RunConfig,
    model: &PsrnnModel,
    data: &Dataset,
    rank: usize,
    exec: Exec,
) -> Result<(PsrnnModel, FactorizeOutput)> {
    let opts = cfg.factorize_options(rank);
    let (f, report) = factorize_model(model, &opts, &data.train)?;
    let diffs = exec.map(&data.train, |s| -> Result<f64> {
        let a = model.filter(s)?;
        let b = f.filter(s)?;
        let top = a.states.len() - 1;
        Ok(a.states[top]
            .iter()
            .zip(&b.states[top])
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max))
    });
    let mut div: f64 = 0.0;
    for d in diffs {
        div = div.max(d?);
    }
    Ok((
        f,
        FactorizeOutput {
            report,
            state_divergence: div,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub train: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleComparison>,
}

pub fn cmd_eval(model: &PsrnnModel, data: &Dataset, hmm: Option<&HmmSpec>, exec: Exec) -> Result<EvalOutput> {
    let train = evaluate(model, &data.train, exec)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(model, &data.test, exec)?)
    };
    let oracle = match hmm {
        Some(h) => {
            let seqs = if data.test.is_empty() { &data.train } else { &data.test };
            Some(compare_with_oracle(model, h, seqs, exec)?)
        }
        None => None,
    };
    Ok(EvalOutput { train, test, oracle })
}

/// Random well-conditioned HMM and a train/test corpus sampled from it.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(Dataset, HmmSpec)> {
    let s = &cfg.synth;
    let hmm = HmmSpec::random(s.states, s.symbols, cfg.seed, &Default::default())?;
    let train = hmm.sample(s.length, cfg.seed.wrapping_mul(2).wrapping_add(100));
    let test = if s.test_length > 0 {
        vec![hmm.sample(s.test_length, cfg.seed.wrapping_mul(2).wrapping_add(101))]
    } else {
        Vec::new()
    };
    let data = Dataset::from_symbols(vec![train], test, s.symbols)?;
    Ok((data, hmm))
}

pub fn cmd_gradcheck(model: &PsrnnModel, seed: u64) -> Result<GradCheckReport> {
    grad_check(model, seed)
}
