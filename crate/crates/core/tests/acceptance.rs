//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psrnn::data::Sequence;
use psrnn::features::WindowSpec;
use psrnn::model::{factorize_model, FactorizeOptions, FactorizedCell, PsrnnCell, PsrnnModel};
use psrnn::modelfile;
use psrnn::oracle::{total_variation, HmmSpec};
use psrnn::par::Exec;
use psrnn::tensor::{cp_als_traced, cp_reconstruct, CpAlsOptions, CpFactors, Mode, Tensor3};
use psrnn::train::{evaluate, grad_check, sgd_refine, TrainConfig, TrainReport};
use psrnn::twostage::{full_norm_model, init_model, random_model, InitConfig, StageOptions};

const TRAIN_LEN: usize = 100_000;
const TEST_LEN: usize = 20_000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

/// Norm and underflow bookkeeping shared by every run.
#[derive(Default)]
struct NormLog {
    max_dev: f64,
    underflows: usize,
    runs: usize,
}

impl NormLog {
    fn report(&mut self, r: &TrainReport) {
        self.max_dev = self.max_dev.max(r.max_norm_deviation);
        self.underflows += r.underflows;
        self.runs += 1;
    }

    fn states(&mut self, m: &PsrnnModel, seqs: &[Sequence]) {
        for s in seqs {
            let out = m.filter(s).expect("filter");
            self.underflows += out.underflows;
            for layer in &out.states {
                for q in layer {
                    self.max_dev = self.max_dev.max((q.norm() - 1.0).abs());
                }
            }
        }
        self.runs += 1;
    }
}

struct Corpus {
    hmm: HmmSpec,
    train: Vec<Sequence>,
    test: Vec<Sequence>,
    exact_test_bpc: f64,
}

fn corpus(seed: u64, train_len: usize) -> Corpus {
    let hmm = HmmSpec::random(3, 4, seed, &Default::default()).expect("hmm");
    let train = hmm.sample(train_len, seed * 2 + 100);
    let test = hmm.sample(TEST_LEN, seed * 2 + 101);
    let exact_test_bpc = hmm.forward_filter(&test).expect("forward").bpc;
    Corpus {
        hmm,
        train: vec![Sequence::Discrete(train)],
        test: vec![Sequence::Discrete(test)],
        exact_test_bpc,
    }
}

/// Refinement settings shared by the comparisons.
fn refine_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        bptt_horizon: Some(35),
        epochs: 5,
        batch_size: 128,
        grad_clip: 0.0,
        train_q1: true,
        seed,
    }
}

fn bpc(r: &TrainReport, epoch: usize, split: &str) -> f64 {
    r.value(epoch, split, "bpc").expect("curve point")
}

fn naive_contract(t: &Tensor3, mode: Mode, v: &[f64]) -> DMatrix<f64> {
    let [d1, d2, d3] = t.dims();
    match mode {
        Mode::First => DMatrix::from_fn(d2, d3, |j, k| (0..d1).map(|i| t.get(i, j, k) * v[i]).sum()),
        Mode::Second => DMatrix::from_fn(d1, d3, |i, k| (0..d2).map(|j| t.get(i, j, k) * v[j]).sum()),
        Mode::Third => DMatrix::from_fn(d1, d2, |i, j| (0..d3).map(|k| t.get(i, j, k) * v[k]).sum()),
    }
}

fn naive_mode_product(t: &Tensor3, mode: Mode, m: &DMatrix<f64>) -> Tensor3 {
    let mut dims = t.dims();
    let n = mode as usize;
    let inner = dims[n];
    dims[n] = m.nrows();
    Tensor3::from_fn(dims, |a, b, c| {
        (0..inner)
            .map(|x| {
                let v = match mode {
                    Mode::First => t.get(x, b, c),
                    Mode::Second => t.get(a, x, c),
                    Mode::Third => t.get(a, b, x),
                };
                let row = [a, b, c][n];
                v * m[(row, x)]
            })
            .sum()
    })
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let dims = [
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        ];
        let t = Tensor3::random(dims, 1.0, &mut rng);
        for mode in [Mode::First, Mode::Second, Mode::Third] {
            let n = dims[mode as usize];
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = t.contract_vec(mode, &v).expect("contract");
            worst = worst.max((got - naive_contract(&t, mode, &v)).amax());
            let r = rng.random_range(1..=5);
            let m = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
            let got = t.mode_product(mode, &m).expect("product");
            let want = naive_mode_product(&t, mode, &m);
            let diff = got
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(diff);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-12 && secs < 5.0,
        detail: format!("max abs error {worst:.2e} over 200 instances, {secs:.2} s"),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for r in 1..=5 {
        for rep in 0..20 {
            let dims = [
                rng.random_range(r.max(2)..=10),
                rng.random_range(r.max(2)..=10),
                rng.random_range(r.max(2)..=10),
            ];
            let mut draw = |d: usize| DMatrix::from_fn(r, d, |_, _| rng.random_range(-1.0..1.0));
            let truth = CpFactors::new(draw(dims[0]), draw(dims[1]), draw(dims[2])).expect("factors");
            let t = cp_reconstruct(&truth);
            let opts = CpAlsOptions {
                max_iters: 2000,
                seed: 10 * r as u64 + rep,
                ..CpAlsOptions::new(r)
            };
            let res = cp_als_traced(&t, &opts).expect("als");
            worst = worst.max(t.relative_error(&cp_reconstruct(&res.factors)));
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-6 && secs < 30.0,
        detail: format!("worst relative error {worst:.2e} over {cases} tensors (r ≤ 5, dims ≤ 10), {secs:.2} s"),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (dq, d_o, n) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=10),
        );
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let f = CpFactors::new(m(n, dq), m(n, d_o), m(n, dq)).expect("factors");
        let b = m(dq, 1).column(0).into_owned();
        let q = m(dq, 1).column(0).into_owned();
        let o = m(d_o, 1).column(0).into_owned();
        let fac = FactorizedCell::new(f.clone(), b.clone()).expect("cell");
        let full = PsrnnCell::new(cp_reconstruct(&f), b).expect("cell");
        let d = fac.preactivation(&q, &o).expect("mi") - full.preactivation(&q, &o).expect("full");
        worst = worst.max(d.amax());
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max pre-normalization difference {worst:.2e} over 100 draws"),
    }
}

fn random_discrete_model(layers: usize, rank: Option<usize>, seed: u64) -> PsrnnModel {
    let train = vec![Sequence::Discrete((0..200).map(|t| (t * 7 + t / 3) % 4).collect())];
    let cfg = InitConfig {
        layers,
        seed,
        ..InitConfig::default()
    };
    let mut m = random_model(&train, Some(4), &cfg).expect("random model");
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
    for layer in &mut m.layers {
        let n = layer.cell.state_dim();
        *layer.cell.bias_mut() = DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
    }
    m.decoder.bias = DVector::from_fn(4, |_, _| rng.random_range(-0.3..0.3));
    m.encoder.projection += DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.2..0.2));
    match rank {
        None => m,
        Some(r) => {
            let opts = FactorizeOptions {
                rank: r,
                seed,
                ..FactorizeOptions::default()
            };
            factorize_model(&m, &opts, &train).expect("factorize").0
        }
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all = true;
    let mut cases = Vec::new();
    for (name, rank) in [("full", None), ("factorized", Some(3))] {
        for layers in [1, 2] {
            for seed in 0..3 {
                let m = random_discrete_model(layers, rank, seed);
                let rep = grad_check(&m, seed).expect("grad check");
                let w = rep.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
                worst = worst.max(w);
                all &= rep.passed;
            }
            cases.push(format!("{name}×{layers}"));
        }
    }
    let c = corpus(0, 10_000);
    let (m, _) = init_model(&c.train, Some(4), &InitConfig::default(), Exec::Parallel).expect("init");
    let rep = grad_check(&m, 0).expect("grad check");
    all &= rep.passed;
    worst = worst.max(rep.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max));
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: all && secs < 60.0,
        detail: format!(
            "worst relative error {worst:.2e} ({} × 3 seeds plus a 2SR model), {secs:.1} s",
            cases.join(", ")
        ),
    }
}

fn criterion_5(log: &mut NormLog) -> Outcome {
    let start = Instant::now();
    let full = corpus(0, TRAIN_LEN);
    let seq = full.test[0].symbols().expect("discrete").to_vec();
    let exact = full.hmm.forward_filter(&seq).expect("forward");
    let mut tvs = Vec::new();
    for t in [1_000, 10_000, 100_000] {
        let sym = full.train[0].symbols().expect("discrete")[..t].to_vec();
        let fm = full_norm_model(
            &[Sequence::Discrete(sym)],
            4,
            WindowSpec::new(1, 1).expect("window"),
            &StageOptions::default(),
            Exec::Parallel,
        )
        .expect("full-norm model");
        let preds = fm.predict(&seq).expect("predict");
        let n = seq.len() - 1;
        let tv: f64 = (0..n)
            .map(|i| total_variation(preds[i].as_slice(), &exact.predictive[i]))
            .sum::<f64>()
            / n as f64;
        tvs.push(tv);
    }
    let decreasing = tvs.windows(2).all(|w| w[1] < w[0]);
    let (m, _) = init_model(&full.train, Some(4), &InitConfig::default(), Exec::Parallel).expect("init");
    log.states(&m, &full.test);
    let ospa = evaluate(&m, &full.test, Exec::Parallel)
        .expect("eval")
        .ospa
        .expect("discrete");
    let gap = (ospa - exact.ospa).abs() * 100.0;
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: decreasing && tvs[2] <= 0.05 && gap <= 2.0 && secs < 600.0,
        detail: format!(
            "full-norm TV at T=1e3/1e4/1e5: {:.4}/{:.4}/{:.4}; two-norm OSPA {:.2}% vs exact {:.2}% (gap {gap:.2} points), {secs:.1} s",
            tvs[0],
            tvs[1],
            tvs[2],
            ospa * 100.0,
            exact.ospa * 100.0
        ),
    }
}

fn criterion_6(corpora: &[Corpus], log: &mut NormLog) -> Outcome {
    let mut wins = 0;
    let mut never_worse = true;
    let mut parts = Vec::new();
    for (c, &seed) in corpora.iter().zip(&SEEDS) {
        let icfg = InitConfig {
            seed,
            ..InitConfig::default()
        };
        let tcfg = refine_cfg(seed);
        let (m2sr, _) = init_model(&c.train, Some(4), &icfg, Exec::Parallel).expect("init");
        let mrand = random_model(&c.train, Some(4), &icfg).expect("random");
        let (_, r2) = sgd_refine(&m2sr, &c.train, Some(&c.test), &tcfg, Exec::Parallel).expect("refine");
        let (_, rr) = sgd_refine(&mrand, &c.train, Some(&c.test), &tcfg, Exec::Parallel).expect("refine");
        log.report(&r2);
        log.report(&rr);
        let (t2, tr) = (bpc(&r2, 5, "test"), bpc(&rr, 5, "test"));
        if t2 < tr {
            wins += 1;
        }
        let (a, b) = (bpc(&r2, 0, "train"), bpc(&r2, 5, "train"));
        never_worse &= b <= a;
        parts.push(format!(
            "seed {seed}: test 2SR {t2:.4} vs random {tr:.4} (exact {:.4}), 2SR train {a:.6} -> {b:.6}",
            c.exact_test_bpc
        ));
    }
    Outcome {
        pass: wins >= 2 && never_worse,
        detail: format!("2SR wins {wins}/3; {}", parts.join("; ")),
    }
}

fn criterion_7(corpora: &[Corpus], log: &mut NormLog) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (c, &seed) in corpora.iter().zip(&SEEDS) {
        let tcfg = refine_cfg(seed);
        let mut results = Vec::new();
        for layers in [1, 2] {
            let icfg = InitConfig {
                seed,
                layers,
                ..InitConfig::default()
            };
            let (m, _) = init_model(&c.train, Some(4), &icfg, Exec::Parallel).expect("init");
            let (_, r) = sgd_refine(&m, &c.train, Some(&c.test), &tcfg, Exec::Parallel).expect("refine");
            log.report(&r);
            results.push(bpc(&r, 5, "test"));
        }
        pass &= results[1] <= results[0] + 0.05;
        parts.push(format!(
            "seed {seed}: 1-layer {:.4}, 2-layer {:.4}",
            results[0], results[1]
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_8(corpora: &[Corpus], log: &mut NormLog) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (c, &seed) in corpora.iter().zip(&SEEDS) {
        let icfg = InitConfig {
            seed,
            ..InitConfig::default()
        };
        let tcfg = refine_cfg(seed);
        let (m, _) = init_model(&c.train, Some(4), &icfg, Exec::Parallel).expect("init");
        let (_, rf) = sgd_refine(&m, &c.train, Some(&c.test), &tcfg, Exec::Parallel).expect("refine");
        log.report(&rf);
        let full = bpc(&rf, 5, "test");
        let mut by_rank = Vec::new();
        for rank in [2, 5, 10, 20] {
            let opts = FactorizeOptions {
                rank,
                seed,
                ..FactorizeOptions::default()
            };
            let (f, _) = factorize_model(&m, &opts, &c.train).expect("factorize");
            let (_, r) = sgd_refine(&f, &c.train, Some(&c.test), &tcfg, Exec::Parallel).expect("refine");
            log.report(&r);
            by_rank.push(bpc(&r, 5, "test"));
        }
        let monotone = by_rank.windows(2).all(|w| w[1] <= w[0] + 0.05);
        let full_ok = by_rank.iter().all(|&b| full <= b + 0.05);
        pass &= monotone && full_ok;
        parts.push(format!(
            "seed {seed}: ranks 2/5/10/20 {:.4}/{:.4}/{:.4}/{:.4}, full {full:.4}",
            by_rank[0], by_rank[1], by_rank[2], by_rank[3]
        ));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_9(log: &NormLog) -> Outcome {
    Outcome {
        pass: log.max_dev <= 1e-12,
        detail: format!(
            "max |‖q‖ − 1| = {:.2e} over {} runs; normalization underflows: {}",
            log.max_dev, log.runs, log.underflows
        ),
    }
}

fn criterion_10() -> Outcome {
    let c = corpus(7, 10_000);
    let run = |exec: Exec| {
        let cfg = InitConfig {
            seed: 3,
            layers: 2,
            ..InitConfig::default()
        };
        let (m, _) = init_model(&c.train, Some(4), &cfg, exec).expect("init");
        let tcfg = TrainConfig {
            epochs: 1,
            ..refine_cfg(3)
        };
        let (m, _) = sgd_refine(&m, &c.train, Some(&c.test), &tcfg, exec).expect("refine");
        let opts = FactorizeOptions {
            rank: 6,
            seed: 3,
            ..FactorizeOptions::default()
        };
        let (f, _) = factorize_model(&m, &opts, &c.train).expect("factorize");
        (
            modelfile::to_bytes(&m).expect("bytes"),
            modelfile::to_bytes(&f).expect("bytes"),
        )
    };
    let a = run(Exec::Parallel);
    let b = run(Exec::Parallel);
    let s = run(Exec::Sequential);
    let repeat = a == b && a == s;
    let round_trip = [&a.0, &a.1]
        .iter()
        .all(|bytes| modelfile::to_bytes(&modelfile::from_bytes(bytes).expect("load")).expect("bytes") == **bytes);
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("m.psrn");
    let m = modelfile::from_bytes(&a.0).expect("load");
    modelfile::save(&m, &path).expect("save");
    let on_disk = std::fs::read(&path).expect("read") == a.0;
    Outcome {
        pass: repeat && round_trip && on_disk,
        detail: format!(
            "repeated runs identical: {repeat} (incl. sequential path); save/load/save identical: {}",
            round_trip && on_disk
        ),
    }
}

fn main() {
    let start = Instant::now();
    let mut log = NormLog::default();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "tensor oracle equivalence", criterion_1());
    record(2, "CP recovery", criterion_2());
    record(3, "multiplicative-integration identity", criterion_3());
    record(4, "gradient correctness", criterion_4());
    record(5, "HMM consistency", criterion_5(&mut log));
    let corpora: Vec<Corpus> = SEEDS.iter().map(|&s| corpus(s, TRAIN_LEN)).collect();
    record(6, "initialization value", criterion_6(&corpora, &mut log));
    record(7, "multilayer", criterion_7(&corpora, &mut log));
    record(8, "rank sweep", criterion_8(&corpora, &mut log));
    record(9, "normalization invariant", criterion_9(&log));
    record(10, "determinism and serialization", criterion_10());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
