//! Acceptance suite: one PASS / FAIL / NOT RUN line per criterion.
//!
//! Criteria 1 and 2 always run. Criteria 3 to 9 need the MNIST IDX files
//! under `ROBUSTFORGE_DATA_DIR` and CPU-hours of training; without them they
//! report NOT RUN, and synthetic proxies exercise the same pipeline for 6, 7
//! and 9 (clearly labelled, they do not stand in for the MNIST numbers).
//!
//! Environment:
//! - `ROBUSTFORGE_DATA_DIR`: directory with the four MNIST IDX files.
//! - `ROBUSTFORGE_ACCEPTANCE_DIR`: artifact cache (default: cargo's test tmpdir).
//! - `ROBUSTFORGE_ACCEPTANCE_STRICT=1`: NOT RUN counts as failure.
//!
//! Positional arguments select criteria by number, e.g. `-- 1 2`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustforge::attack::{
    input_gradient, per_example_xent, pgd_attack, run_attack, step_attack, AttackConfig, InitMode, TargetMode,
};
use robustforge::autodiff::{Graph, Padding, Var};
use robustforge::data::Batch;
use robustforge::defense::{BaseObjective, DefenseSpec, Optimizer};
use robustforge::eval::{EvalReport, ThreatModel};
use robustforge::model::{init_model, Architecture, ModelParams, ModelSpec};
use robustforge::{Scalar, Tensor};
use robustforge_cli::commands::{self, BlackBoxSource};
use robustforge_cli::config::{DataConfig, ExperimentConfig, DATA_DIR_ENV, MNIST_FILES};
use robustforge_cli::Overrides;

#[derive(Debug, Clone, PartialEq)]
enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

struct Outcome {
    failures: usize,
    not_run: usize,
    informational: usize,
}

impl Outcome {
    /// Prints the verdict without letting it decide the exit status.
    fn inform(&mut self, label: &str, v: Verdict) {
        match v {
            Verdict::Fail(d) => {
                self.informational += 1;
                println!("{label}: FAIL, informational ({d})")
            }
            other => self.record(label, other),
        }
    }

    fn record(&mut self, label: &str, v: Verdict) {
        match &v {
            Verdict::Pass(d) => println!("{label}: PASS ({d})"),
            Verdict::Fail(d) => {
                self.failures += 1;
                println!("{label}: FAIL ({d})")
            }
            Verdict::NotRun(d) => {
                self.not_run += 1;
                println!("{label}: NOT RUN ({d})")
            }
        }
    }
}

/// Collects named checks into one verdict.
#[derive(Default)]
struct Checks {
    lines: Vec<String>,
    failed: Vec<String>,
}

impl Checks {
    fn that(&mut self, ok: bool, what: String) {
        if !ok {
            self.failed.push(what.clone());
        }
        self.lines.push(what);
    }

    fn within(&mut self, what: &str, got: f64, want: f64, tol: f64) {
        let ok = (got - want).abs() <= tol + 1e-12;
        self.that(ok, format!("{what} {:.1}% vs {:.1}% +/- {:.0}", 100.0 * got, 100.0 * want, 100.0 * tol));
    }

    fn verdict(self) -> Verdict {
        if self.failed.is_empty() {
            Verdict::Pass(self.lines.join("; "))
        } else {
            Verdict::Fail(format!("failed: {}", self.failed.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks in f64.

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(lo..hi);
            if v.abs() < 1e-2 {
                v + 2e-2
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

#[derive(Default)]
struct FdStats {
    checked: usize,
    skipped: usize,
    max_err: f64,
    worst: String,
    failures: Vec<String>,
}

impl FdStats {
    /// Central differences of `f` against `analytic` at coordinate `i` of
    /// leaf `li`. A coordinate whose estimate moves when the step halves
    /// sits on a relu / max-pool switch and is skipped.
    fn compare(&mut self, name: &str, analytic: f64, central: impl Fn(f64) -> f64) {
        let numeric = central(FD_H);
        if rel_err(numeric, central(FD_H / 2.0)) > FD_TOL / 10.0 {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_err {
            self.max_err = e;
            self.worst = name.to_string();
        }
        if e >= FD_TOL {
            self.failures.push(format!("{name}: analytic {analytic} numeric {numeric}"));
        }
    }

    fn check_graph<F>(&mut self, name: &str, leaves: &[Tensor<f64>], coords: Option<usize>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let eval = |ls: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out, &vars).unwrap();
        let mut pick = ChaCha8Rng::seed_from_u64(7);
        for (li, leaf) in leaves.iter().enumerate() {
            let idx: Vec<usize> = match coords {
                Some(c) if c < leaf.len() => (0..c).map(|_| pick.random_range(0..leaf.len())).collect(),
                _ => (0..leaf.len()).collect(),
            };
            for i in idx {
                self.compare(&format!("{name} leaf {li}[{i}]"), grads[li].data()[i], |h| {
                    let mut p = leaves.to_vec();
                    p[li].data_mut()[i] += h;
                    let mut m = leaves.to_vec();
                    m[li].data_mut()[i] -= h;
                    (eval(&p) - eval(&m)) / (2.0 * h)
                });
            }
        }
    }
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let y = if g.shape(y).len() > 2 { g.flatten(y).unwrap() } else { y };
    let d = g.shape(y)[1];
    let r = g.leaf(uniform(&[d, 1], seed, -1.0, 1.0));
    let p = g.matmul(y, r).unwrap();
    g.sum(p).unwrap()
}

fn model_leaves(params: &ModelParams<f64>, x: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut leaves: Vec<Tensor<f64>> = params.entries().iter().map(|(_, t)| (**t).clone()).collect();
    leaves.push(x);
    leaves
}

fn criterion_gradients() -> Verdict {
    let mut s = FdStats::default();
    let u = uniform;
    s.check_graph("matmul", &[u(&[3, 4], 1, -1., 1.), u(&[4, 5], 2, -1., 1.)], None, |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 3)
    });
    for (p, seed) in [(Padding::Valid, 10), (Padding::Same, 20)] {
        let leaves = [u(&[2, 6, 5, 2], seed, 0., 1.), u(&[3, 3, 2, 3], seed + 1, -1., 1.)];
        s.check_graph("conv2d", &leaves, None, |g, v| {
            let y = g.conv2d(v[0], v[1], p).unwrap();
            project(g, y, seed + 2)
        });
    }
    s.check_graph("conv2d 5x5 same", &[u(&[1, 7, 7, 2], 30, 0., 1.), u(&[5, 5, 2, 2], 31, -1., 1.)], None, |g, v| {
        let y = g.conv2d(v[0], v[1], Padding::Same).unwrap();
        project(g, y, 32)
    });
    s.check_graph("add_bias", &[u(&[2, 3, 3, 4], 40, -1., 1.), u(&[4], 41, -1., 1.)], None, |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        project(g, y, 42)
    });
    s.check_graph("relu", &[u(&[4, 6], 50, -1., 1.)], None, |g, v| {
        let y = g.relu(v[0]).unwrap();
        project(g, y, 51)
    });
    s.check_graph("max_pool2x2", &[u(&[2, 4, 6, 3], 60, -1., 1.)], None, |g, v| {
        let y = g.max_pool2x2(v[0]).unwrap();
        project(g, y, 61)
    });
    s.check_graph("flatten+scale_add", &[u(&[2, 2, 2, 2], 70, -1., 1.), u(&[2, 8], 71, -1., 1.)], None, |g, v| {
        let f = g.flatten(v[0]).unwrap();
        let y = g.scale_add(f, 0.7, v[1], -1.3).unwrap();
        project(g, y, 72)
    });
    s.check_graph("scale", &[u(&[3, 3], 80, -1., 1.)], None, |g, v| {
        let y = g.scale(v[0], -2.5).unwrap();
        project(g, y, 81)
    });
    s.check_graph("sum", &[u(&[2, 3], 90, -1., 1.)], None, |g, v| g.sum(v[0]).unwrap());
    let hard = Tensor::<f64>::one_hot(&[0, 2, 1], 4);
    let mut soft = u(&[3, 4], 100, 0.1, 1.0);
    for i in 0..3 {
        let total: f64 = soft.row(i).iter().sum();
        for k in 0..4 {
            soft.data_mut()[i * 4 + k] /= total;
        }
    }
    for t in [hard, soft] {
        s.check_graph("softmax_xent", &[u(&[3, 4], 101, -3., 3.)], None, |g, v| g.softmax_xent(v[0], &t).unwrap());
    }
    let pair = [u(&[3, 5], 110, -2., 2.), u(&[3, 5], 111, -2., 2.)];
    s.check_graph("pair_l2", &pair, None, |g, v| g.pair_l2(v[0], v[1]).unwrap());
    s.check_graph("logit_norm", &pair[..1], None, |g, v| g.logit_norm(v[0]).unwrap());

    for (arch, shape, coords) in [
        (Architecture::LenetMadry, [28usize, 28, 1], 16),
        (Architecture::MlpToy, [8, 8, 1], 40),
    ] {
        let params = init_model::<f64>(&ModelSpec::new(arch, 3, shape, 10)).unwrap();
        let [h, w, c] = shape;
        let targets = Tensor::<f64>::one_hot(&[3, 7], 10);
        let leaves = model_leaves(&params, u(&[2, h, w, c], 120, 0.05, 0.95));
        let np = params.entries().len();
        s.check_graph(arch_name(arch), &leaves, Some(coords), |g, v| {
            let z = params.forward_with(g, &v[..np], v[np]).unwrap();
            g.softmax_xent(z, &targets).unwrap()
        });
    }

    // the summed loss that attacks differentiate
    let params = init_model::<f64>(&ModelSpec::new(Architecture::LenetMadry, 8, [28, 28, 1], 10)).unwrap();
    let x = u(&[2, 28, 28, 1], 130, 0.05, 0.95);
    let labels = [1, 4];
    let grad = input_gradient(&params, &x, &Tensor::one_hot(&labels, 10)).unwrap();
    let loss = |x: &Tensor<f64>| -> f64 { per_example_xent(&params.logits(x).unwrap(), &labels).iter().sum() };
    let mut pick = ChaCha8Rng::seed_from_u64(131);
    for _ in 0..40 {
        let i = pick.random_range(0..x.len());
        s.compare(&format!("attack input gradient [{i}]"), grad.data()[i], |h| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (loss(&p) - loss(&m)) / (2.0 * h)
        });
    }

    let total = s.checked + s.skipped;
    let detail = format!(
        "{} coordinates, {} skipped at kinks, max rel err {:.2e} at {}",
        s.checked, s.skipped, s.max_err, s.worst
    );
    if !s.failures.is_empty() {
        Verdict::Fail(format!("{detail}; {}", s.failures[..s.failures.len().min(3)].join("; ")))
    } else if s.skipped * 5 > total {
        Verdict::Fail(format!("{detail}; too many kinks"))
    } else {
        Verdict::Pass(detail)
    }
}

fn arch_name(a: Architecture) -> &'static str {
    match a {
        Architecture::LenetMadry => "lenet_madry",
        Architecture::MlpToy => "mlp_toy",
    }
}

// ---------------------------------------------------------------------------
// Criterion 2: fuzzed attack invocations.

const FUZZ_CASES: usize = 10_000;

fn random_config(r: &mut ChaCha8Rng) -> AttackConfig {
    let epsilon = match r.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => r.random_range(0.0..0.5),
    };
    let steps = r.random_range(1..=6);
    AttackConfig {
        epsilon,
        step_epsilon: if steps == 1 && r.random_bool(0.5) { epsilon } else { r.random_range(0.0..=epsilon) },
        steps,
        restarts: r.random_range(1..=3),
        init: if r.random_bool(0.5) { InitMode::Zero } else { InitMode::UniformInBall },
        target_mode: [TargetMode::Untargeted, TargetMode::LeastLikely, TargetMode::RandomClass][r.random_range(0..3)],
        rng_seed: r.random(),
    }
}

fn random_batch<S: Scalar>(r: &mut ChaCha8Rng, m: usize, shape: [usize; 3], k: usize) -> Batch<S> {
    let n = m * shape.iter().product::<usize>();
    // saturated pixels exercise the range clamp
    let data: Vec<f64> = (0..n)
        .map(|_| match r.random_range(0..8) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..=1.0),
        })
        .collect();
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
    let mut s = vec![m];
    s.extend(shape);
    Batch {
        images: Tensor::from_f64(&s, &data).unwrap(),
        targets: Tensor::one_hot(&labels, k),
        labels,
        ids: (0..m).map(|_| r.random()).collect(),
    }
}

fn linf_and_range<S: Scalar>(adv: &Tensor<S>, clean: &Tensor<S>) -> (f64, bool) {
    let mut d = 0.0f64;
    let mut in_range = true;
    for (a, c) in adv.data().iter().zip(clean.data()) {
        let (a, c) = (a.as_f64(), c.as_f64());
        d = d.max((a - c).abs());
        in_range &= (0.0..=1.0).contains(&a);
    }
    (d, in_range)
}

struct FuzzModels<S> {
    models: Vec<(ModelParams<S>, [usize; 3], usize)>,
}

impl<S: Scalar> FuzzModels<S> {
    fn new(seed: u64) -> Self {
        let mut models = Vec::new();
        for (i, (shape, k)) in [([8, 8, 1], 4), ([6, 6, 3], 10), ([5, 7, 1], 2)].into_iter().enumerate() {
            let params = init_model::<S>(&ModelSpec::new(Architecture::MlpToy, seed + i as u64, shape, k)).unwrap();
            models.push((params, shape, k));
        }
        let lenet = init_model::<S>(&ModelSpec::new(Architecture::LenetMadry, seed, [28, 28, 1], 10)).unwrap();
        models.push((lenet, [28, 28, 1], 10));
        Self { models }
    }
}

fn fuzz_one<S: Scalar>(models: &FuzzModels<S>, r: &mut ChaCha8Rng, case: usize) -> Result<f64, String> {
    // lenet on one case in fifty keeps the budget to seconds
    let which = if case.is_multiple_of(50) { 3 } else { r.random_range(0..3) };
    let (params, shape, k) = &models.models[which];
    let mut cfg = random_config(r);
    if which == 3 {
        cfg.steps = cfg.steps.min(2);
        cfg.restarts = 1;
    }
    let m = if which == 3 { 1 } else { r.random_range(1..=6) };
    let batch = random_batch::<S>(r, m, *shape, *k);
    let out = run_attack(params, &batch, &cfg).map_err(|e| format!("case {case}: {e}"))?;
    let (d, in_range) = linf_and_range(&out.adversarial, &batch.images);
    if d > cfg.epsilon + 1e-6 || !in_range {
        return Err(format!("case {case}: {cfg:?} gave linf {d}, in range {in_range}"));
    }
    Ok(d - cfg.epsilon)
}

fn pgd_matches_step<S: Scalar>(models: &FuzzModels<S>, r: &mut ChaCha8Rng, cases: usize) -> Result<(), String> {
    for case in 0..cases {
        let which = case % models.models.len();
        let (params, shape, k) = &models.models[which];
        let mut cfg = random_config(r);
        cfg.steps = 1;
        cfg.init = InitMode::Zero;
        let m = if which == 3 { 2 } else { r.random_range(1..=6) };
        let batch = random_batch::<S>(r, m, *shape, *k);
        let a = pgd_attack(params, &batch, &cfg).map_err(|e| e.to_string())?;
        let b = step_attack(params, &batch, &cfg).map_err(|e| e.to_string())?;
        if a.adversarial != b.adversarial || a.chosen_targets != b.chosen_targets {
            return Err(format!("{}-bit case {case}: {cfg:?}", 8 * std::mem::size_of::<S>()));
        }
    }
    Ok(())
}

fn criterion_attacks() -> Verdict {
    let start = Instant::now();
    let m32 = FuzzModels::<f32>::new(1);
    let m64 = FuzzModels::<f64>::new(1);
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut slack = f64::NEG_INFINITY;
    for case in 0..FUZZ_CASES {
        let res = if case % 2 == 0 {
            fuzz_one(&m32, &mut r, case)
        } else {
            fuzz_one(&m64, &mut r, case)
        };
        match res {
            Ok(s) => slack = slack.max(s),
            Err(e) => return Verdict::Fail(e),
        }
    }
    for res in [pgd_matches_step(&m32, &mut r, 200), pgd_matches_step(&m64, &mut r, 200)] {
        if let Err(e) = res {
            return Verdict::Fail(format!("pgd(steps=1, zero init) differs from the step attack: {e}"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(300) {
        return Verdict::Fail(format!("took {elapsed:.0?}, budget 5 min"));
    }
    Verdict::Pass(format!(
        "{FUZZ_CASES} fuzzed invocations in ball and range (max linf - eps = {slack:.1e}); 400 bit-exact pgd/step pairs at 32 and 64 bit; {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Criteria 3 to 9: preset pipelines.

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Mnist,
    /// Synthetic blobs and the small MLP in place of MNIST and LeNet.
    Proxy,
}

struct Bench {
    root: PathBuf,
    mode: Mode,
}

/// White-box, black-box and clean accuracy of one model.
#[derive(Debug, Clone)]
struct Row {
    white_box: f64,
    black_box: f64,
    clean: f64,
    sample_count: usize,
    subset_seed: u64,
}

impl Row {
    fn from_reports(reports: &[EvalReport], subset_seed: u64) -> Self {
        let get = |t: ThreatModel| {
            reports
                .iter()
                .find(|r| r.threat_model == t)
                .unwrap_or_else(|| panic!("missing {} report", t.as_str()))
        };
        Row {
            white_box: get(ThreatModel::WhiteBox).worst_case_accuracy,
            black_box: get(ThreatModel::BlackBox).worst_case_accuracy,
            clean: get(ThreatModel::Clean).worst_case_accuracy,
            sample_count: get(ThreatModel::WhiteBox).sample_count,
            subset_seed,
        }
    }
}

type Res<T> = Result<T, String>;

const PROXY_EPSILON: f64 = 0.35;

fn shrink_attack(a: &mut AttackConfig, steps: usize, step_epsilon: f64) {
    a.epsilon = PROXY_EPSILON;
    a.steps = steps;
    a.step_epsilon = step_epsilon;
}

impl Bench {
    fn new(root: PathBuf, mode: Mode) -> Self {
        Self { root, mode }
    }

    fn config(&self, preset: &str, tag: &str) -> Res<ExperimentConfig> {
        let overrides = Overrides {
            out: Some(self.root.join(tag)),
            ..Overrides::default()
        };
        let mut cfg = commands::prepare(preset, &overrides).map_err(|e| e.to_string())?;
        if self.mode == Mode::Proxy {
            cfg.data = DataConfig::Synthetic {
                train_size: 2000,
                test_size: 400,
                class_count: 10,
                seed: 21,
            };
            cfg.model.architecture = Architecture::MlpToy;
            cfg.model.init_scheme = None;
            cfg.train.epochs = 8;
            cfg.train.batch_size = 32;
            cfg.train.optimizer = Optimizer::SgdMomentum { lr: 0.01, momentum: 0.9 };
            cfg.eval.subset_size = Some(200);
            for a in &mut cfg.attacks {
                shrink_attack(&mut a.config, 10, 0.05);
            }
            let defenses = std::iter::once(&mut cfg.defense)
                .chain(cfg.transfer.as_mut().and_then(|t| t.source_defense.as_mut()));
            for d in defenses {
                if let Some(a) = &mut d.inner_attack {
                    shrink_attack(a, 5, 0.1);
                }
            }
            cfg.resolve();
            cfg.validate().map_err(|e| e.to_string())?;
        }
        Ok(cfg)
    }

    /// Trains `cfg` unless an identical config already left a checkpoint.
    fn trained(&self, cfg: &ExperimentConfig) -> Res<PathBuf> {
        let ckpt = cfg.output_dir.join(commands::CHECKPOINT);
        let resolved = std::fs::read_to_string(cfg.output_dir.join(commands::RESOLVED_CONFIG)).ok();
        if ckpt.exists() && resolved.as_deref() == Some(cfg.to_toml().as_str()) {
            return Ok(ckpt);
        }
        commands::cmd_train(cfg).map_err(|e| format!("{}: {e}", cfg.name))?;
        Ok(ckpt)
    }

    /// Config of the independently initialised copy that crafts black-box
    /// examples. `defense` replaces the preset's source defense.
    fn source_config(&self, preset: &str, tag: &str, defense: Option<DefenseSpec>) -> Res<ExperimentConfig> {
        let mut cfg = self.config(preset, tag)?;
        let t = cfg.transfer.clone().ok_or_else(|| format!("{preset} has no [transfer] section"))?;
        cfg.model.init_seed = t.source_init_seed;
        cfg.defense = match defense {
            Some(d) => d,
            None => t.source_defense.expect("resolved config fills source_defense"),
        };
        Ok(cfg)
    }

    /// Trains the source and writes its transfer set; returns the set's dir.
    fn transfer_set(&self, source: &ExperimentConfig) -> Res<PathBuf> {
        let ckpt = self.trained(source)?;
        let summary = commands::cmd_attack(source, &ckpt).map_err(|e| e.to_string())?;
        Ok(summary.directory)
    }

    fn evaluate(&self, cfg: &ExperimentConfig, set: &Path) -> Res<Row> {
        let ckpt = self.trained(cfg)?;
        let reports = commands::cmd_eval(cfg, &ckpt, &BlackBoxSource::TransferSet(set.to_path_buf()))
            .map_err(|e| format!("{}: {e}", cfg.name))?;
        Ok(Row::from_reports(&reports, cfg.eval.subset_seed))
    }

    /// Evaluates a preset against the shared M-PGD source copy.
    fn row(&self, preset: &str) -> Res<Row> {
        let source = self.source_config("mnist-mpgd", "source-mpgd", None)?;
        let set = self.transfer_set(&source)?;
        self.evaluate(&self.config(preset, preset)?, &set)
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn criterion_undefended(b: &Bench) -> Res<Verdict> {
    let r = b.row("mnist-clean")?;
    let mut c = Checks::default();
    c.that(r.clean >= 0.985, format!("clean {} >= 98.5%", pct(r.clean)));
    c.that(r.white_box <= 0.05, format!("PGD-40 worst case {} <= 5%", pct(r.white_box)));
    Ok(c.verdict())
}

fn adversarial_rows(b: &Bench) -> Res<(Row, Row)> {
    Ok((b.row("mnist-mpgd")?, b.row("mnist-alp")?))
}

fn criterion_mixed_vs_pairing(b: &Bench) -> Res<Verdict> {
    let (m, a) = adversarial_rows(b)?;
    let mut c = Checks::default();
    c.within("M-PGD white box", m.white_box, 0.932, 0.04);
    c.within("M-PGD black box", m.black_box, 0.960, 0.03);
    c.within("M-PGD clean", m.clean, 0.985, 0.01);
    c.within("ALP white box", a.white_box, 0.964, 0.03);
    c.within("ALP black box", a.black_box, 0.975, 0.03);
    c.within("ALP clean", a.clean, 0.988, 0.01);
    c.that(a.white_box > m.white_box, "ALP white box > M-PGD white box".into());
    c.that(a.black_box >= m.black_box, "ALP black box >= M-PGD black box".into());
    c.that(
        m.sample_count == a.sample_count && m.subset_seed == a.subset_seed,
        format!("same {}-example subset", m.sample_count),
    );
    Ok(c.verdict())
}

/// The reduced variant: 10k training examples and PGD-10 everywhere.
fn criterion_mixed_vs_pairing_smoke(b: &Bench) -> Res<Verdict> {
    let start = Instant::now();
    let smoke = |cfg: &mut ExperimentConfig| {
        if let DataConfig::Mnist { train_subset, .. } = &mut cfg.data {
            *train_subset = Some(10_000);
        }
        let pgd10 = |a: &mut AttackConfig| {
            a.steps = 10;
            a.step_epsilon = 0.03;
        };
        for a in &mut cfg.attacks {
            pgd10(&mut a.config);
        }
        if let Some(a) = &mut cfg.defense.inner_attack {
            pgd10(a);
        }
    };
    let smoke_root = b.root.join("smoke");
    let sb = Bench::new(smoke_root, b.mode);
    let mut source = sb.source_config("mnist-mpgd", "source-mpgd", None)?;
    smoke(&mut source);
    let set = sb.transfer_set(&source)?;
    let mut rows = Vec::new();
    for preset in ["mnist-mpgd", "mnist-alp"] {
        let mut cfg = sb.config(preset, preset)?;
        smoke(&mut cfg);
        rows.push(sb.evaluate(&cfg, &set)?);
    }
    let elapsed = start.elapsed();
    let (m, a) = (&rows[0], &rows[1]);
    let mut c = Checks::default();
    c.that(
        a.white_box > m.white_box,
        format!("ALP white box {} > M-PGD {}", pct(a.white_box), pct(m.white_box)),
    );
    c.that(
        a.black_box >= m.black_box,
        format!("ALP black box {} >= M-PGD {}", pct(a.black_box), pct(m.black_box)),
    );
    c.that(elapsed < Duration::from_secs(30 * 60), format!("{:.0?} < 30 min", elapsed));
    Ok(c.verdict())
}

fn criterion_squeezing(b: &Bench) -> Res<Verdict> {
    let noise = b.row("mnist-noise-only")?;
    let squeeze = b.row("mnist-squeeze")?;
    let pairing = b.row("mnist-clp")?;
    let mut c = Checks::default();
    c.within("noise-only white box", noise.white_box, 0.255, 0.10);
    c.within("squeeze white box", squeeze.white_box, 0.863, 0.08);
    c.within("squeeze black box", squeeze.black_box, 0.968, 0.03);
    c.within("squeeze clean", squeeze.clean, 0.990, 0.01);
    c.that(
        squeeze.white_box >= noise.white_box + 0.20,
        format!(
            "squeeze(1.0) {} at least 20 points above squeeze(0) {}",
            pct(squeeze.white_box),
            pct(noise.white_box)
        ),
    );
    c.that(
        squeeze.white_box >= pairing.white_box,
        format!("squeezing {} >= pairing {} at weight 1.0", pct(squeeze.white_box), pct(pairing.white_box)),
    );
    Ok(c.verdict())
}

const DEFENDED: [&str; 5] = ["mnist-mpgd", "mnist-alp", "mnist-noise-only", "mnist-squeeze", "mnist-clp"];

fn black_box_ordering(b: &Bench, presets: &[&str]) -> Res<Verdict> {
    let mut c = Checks::default();
    for p in presets {
        let r = b.row(p)?;
        c.that(
            r.black_box >= r.white_box,
            format!("{p} black box {} >= white box {}", pct(r.black_box), pct(r.white_box)),
        );
    }
    Ok(c.verdict())
}

fn transfer_strength(b: &Bench) -> Res<Verdict> {
    let target = b.config("mnist-clean", "mnist-clean")?;
    let declared = b.source_config("mnist-clean", "source-mpgd", None)?;
    if declared.defense.base != BaseObjective::MixedPgd {
        return Err("mnist-clean's transfer source is not adversarially trained".into());
    }
    // Same config as the source shared by the other criteria, so its checkpoint is reused.
    let adv_source = b.source_config("mnist-mpgd", "source-mpgd", None)?;
    let clean_source = b.source_config("mnist-mpgd", "source-clean", Some(DefenseSpec::clean()))?;
    let from_adv = b.evaluate(&target, &b.transfer_set(&adv_source)?)?;
    let from_clean = b.evaluate(&target, &b.transfer_set(&clean_source)?)?;
    let mut c = Checks::default();
    c.that(
        from_adv.black_box < from_clean.black_box,
        format!(
            "undefended target under M-PGD-source examples {} < under clean-source examples {}",
            pct(from_adv.black_box),
            pct(from_clean.black_box)
        ),
    );
    Ok(c.verdict())
}

fn criterion_baselines(b: &Bench) -> Res<Verdict> {
    let alp = b.row("mnist-alp")?;
    let mut c = Checks::default();
    for p in ["mnist-label-smooth", "mnist-mixup"] {
        let r = b.row(p)?;
        c.that(
            r.white_box <= alp.white_box - 0.20,
            format!("{p} {} at least 20 points below ALP {}", pct(r.white_box), pct(alp.white_box)),
        );
    }
    Ok(c.verdict())
}

/// Retrains and re-evaluates in a fresh directory and compares bytes.
fn determinism(b: &Bench, presets: &[&str]) -> Res<Verdict> {
    let fresh = Bench::new(b.root.join("rerun"), b.mode);
    let _ = std::fs::remove_dir_all(&fresh.root);
    let mut c = Checks::default();
    for p in presets {
        b.row(p)?;
        fresh.row(p)?;
        for f in [commands::CHECKPOINT, "report.csv", commands::TRAINING_LOG] {
            let x = std::fs::read(b.root.join(p).join(f)).map_err(|e| e.to_string())?;
            let y = std::fs::read(fresh.root.join(p).join(f)).map_err(|e| e.to_string())?;
            c.that(x == y, format!("{p}/{f} identical"));
        }
    }
    Ok(c.verdict())
}

fn mnist_available() -> Option<PathBuf> {
    let dir = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
    MNIST_FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

fn artifact_root() -> PathBuf {
    std::env::var_os("ROBUSTFORGE_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn lift(r: Res<Verdict>) -> Verdict {
    r.unwrap_or_else(|e| Verdict::Fail(format!("pipeline error: {e}")))
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let strict = std::env::var("ROBUSTFORGE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut out = Outcome {
        failures: 0,
        not_run: 0,
        informational: 0,
    };

    if want(1) {
        out.record("criterion 1 gradient soundness", criterion_gradients());
    }
    if want(2) {
        out.record("criterion 2 attack soundness", criterion_attacks());
    }

    type Crit = fn(&Bench) -> Res<Verdict>;
    let mnist: [(u32, &str, Crit); 8] = [
        (3, "undefended collapse", criterion_undefended),
        (4, "mixed-minibatch vs adversarial logit pairing", criterion_mixed_vs_pairing),
        (4, "mixed-minibatch vs adversarial logit pairing, reduced variant", criterion_mixed_vs_pairing_smoke),
        (5, "noise-only and logit squeezing", criterion_squeezing),
        (6, "black box >= white box", |b| black_box_ordering(b, &DEFENDED)),
        (7, "transfer strength", transfer_strength),
        (8, "baseline inferiority", criterion_baselines),
        (9, "determinism", |b| {
            determinism(b, &["mnist-clean", "mnist-mpgd", "mnist-alp", "mnist-noise-only", "mnist-squeeze"])
        }),
    ];
    match mnist_available() {
        Some(_) => {
            let bench = Bench::new(artifact_root().join("mnist"), Mode::Mnist);
            for (n, name, f) in mnist {
                if want(n) {
                    let start = Instant::now();
                    let v = lift(f(&bench));
                    out.record(&format!("criterion {n} {name} [{:.0?}]", start.elapsed()), v);
                }
            }
        }
        None => {
            for (n, name, _) in mnist {
                if want(n) {
                    out.record(
                        &format!("criterion {n} {name}"),
                        Verdict::NotRun(format!(
                            "needs the MNIST IDX files in ${DATA_DIR_ENV} and CPU-hours of training"
                        )),
                    );
                }
            }
        }
    }

    // The same pipelines on synthetic data. These exercise the code paths
    // and properties; they are not the MNIST criteria. Determinism and the
    // black-box ordering must hold on any data; transfer strength is an
    // empirical claim about MNIST, so its proxy only informs.
    let proxy = Bench::new(artifact_root().join("proxy"), Mode::Proxy);
    let _ = std::fs::remove_dir_all(&proxy.root);
    if want(6) {
        let v = lift(black_box_ordering(&proxy, &["mnist-mpgd", "mnist-alp"]));
        out.record("criterion 6 black box >= white box [synthetic proxy]", v);
    }
    if want(7) {
        let v = lift(transfer_strength(&proxy));
        out.inform("criterion 7 transfer strength [synthetic proxy]", v);
    }
    if want(9) {
        let v = lift(determinism(&proxy, &["mnist-clean", "mnist-mpgd", "mnist-alp", "mnist-squeeze"]));
        out.record("criterion 9 determinism [synthetic proxy]", v);
    }

    println!(
        "acceptance: {} failed, {} not run, {} informational proxy failures{}",
        out.failures,
        out.not_run,
        out.informational,
        if strict { " (strict)" } else { "" }
    );
    if out.failures > 0 || (strict && out.not_run > 0) {
        std::process::exit(1);
    }
}
