//! L-infinity bounded sign-gradient attacks.
//!
//! Untargeted attacks ascend the true-class cross-entropy; targeted attacks
//! descend the cross-entropy toward the chosen target class. After every move
//! the candidate is projected back onto the intersection of the epsilon ball
//! around the clean image and the pixel range `[0, 1]`. Projection is never
//! differentiated through.
//!
//! All randomness is keyed by `(rng_seed, example id, restart)`, so attacking
//! a batch in pieces gives the same result as attacking it whole.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Reduction};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zero,
    UniformInBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Untargeted,
    LeastLikely,
    RandomClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Total L-infinity budget, in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub step_epsilon: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub restarts: usize,
    pub init: InitMode,
    pub target_mode: TargetMode,
    #[serde(default)]
    pub rng_seed: u64,
}

fn one() -> usize {
    1
}

impl AttackConfig {
    /// PGD with random start: epsilon 0.3, step 0.01, 40 steps, one run.
    pub fn mnist_pgd() -> Self {
        Self {
            epsilon: 0.3,
            step_epsilon: 0.01,
            steps: 40,
            restarts: 1,
            init: InitMode::UniformInBall,
            target_mode: TargetMode::Untargeted,
            rng_seed: 0,
        }
    }

    /// Single sign-gradient step of the full budget.
    pub fn single_step(epsilon: f64, init: InitMode, target_mode: TargetMode) -> Self {
        Self {
            epsilon,
            step_epsilon: epsilon,
            steps: 1,
            restarts: 1,
            init,
            target_mode,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(0.0..=self.epsilon).contains(&self.step_epsilon) {
            return bad(format!(
                "step_epsilon {} outside [0, epsilon = {}]",
                self.step_epsilon, self.epsilon
            ));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        Ok(())
    }

    /// Short stable hash of the full configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("attack config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// An attack configuration with a display name, as used in suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub config: AttackConfig,
}

impl NamedAttack {
    pub fn new(name: impl Into<String>, config: AttackConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }
}

/// The eight-attack suite: single-step and iterative attacks toward the
/// least-likely or a random class, with and without random starts.
pub fn standard_suite(epsilon: f64, step_epsilon: f64, steps: usize, seed: u64) -> Vec<NamedAttack> {
    let mut suite = Vec::new();
    for (tag, mode) in [("LL", TargetMode::LeastLikely), ("Rand", TargetMode::RandomClass)] {
        for (prefix, init) in [("", InitMode::Zero), ("R+", InitMode::UniformInBall)] {
            let mut c = AttackConfig::single_step(epsilon, init, mode);
            c.rng_seed = seed;
            suite.push(NamedAttack::new(format!("{prefix}Step-{tag}"), c));
        }
        for (prefix, init) in [("Iter", InitMode::Zero), ("PGD", InitMode::UniformInBall)] {
            suite.push(NamedAttack::new(
                format!("{prefix}-{tag}"),
                AttackConfig {
                    epsilon,
                    step_epsilon,
                    steps,
                    restarts: 1,
                    init,
                    target_mode: mode,
                    rng_seed: seed,
                },
            ));
        }
    }
    suite
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<S> {
    pub adversarial: Tensor<S>,
    pub chosen_targets: Vec<usize>,
    /// Defender loss of the kept candidate: true-class cross-entropy when
    /// untargeted, target-class cross-entropy when targeted.
    pub per_example_loss: Vec<f64>,
    pub restart_index_used: Vec<usize>,
}

/// Target class per example. Untargeted returns the true labels.
pub fn select_target<S: Scalar>(
    logits: &Tensor<S>,
    true_labels: &[usize],
    ids: &[u64],
    mode: TargetMode,
    seed: u64,
) -> Vec<usize> {
    let k = logits.shape()[1];
    match mode {
        TargetMode::Untargeted => true_labels.to_vec(),
        TargetMode::LeastLikely => logits.argmin_rows(),
        TargetMode::RandomClass => true_labels
            .iter()
            .zip(ids)
            .map(|(&y, &id)| {
                let mut r = rng::stream(seed, &[rng::DOMAIN_TARGET, id]);
                let pick = r.random_range(0..k - 1);
                if pick >= y {
                    pick + 1
                } else {
                    pick
                }
            })
            .collect(),
    }
}

/// Clamps `candidate` into `[origin - eps, origin + eps]`, then into `[0, 1]`.
pub fn project_linf<S: Scalar>(candidate: &Tensor<S>, origin: &Tensor<S>, epsilon: f64) -> Result<Tensor<S>> {
    if candidate.shape() != origin.shape() {
        return Err(Error::shape(
            "project_linf",
            format!("{:?} vs {:?}", candidate.shape(), origin.shape()),
        ));
    }
    let eps = S::from_f64(epsilon);
    let data = candidate
        .data()
        .iter()
        .zip(origin.data())
        .map(|(&c, &o)| c.max(o - eps).min(o + eps).max(S::zero()).min(S::one()))
        .collect();
    Tensor::new(candidate.shape().to_vec(), data)
}

/// Per-example cross-entropy of `logits` against hard `targets`, in f64.
pub fn per_example_xent<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .collect()
}

/// Gradient of the summed cross-entropy toward `targets` with respect to the
/// input batch. Summing keeps each example's gradient independent of the
/// batch it travels in.
pub fn input_gradient<S: Scalar>(params: &ModelParams<S>, x: &Tensor<S>, targets: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let f = params.forward(&mut g, xv)?;
    let loss = g.softmax_xent_reduced(f.logits, targets, Reduction::Sum)?;
    let grad = g.backward(loss, &[xv]).map_err(|e| match e {
        Error::NonFinite { op, .. } => Error::NonFinite {
            op,
            context: "in input gradient".into(),
        },
        other => other,
    })?;
    Ok(grad.into_iter().next().unwrap())
}

struct Prepared<S> {
    origin: Tensor<S>,
    targets: Vec<usize>,
    target_onehot: Tensor<S>,
    /// +1 ascends the target loss (untargeted), -1 descends it (targeted).
    direction: S,
    ids: Vec<u64>,
}

fn prepare<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>, config: &AttackConfig) -> Result<Prepared<S>> {
    config.validate()?;
    let targets = match config.target_mode {
        TargetMode::LeastLikely => {
            let logits = params.logits(&batch.images)?;
            select_target(&logits, &batch.labels, &batch.ids, config.target_mode, config.rng_seed)
        }
        // no forward pass needed
        mode => select_target(
            &Tensor::<S>::zeros(&[batch.len(), params.class_count()]),
            &batch.labels,
            &batch.ids,
            mode,
            config.rng_seed,
        ),
    };
    let direction = if config.target_mode == TargetMode::Untargeted {
        S::one()
    } else {
        -S::one()
    };
    Ok(Prepared {
        origin: batch.images.clone(),
        target_onehot: Tensor::one_hot(&targets, params.class_count()),
        targets,
        direction,
        ids: batch.ids.clone(),
    })
}

fn start_point<S: Scalar>(p: &Prepared<S>, config: &AttackConfig, restart: usize) -> Result<Tensor<S>> {
    match config.init {
        InitMode::Zero => Ok(p.origin.clone()),
        InitMode::UniformInBall => {
            let w = p.origin.row_len();
            let eps = config.epsilon;
            let mut data = Vec::with_capacity(p.origin.len());
            for (i, &id) in p.ids.iter().enumerate() {
                let mut r = rng::stream(config.rng_seed, &[rng::DOMAIN_ATTACK_INIT, id, restart as u64]);
                for &o in p.origin.row(i) {
                    let u: f64 = if eps > 0.0 { r.random_range(-eps..eps) } else { 0.0 };
                    data.push(o + S::from_f64(u));
                }
                debug_assert_eq!(data.len(), (i + 1) * w);
            }
            let x = Tensor::new(p.origin.shape().to_vec(), data)?;
            project_linf(&x, &p.origin, eps)
        }
    }
}

/// One signed-gradient move of `step` followed by projection.
fn signed_step<S: Scalar>(
    params: &ModelParams<S>,
    p: &Prepared<S>,
    x: &Tensor<S>,
    step: f64,
    epsilon: f64,
) -> Result<Tensor<S>> {
    let grad = input_gradient(params, x, &p.target_onehot)?;
    if let Some(flat) = grad.first_non_finite() {
        return Err(Error::NonFinite {
            op: "attack",
            context: format!("gradient for example {}", flat / grad.row_len()),
        });
    }
    let a = S::from_f64(step) * p.direction;
    let moved = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > S::zero() {
                S::one()
            } else if g < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            v + a * s
        })
        .collect();
    project_linf(&Tensor::new(x.shape().to_vec(), moved)?, &p.origin, epsilon)
}

/// Keeps, per example, the candidate with the worst defender loss.
struct RestartSelector<S> {
    best: Option<Tensor<S>>,
    loss: Vec<f64>,
    used: Vec<usize>,
    maximise: bool,
}

impl<S: Scalar> RestartSelector<S> {
    fn new(maximise: bool) -> Self {
        Self {
            best: None,
            loss: Vec::new(),
            used: Vec::new(),
            maximise,
        }
    }

    fn offer(&mut self, params: &ModelParams<S>, p: &Prepared<S>, candidate: Tensor<S>, restart: usize) -> Result<()> {
        let losses = per_example_xent(&params.logits(&candidate)?, &p.targets);
        match &mut self.best {
            None => {
                self.loss = losses;
                self.used = vec![restart; p.targets.len()];
                self.best = Some(candidate);
            }
            Some(best) => {
                let w = best.row_len();
                for (i, &l) in losses.iter().enumerate() {
                    let better = if self.maximise { l > self.loss[i] } else { l < self.loss[i] };
                    if better {
                        self.loss[i] = l;
                        self.used[i] = restart;
                        best.data_mut()[i * w..(i + 1) * w].copy_from_slice(candidate.row(i));
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self, targets: Vec<usize>) -> AttackOutcome<S> {
        AttackOutcome {
            adversarial: self.best.expect("at least one restart"),
            chosen_targets: targets,
            per_example_loss: self.loss,
            restart_index_used: self.used,
        }
    }
}

/// Single-step attack (Step-LL, Step-Rand and their random-start variants).
/// Moves `step_epsilon` once from the start point; presets set
/// `step_epsilon == epsilon`.
pub fn step_attack<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>, config: &AttackConfig) -> Result<AttackOutcome<S>> {
    if config.steps != 1 {
        return Err(Error::InvalidArgument(format!(
            "step_attack needs steps == 1, got {}",
            config.steps
        )));
    }
    let p = prepare(params, batch, config)?;
    let mut sel = RestartSelector::new(config.target_mode == TargetMode::Untargeted);
    for restart in 0..config.restarts {
        let x0 = start_point(&p, config, restart)?;
        let x1 = signed_step(params, &p, &x0, config.step_epsilon, config.epsilon)?;
        sel.offer(params, &p, x1, restart)?;
    }
    Ok(sel.finish(p.targets))
}

/// Iterated sign-gradient attack with projection; with `init = zero` this is
/// the basic iterative method, with `uniform_in_ball` it is PGD.
pub fn pgd_attack<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>, config: &AttackConfig) -> Result<AttackOutcome<S>> {
    let p = prepare(params, batch, config)?;
    let mut sel = RestartSelector::new(config.target_mode == TargetMode::Untargeted);
    for restart in 0..config.restarts {
        let mut x = start_point(&p, config, restart)?;
        for _ in 0..config.steps {
            x = signed_step(params, &p, &x, config.step_epsilon, config.epsilon)?;
        }
        sel.offer(params, &p, x, restart)?;
    }
    Ok(sel.finish(p.targets))
}

/// Dispatches single-step configs to [`step_attack`], the rest to [`pgd_attack`].
pub fn run_attack<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>, config: &AttackConfig) -> Result<AttackOutcome<S>> {
    if config.steps == 1 {
        step_attack(params, batch, config)
    } else {
        pgd_attack(params, batch, config)
    }
}

/// [`run_attack`] with the batch split across up to `workers` threads.
/// Per-example random streams make the result independent of the split.
pub fn run_attack_parallel<S: Scalar>(
    params: &ModelParams<S>,
    batch: &Batch<S>,
    config: &AttackConfig,
    workers: usize,
) -> Result<AttackOutcome<S>> {
    let m = batch.len();
    let workers = workers.clamp(1, m.max(1));
    if workers == 1 {
        return run_attack(params, batch, config);
    }
    let per = m.div_ceil(workers);
    let parts: Vec<Batch<S>> = (0..m).step_by(per).map(|s| batch.slice(s, (s + per).min(m))).collect();
    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|b| scope.spawn(move || run_attack(params, b, config)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("attack worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let images: Vec<&Tensor<S>> = outcomes.iter().map(|o| &o.adversarial).collect();
    let adversarial = Tensor::concat_rows(&images)?;
    let mut out = AttackOutcome {
        adversarial,
        chosen_targets: Vec::with_capacity(m),
        per_example_loss: Vec::with_capacity(m),
        restart_index_used: Vec::with_capacity(m),
    };
    for o in outcomes {
        out.chosen_targets.extend(o.chosen_targets);
        out.per_example_loss.extend(o.per_example_loss);
        out.restart_index_used.extend(o.restart_index_used);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub name: String,
    pub accuracy: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub per_attack: Vec<AttackAccuracy>,
    pub worst_case_accuracy: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteOptions {
    pub batch_size: usize,
    /// Upper bound on worker threads; 1 runs inline.
    pub workers: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            batch_size: 100,
            workers: 1,
        }
    }
}

/// Per-example correctness under each attack, for indices `range`.
fn suite_chunk<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset,
    suite: &[NamedAttack],
    range: std::ops::Range<usize>,
    batch_size: usize,
) -> Result<Vec<Vec<bool>>> {
    let mut correct = vec![Vec::with_capacity(range.len()); suite.len()];
    let idx: Vec<usize> = range.collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Batch<S> = dataset.batch(chunk);
        for (a, attack) in suite.iter().enumerate() {
            let outcome = run_attack(params, &batch, &attack.config).map_err(|e| Error::Attack {
                attack: attack.name.clone(),
                source: Box::new(e),
            })?;
            let pred = params.predict(&outcome.adversarial)?;
            correct[a].extend(pred.iter().zip(&batch.labels).map(|(p, y)| p == y));
        }
    }
    Ok(correct)
}

/// Runs every attack in `suite` on every example. An example counts toward
/// the worst case only if it is classified correctly under all attacks.
pub fn run_suite<S: Scalar>(
    params: &ModelParams<S>,
    dataset: &Dataset,
    suite: &[NamedAttack],
    opts: SuiteOptions,
) -> Result<SuiteResult> {
    if suite.is_empty() {
        return Err(Error::InvalidArgument("attack suite is empty".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let n = dataset.len();
    let bs = opts.batch_size.max(1);
    let batches = n.div_ceil(bs);
    let workers = opts.workers.clamp(1, batches);
    let per_worker = batches.div_ceil(workers) * bs;
    let ranges: Vec<_> = (0..n).step_by(per_worker).map(|s| s..(s + per_worker).min(n)).collect();

    let parts: Vec<Vec<Vec<bool>>> = if ranges.len() == 1 {
        vec![suite_chunk(params, dataset, suite, 0..n, bs)?]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .cloned()
                .map(|r| scope.spawn(move || suite_chunk(params, dataset, suite, r, bs)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("attack worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };

    let mut correct = vec![Vec::with_capacity(n); suite.len()];
    for part in parts {
        for (a, c) in part.into_iter().enumerate() {
            correct[a].extend(c);
        }
    }
    let per_attack = suite
        .iter()
        .zip(&correct)
        .map(|(attack, c)| AttackAccuracy {
            name: attack.name.clone(),
            accuracy: c.iter().filter(|&&b| b).count() as f64 / n as f64,
            config_digest: attack.config.digest(),
        })
        .collect();
    let all = (0..n).filter(|&i| correct.iter().all(|c| c[i])).count();
    Ok(SuiteResult {
        per_attack,
        worst_case_accuracy: all as f64 / n as f64,
        sample_count: n,
    })
}
