//! Training objectives and the training loop.
//!
//! The per-step objective is
//!
//! ```text
//! total = J(clean) + w_adv * [mixed_pgd] * J(adv) + lambda * pairing + s * mean ||z||^2
//! ```
//!
//! where `J` is softmax cross-entropy against the (possibly smoothed or mixed)
//! targets and adversarial examples are regenerated against the current
//! parameters at every step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_parallel, AttackConfig};
use crate::autodiff::{Graph, Var};
use crate::data::{add_gaussian_noise, Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{init_model, ModelParams, ModelSpec};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseObjective {
    CleanOnly,
    MixedPgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    None,
    Alp,
    Clp,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub base: BaseObjective,
    /// Attack used to generate training adversarial examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_attack: Option<AttackConfig>,
    #[serde(default = "pairing_none")]
    pub pairing: Pairing,
    #[serde(default)]
    pub pairing_weight: f64,
    #[serde(default)]
    pub squeeze_weight: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Beta(alpha, alpha) mixing; 0 disables mixup.
    #[serde(default)]
    pub mixup_alpha: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Weight of the adversarial cross-entropy relative to the clean one.
    #[serde(default = "one")]
    pub adversarial_weight: f64,
}

fn pairing_none() -> Pairing {
    Pairing::None
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl DefenseSpec {
    /// Plain cross-entropy training.
    pub fn clean() -> Self {
        Self {
            base: BaseObjective::CleanOnly,
            inner_attack: None,
            pairing: Pairing::None,
            pairing_weight: 0.0,
            squeeze_weight: 0.0,
            label_smoothing: 0.0,
            mixup_alpha: 0.0,
            noise_sigma: 0.0,
            adversarial_weight: 1.0,
        }
    }

    /// Mixed clean + adversarial minibatch training.
    pub fn mixed_pgd(attack: AttackConfig) -> Self {
        Self {
            base: BaseObjective::MixedPgd,
            inner_attack: Some(attack),
            ..Self::clean()
        }
    }

    /// Mixed minibatch training plus adversarial logit pairing.
    pub fn alp(attack: AttackConfig, weight: f64) -> Self {
        Self {
            pairing: Pairing::Alp,
            pairing_weight: weight,
            ..Self::mixed_pgd(attack)
        }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::InvalidArgument(format!("{field}: {msg}")));
        for (field, v) in [
            ("pairing_weight", self.pairing_weight),
            ("squeeze_weight", self.squeeze_weight),
            ("mixup_alpha", self.mixup_alpha),
            ("noise_sigma", self.noise_sigma),
            ("adversarial_weight", self.adversarial_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, format!("must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", format!("must be in [0, 1), got {}", self.label_smoothing));
        }
        let needs_attack = self.base == BaseObjective::MixedPgd || self.pairing == Pairing::Alp;
        match (&self.inner_attack, needs_attack) {
            (None, true) => return bad("inner_attack", "required for mixed_pgd and alp".into()),
            (Some(a), _) => a.validate().map_err(|e| Error::InvalidArgument(format!("inner_attack: {e}")))?,
            _ => {}
        }
        if self.pairing == Pairing::Clp {
            if !batch_size.is_multiple_of(2) || batch_size < 2 {
                return bad("pairing", format!("clp needs an even batch size, got {batch_size}"));
            }
            if self.mixup_alpha > 0.0 {
                return bad("mixup_alpha", "mixup cannot be combined with clp".into());
            }
        }
        Ok(())
    }
}

/// One-hot targets with `1 - delta` on the true class and `delta / (K - 1)`
/// on each other class.
pub fn smooth_labels<S: Scalar>(one_hot: &Tensor<S>, delta: f64) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("label smoothing {delta} outside [0, 1)")));
    }
    if delta == 0.0 {
        return Ok(one_hot.clone());
    }
    let k = one_hot.shape()[1];
    let on = S::from_f64(1.0 - delta);
    let off = S::from_f64(delta / (k - 1) as f64);
    Ok(one_hot.map(|v| if v > S::zero() { on } else { off }))
}

/// Per-example Beta(alpha, alpha) mixing coefficients.
pub fn mixup_lambdas(n: usize, alpha: f64, seed: u64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng::stream(seed, &[rng::DOMAIN_MIXUP]);
    Ok((0..n).map(|_| beta.sample(&mut r)).collect())
}

/// `lambda_i * a_i + (1 - lambda_i) * b_i` for inputs and targets alike.
pub fn mix_with<S: Scalar>(
    batch_a: &Tensor<S>,
    targets_a: &Tensor<S>,
    batch_b: &Tensor<S>,
    targets_b: &Tensor<S>,
    lambdas: &[f64],
) -> Result<(Tensor<S>, Tensor<S>)> {
    if batch_a.shape() != batch_b.shape() || targets_a.shape() != targets_b.shape() {
        return Err(Error::shape("mixup", "batch or target shapes differ"));
    }
    if lambdas.len() != batch_a.rows() || targets_a.rows() != batch_a.rows() {
        return Err(Error::shape("mixup", "lambda count must equal the batch size"));
    }
    let mix = |a: &Tensor<S>, b: &Tensor<S>| {
        let w = a.row_len();
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .enumerate()
            .map(|(i, (&x, &y))| {
                let l = lambdas[i / w];
                if l == 1.0 {
                    x
                } else {
                    S::from_f64(l * x.as_f64() + (1.0 - l) * y.as_f64())
                }
            })
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok((mix(batch_a, batch_b)?, mix(targets_a, targets_b)?))
}

pub fn mixup_batch<S: Scalar>(
    batch_a: &Tensor<S>,
    targets_a: &Tensor<S>,
    batch_b: &Tensor<S>,
    targets_b: &Tensor<S>,
    alpha: f64,
    seed: u64,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let lambdas = mixup_lambdas(batch_a.rows(), alpha, seed)?;
    mix_with(batch_a, targets_a, batch_b, targets_b, &lambdas)
}

/// Adversarial logit pairing term: mean squared L2 distance between the
/// logits of each clean example and its adversarial counterpart. Gradients
/// flow through both branches.
pub fn pairing_term_alp<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    param_vars: &[Var],
    clean: Var,
    adversarial: Var,
) -> Result<Var> {
    if g.shape(clean) != g.shape(adversarial) {
        return Err(Error::shape(
            "pairing_term_alp",
            format!("clean {:?} vs adversarial {:?}", g.shape(clean), g.shape(adversarial)),
        ));
    }
    let zc = params.forward_with(g, param_vars, clean)?;
    let za = params.forward_with(g, param_vars, adversarial)?;
    g.pair_l2(zc, za)
}

/// Clean logit pairing term: the first half of the batch is paired with the
/// second half, `(2/m) * sum_i ||f(x_i) - f(x_{i + m/2})||^2`. Returns the
/// term and the logits of both halves.
pub fn pairing_term_clp<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    param_vars: &[Var],
    batch: &Tensor<S>,
) -> Result<(Var, Var, Var)> {
    let m = batch.rows();
    if !m.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("clean logit pairing needs an even batch, got {m}")));
    }
    let h = m / 2;
    let first = g.leaf(batch.slice_rows(0, h));
    let second = g.leaf(batch.slice_rows(h, m));
    let z1 = params.forward_with(g, param_vars, first)?;
    let z2 = params.forward_with(g, param_vars, second)?;
    Ok((g.pair_l2(z1, z2)?, z1, z2))
}

/// Per-term contributions to one step's objective, each already multiplied
/// by its weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clean_xent: f64,
    pub adversarial_xent: f64,
    pub pairing: f64,
    pub squeeze: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("clean_xent", self.clean_xent),
            ("adversarial_xent", self.adversarial_xent),
            ("pairing", self.pairing),
            ("squeeze", self.squeeze),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Rmsprop {
        lr: f64,
        decay: f64,
        momentum: f64,
        #[serde(default = "rms_eps")]
        epsilon: f64,
    },
}

fn rms_eps() -> f64 {
    1e-10
}

impl Optimizer {
    fn lr(&self) -> f64 {
        match *self {
            Optimizer::SgdMomentum { lr, .. } | Optimizer::Rmsprop { lr, .. } => lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// `lr * rate^(floor(step / interval))`.
    Exponential { rate: f64, interval: u64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Exponential { rate, interval } => rate.powi((step / interval.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    #[serde(default = "constant_schedule")]
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Examples used for the per-epoch clean accuracy in the log.
    #[serde(default = "default_monitor")]
    pub monitor_samples: usize,
    /// Worker threads for inner-attack generation.
    #[serde(default = "one_usize")]
    pub workers: usize,
}

fn constant_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_monitor() -> usize {
    1000
}

fn one_usize() -> usize {
    1
}

impl TrainConfig {
    /// SGD with momentum 0.9, lr 0.01, constant schedule.
    pub fn sgd(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer: Optimizer::SgdMomentum { lr: 0.01, momentum: 0.9 },
            lr_schedule: LrSchedule::Constant,
            seed,
            monitor_samples: default_monitor(),
            workers: 1,
        }
    }

    pub fn validate(&self, defense: &DefenseSpec) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        defense.validate(self.batch_size)
    }
}

enum OptState<S> {
    Sgd { velocity: Vec<Vec<S>> },
    Rms { mean_square: Vec<Vec<S>>, moment: Vec<Vec<S>> },
}

/// Owns the evolving parameters and optimizer state of one training run.
pub struct Trainer<S> {
    params: ModelParams<S>,
    state: OptState<S>,
    config: TrainConfig,
    defense: DefenseSpec,
    step: u64,
}

fn with_term<T>(term: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { op, context } => Error::NonFinite {
            op,
            context: format!("{context} (loss term {term})"),
        },
        other => other,
    })
}

impl<S: Scalar> Trainer<S> {
    pub fn new(params: ModelParams<S>, config: TrainConfig, defense: DefenseSpec) -> Result<Self> {
        config.validate(&defense)?;
        let zeros = || params.entries().iter().map(|(_, t)| vec![S::zero(); t.len()]).collect();
        let state = match config.optimizer {
            Optimizer::SgdMomentum { .. } => OptState::Sgd { velocity: zeros() },
            Optimizer::Rmsprop { .. } => OptState::Rms {
                mean_square: zeros(),
                moment: zeros(),
            },
        };
        Ok(Self {
            params,
            state,
            config,
            defense,
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<S> {
        self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Builds the step objective, backpropagates and applies one update.
    pub fn train_step(&mut self, batch: &Batch<S>) -> Result<LossBreakdown> {
        let d = &self.defense;
        let m = batch.len();
        if m == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if d.pairing == Pairing::Clp && !m.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("clean logit pairing needs an even batch, got {m}")));
        }
        let step_seed = rng::derive_seed(self.config.seed, &[rng::DOMAIN_TRAIN_ATTACK, self.step]);

        let mut x = add_gaussian_noise(&batch.images, d.noise_sigma, rng::derive_seed(step_seed, &[rng::DOMAIN_NOISE]))?;
        let mut targets = smooth_labels(&batch.targets, d.label_smoothing)?;
        let mut labels = batch.labels.clone();
        if d.mixup_alpha > 0.0 {
            let mut partner: Vec<usize> = (0..m).collect();
            partner.shuffle(&mut rng::stream(step_seed, &[rng::DOMAIN_SHUFFLE]));
            let (mx, mt) = mixup_batch(
                &x,
                &targets,
                &x.select_rows(&partner),
                &targets.select_rows(&partner),
                d.mixup_alpha,
                step_seed,
            )?;
            x = mx;
            targets = mt;
            labels = targets.argmax_rows();
        }

        let needs_adv = d.base == BaseObjective::MixedPgd || (d.pairing == Pairing::Alp && d.pairing_weight > 0.0);
        let adversarial = if needs_adv {
            let mut cfg = d.inner_attack.clone().expect("validated");
            cfg.rng_seed = rng::derive_seed(step_seed, &[rng::DOMAIN_ATTACK_INIT, cfg.rng_seed]);
            let attack_batch = Batch {
                images: x.clone(),
                targets: Tensor::one_hot(&labels, self.params.class_count()),
                labels: labels.clone(),
                ids: batch.ids.clone(),
            };
            Some(run_attack_parallel(&self.params, &attack_batch, &cfg, self.config.workers)?.adversarial)
        } else {
            None
        };

        let params = &self.params;
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let one = S::one();
        let mut parts: Vec<(Var, S)> = Vec::new();
        let (clean_term, squeeze_term, pair_term);
        let mut adv_term = None;

        if d.pairing == Pairing::Clp {
            let h = m / 2;
            let (pair, z1, z2) = with_term("pairing", pairing_term_clp(&mut g, params, &pv, &x))?;
            let j1 = g.softmax_xent(z1, &targets.slice_rows(0, h))?;
            let j2 = g.softmax_xent(z2, &targets.slice_rows(h, m))?;
            clean_term = with_term("clean_xent", g.scale_add(j1, S::from_f64(0.5), j2, S::from_f64(0.5)))?;
            pair_term = (d.pairing_weight > 0.0).then_some(pair);
            squeeze_term = if d.squeeze_weight > 0.0 {
                let n1 = g.logit_norm(z1)?;
                let n2 = g.logit_norm(z2)?;
                Some(with_term("squeeze", g.scale_add(n1, S::from_f64(0.5), n2, S::from_f64(0.5)))?)
            } else {
                None
            };
        } else {
            let xv = g.leaf(x.clone());
            let zc = with_term("clean_xent", params.forward_with(&mut g, &pv, xv))?;
            clean_term = with_term("clean_xent", g.softmax_xent(zc, &targets))?;
            squeeze_term = if d.squeeze_weight > 0.0 {
                Some(with_term("squeeze", g.logit_norm(zc))?)
            } else {
                None
            };
            let mut za = None;
            if let Some(adv) = &adversarial {
                let av = g.leaf(adv.clone());
                let z = with_term("adversarial_xent", params.forward_with(&mut g, &pv, av))?;
                if d.base == BaseObjective::MixedPgd {
                    adv_term = Some(with_term("adversarial_xent", g.softmax_xent(z, &targets))?);
                }
                za = Some(z);
            }
            pair_term = match (d.pairing, za) {
                (Pairing::Alp, Some(za)) if d.pairing_weight > 0.0 => Some(with_term("pairing", g.pair_l2(zc, za))?),
                _ => None,
            };
        }

        parts.push((clean_term, one));
        if let Some(t) = adv_term {
            parts.push((t, S::from_f64(d.adversarial_weight)));
        }
        if let Some(t) = pair_term {
            parts.push((t, S::from_f64(d.pairing_weight)));
        }
        if let Some(t) = squeeze_term {
            parts.push((t, S::from_f64(d.squeeze_weight)));
        }
        let mut total = g.scale(parts[0].0, parts[0].1)?;
        for &(t, w) in &parts[1..] {
            total = with_term("total", g.scale_add(total, one, t, w))?;
        }

        let weighted = |t: Option<Var>, w: f64| t.map_or(0.0, |v| w * g.value(v).data()[0].as_f64());
        let breakdown = LossBreakdown {
            clean_xent: weighted(Some(clean_term), 1.0),
            adversarial_xent: weighted(adv_term, d.adversarial_weight),
            pairing: weighted(pair_term, d.pairing_weight),
            squeeze: weighted(squeeze_term, d.squeeze_weight),
            total: g.value(total).data()[0].as_f64(),
        };
        for (name, v) in breakdown.terms() {
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss term {name} is negative: {v}")));
            }
        }

        let grads = with_term("total", g.backward(total, &pv))?;
        drop(g);
        self.apply_update(grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    fn apply_update(&mut self, grads: Vec<Tensor<S>>) -> Result<()> {
        let lr = S::from_f64(self.config.optimizer.lr() * self.config.lr_schedule.factor(self.step));
        let mut updated = Vec::with_capacity(grads.len());
        for (i, ((_, p), grad)) in self.params.entries().iter().zip(grads).enumerate() {
            let mut p = (**p).clone();
            match (&mut self.state, self.config.optimizer) {
                (OptState::Sgd { velocity }, Optimizer::SgdMomentum { momentum, .. }) => {
                    let mu = S::from_f64(momentum);
                    for ((w, v), &gr) in p.data_mut().iter_mut().zip(velocity[i].iter_mut()).zip(grad.data()) {
                        *v = mu * *v + gr;
                        *w = *w - lr * *v;
                    }
                }
                (
                    OptState::Rms { mean_square, moment },
                    Optimizer::Rmsprop {
                        decay,
                        momentum,
                        epsilon,
                        ..
                    },
                ) => {
                    let (rho, mu, eps) = (S::from_f64(decay), S::from_f64(momentum), S::from_f64(epsilon));
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(mean_square[i].iter_mut())
                        .zip(moment[i].iter_mut())
                        .zip(grad.data());
                    for (((w, ms), mom), &gr) in iter {
                        *ms = rho * *ms + (S::one() - rho) * gr * gr;
                        *mom = mu * *mom + lr * gr / (*ms + eps).sqrt();
                        *w = *w - *mom;
                    }
                }
                _ => unreachable!("optimizer state matches optimizer kind"),
            }
            p.check_finite("optimizer update")?;
            updated.push(p);
        }
        self.params = self.params.with_tensors(updated)?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    /// Batch means of each weighted term.
    pub loss: LossBreakdown,
    pub clean_accuracy: f64,
    /// Progress display only; kept out of the log so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
            .collect()
    }
}

/// Trains a fresh model. `monitor` (defaults to a seeded subset of the
/// training data) supplies the per-epoch clean accuracy; `on_epoch` sees
/// each record as it is produced.
pub fn train<S: Scalar>(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    defense: &DefenseSpec,
    monitor: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams<S>, TrainingLog)> {
    if spec.input_shape != dataset.image_shape() || spec.class_count != dataset.class_count() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {:?} with {} classes, dataset has {:?} with {}",
            spec.input_shape,
            spec.class_count,
            dataset.image_shape(),
            dataset.class_count()
        )));
    }
    let params = init_model::<S>(spec)?;
    let mut trainer = Trainer::new(params, config.clone(), defense.clone())?;
    let own_monitor;
    let monitor = match monitor {
        Some(m) => m,
        None => {
            own_monitor = dataset.subset(&dataset.sample_indices(config.monitor_samples, config.seed));
            &own_monitor
        }
    };
    let mut sampler = BatchSampler::new(dataset, config.batch_size, config.seed)?;
    let mut log = TrainingLog::default();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let mut sum = LossBreakdown::default();
        let n = sampler.batches_per_epoch();
        for _ in 0..n {
            let mut idx = sampler.next_indices();
            if defense.pairing == Pairing::Clp && idx.len() % 2 == 1 {
                // pairs need an even count; the odd example out waits for the next epoch
                idx.pop();
                if idx.is_empty() {
                    continue;
                }
            }
            let b = trainer.train_step(&dataset.batch::<S>(&idx))?;
            sum.clean_xent += b.clean_xent;
            sum.adversarial_xent += b.adversarial_xent;
            sum.pairing += b.pairing;
            sum.squeeze += b.squeeze;
            sum.total += b.total;
        }
        let k = n as f64;
        let record = EpochRecord {
            epoch,
            steps: trainer.steps_taken(),
            loss: LossBreakdown {
                clean_xent: sum.clean_xent / k,
                adversarial_xent: sum.adversarial_xent / k,
                pairing: sum.pairing / k,
                squeeze: sum.squeeze / k,
                total: sum.total / k,
            },
            clean_accuracy: accuracy(trainer.params(), monitor, 500)?,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((trainer.into_params(), log))
}
