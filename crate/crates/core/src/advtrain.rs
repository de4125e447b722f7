//! Adversarial examples (FGSM, PGD), the min-max training loop with an
//! optional TRADES objective, and the linear cutoff schedule.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{augment, batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, BnMode, Model, Network, RecordOptions, EVAL_BETA};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Cutoff factor at the first training epoch.
pub const SCHEDULE_START: f64 = 0.5;
/// Cutoff factor at the end of training and during evaluation.
pub const SCHEDULE_END: f64 = EVAL_BETA;

/// `beta_t = 1/2 + t (1/8 - 1/2) / T`, for `0 <= t <= T`.
pub fn cutoff_schedule(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::contract(format!("schedule step {t} outside [0, {total}]")));
    }
    if t == total {
        return Ok(SCHEDULE_END);
    }
    Ok(SCHEDULE_START + t as f64 * (SCHEDULE_END - SCHEDULE_START) / total as f64)
}

/// L-infinity attack budget in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl AttackConfig {
    /// PGD with `steps` iterations, eps 8/255, step 2/255, random start.
    pub fn pgd(steps: usize) -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::config(format!(
                "attack needs 0 < step_size <= epsilon <= 1, got step {} and epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs at least one step"));
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(10)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pixels(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("attack inputs must lie in [0, 1]"));
    }
    Ok(())
}

fn require_grad(net: &impl Network) -> Result<()> {
    if !net.differentiable() {
        return Err(Error::contract("network does not provide input gradients"));
    }
    Ok(())
}

/// Mean cross-entropy at `x` and its gradient with respect to `x`.
pub fn input_gradient(net: &impl Network, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let logits = net.logits_on_tape(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()?;
    let grad = tape
        .backward(loss)?
        .take(xv)
        .ok_or_else(|| Error::contract("no gradient reached the input"))?;
    Ok((value, grad))
}

/// Gradient of `KL(softmax f(x) || softmax f(x_adv))` with respect to `x_adv`;
/// `f(x)` is held fixed.
fn kl_input_gradient(net: &impl Network, natural_logits: &Tensor, x_adv: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(natural_logits.clone());
    let xv = tape.leaf(x_adv.clone().with_requires_grad(true));
    let q = net.logits_on_tape(&mut tape, xv)?;
    let kl = tape.kl_div(p, q)?;
    tape.backward(kl)?
        .take(xv)
        .ok_or_else(|| Error::contract("no gradient reached the input"))
}

/// Projects `x_adv` onto the eps-ball around `x` intersected with `[0, 1]`.
pub fn project(x_adv: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    x_adv.zip_map(x, |a, o| a.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0))
}

fn signed_step(x_adv: &Tensor, grad: &Tensor, size: f64) -> Result<Tensor> {
    x_adv.zip_map(grad, |a, g| a + size * sign(g))
}

/// Fast gradient sign method with budget `epsilon` in `[0, 1]`.
pub fn fgsm(net: &impl Network, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    require_grad(net)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    check_pixels(x)?;
    let (_, grad) = input_gradient(net, x, labels)?;
    project(&signed_step(x, &grad, epsilon)?, x, epsilon)
}

fn random_start(x: &Tensor, epsilon: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let noise = Tensor::from_fn(x.shape(), |_| rng.random_range(-epsilon..=epsilon));
    project(&x.add(&noise)?, x, epsilon)
}

/// Projected gradient ascent on the cross-entropy.
pub fn pgd(net: &impl Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, rng: &mut impl Rng) -> Result<Tensor> {
    require_grad(net)?;
    cfg.validate()?;
    check_pixels(x)?;
    let mut x_adv = if cfg.random_start {
        random_start(x, cfg.epsilon, rng)?
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let (_, grad) = input_gradient(net, &x_adv, labels)?;
        x_adv = project(&signed_step(&x_adv, &grad, cfg.step_size)?, x, cfg.epsilon)?;
    }
    Ok(x_adv)
}

/// PGD that maximizes the KL divergence from the natural prediction. The
/// start point is a random point in the ball, or `x` plus `0.001 N(0, 1)`
/// noise when random start is off, since the divergence has zero gradient
/// at `x` itself.
pub fn pgd_kl(net: &impl Network, x: &Tensor, cfg: &AttackConfig, rng: &mut impl Rng) -> Result<Tensor> {
    require_grad(net)?;
    cfg.validate()?;
    check_pixels(x)?;
    let natural = net.logits(x)?;
    let mut x_adv = if cfg.random_start {
        random_start(x, cfg.epsilon, rng)?
    } else {
        let normal = Normal::new(0.0, 0.001).expect("valid normal");
        let noisy = Tensor::from_fn(x.shape(), |_| normal.sample(rng));
        project(&x.add(&noisy)?, x, cfg.epsilon)?
    };
    for _ in 0..cfg.steps {
        let grad = kl_input_gradient(net, &natural, &x_adv)?;
        x_adv = project(&signed_step(&x_adv, &grad, cfg.step_size)?, x, cfg.epsilon)?;
    }
    Ok(x_adv)
}

/// `CE(f(x), y) + beta_trades KL(softmax f(x) || softmax f(x_adv))` with a
/// KL-maximizing adversary.
pub fn trades_loss(
    net: &impl Network,
    x: &Tensor,
    labels: &[usize],
    beta_trades: f64,
    attack: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(beta_trades >= 0.0) {
        return Err(Error::config("beta_trades must be non-negative"));
    }
    let x_adv = pgd_kl(net, x, attack, rng)?;
    trades_loss_at(net, x, &x_adv, labels, beta_trades)
}

/// The TRADES objective at a given adversarial input.
pub fn trades_loss_at(net: &impl Network, x: &Tensor, x_adv: &Tensor, labels: &[usize], beta_trades: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(x_adv.clone());
    let nat = net.logits_on_tape(&mut tape, xv)?;
    let adv = net.logits_on_tape(&mut tape, av)?;
    let loss = trades_on_tape(&mut tape, nat, adv, labels, beta_trades)?;
    tape.value(loss).item()
}

fn trades_on_tape(tape: &mut Tape, nat: Var, adv: Var, labels: &[usize], beta_trades: f64) -> Result<Var> {
    let ce = tape.cross_entropy(nat, labels)?;
    if beta_trades == 0.0 {
        return Ok(ce);
    }
    let kl = tape.kl_div(nat, adv)?;
    let kl = tape.affine(kl, beta_trades, 0.0)?;
    tape.add(ce, kl)
}

/// Outer training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Plain cross-entropy on clean inputs.
    Natural,
    /// Cross-entropy on PGD adversaries.
    PgdAt,
    Trades { beta_trades: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate decay points as fractions of `epochs`, strictly increasing.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub objective: Objective,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.7, 0.9],
            lr_decay: 0.1,
            objective: Objective::PgdAt,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be a non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and lr_decay > 0"));
        }
        let mut prev = -1.0;
        for &m in &self.milestones {
            if !(m > prev && (0.0..=1.0).contains(&m)) {
                return Err(Error::config("milestones must be strictly increasing within [0, 1]"));
            }
            prev = m;
        }
        if let Objective::Trades { beta_trades } = self.objective {
            if !(beta_trades >= 0.0) {
                return Err(Error::config("beta_trades must be non-negative"));
            }
        }
        Ok(())
    }

    /// Learning rate of (0-based) epoch `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| t as f64 >= m * self.epochs as f64)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay on every parameter.
/// Momentum buffers are kept at 32-bit precision like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers.iter().zip(&self.buffers).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::config("optimizer state does not match the model"));
        }
        self.buffers = buffers;
        Ok(())
    }

    /// `buf = momentum buf + (g + wd p)`, `p -= lr buf`.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.buffers.len() {
            return Err(Error::contract("one gradient per parameter expected"));
        }
        for ((p, g), buf) in model.params_mut().iter_mut().zip(grads).zip(&mut self.buffers) {
            let pd = p.value.data_mut();
            for ((w, &gv), b) in pd.iter_mut().zip(g.data()).zip(buf.data_mut()) {
                let d = gv + self.weight_decay * *w;
                *b = ((self.momentum * *b + d) as f32) as f64;
                *w -= lr * *b;
            }
            p.value.round_to_f32();
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy on the inputs the model was fitted to: adversaries for
    /// adversarial objectives, clean inputs for the natural one.
    pub train_robust_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_clean_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_robust_acc: Option<f64>,
}

/// Writes records as JSON lines.
pub fn write_epoch_log(records: &[EpochRecord], out: &mut impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Final momentum buffers, in parameter order.
    pub optimizer: Vec<Tensor>,
}

/// Held-out evaluation run after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct EvalSpec<'a> {
    pub data: &'a Dataset,
    pub attack: AttackConfig,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub samples: usize,
    pub clean_acc: f64,
    /// Fraction correct both before and after the attack.
    pub robust_acc: Option<f64>,
}

/// Clean and (optionally) attacked accuracy of `net` on `data`.
pub fn evaluate(
    net: &impl Network,
    data: &Dataset,
    batch_size: usize,
    attack: Option<&AttackConfig>,
    rng: &mut impl Rng,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let (mut clean, mut robust) = (0usize, 0usize);
    for b in batches(data, batch_size, None)? {
        let pred = net.predict(&b.images)?;
        let ok: Vec<bool> = pred.iter().zip(&b.labels).map(|(p, y)| p == y).collect();
        clean += ok.iter().filter(|&&c| c).count();
        if let Some(cfg) = attack {
            let x_adv = pgd(net, &b.images, &b.labels, cfg, rng)?;
            let adv = net.predict(&x_adv)?;
            robust += adv
                .iter()
                .zip(&b.labels)
                .zip(&ok)
                .filter(|((p, y), &c)| c && p == y)
                .count();
        }
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        samples: data.len(),
        clean_acc: clean as f64 / n,
        robust_acc: attack.map(|_| robust as f64 / n),
    })
}

/// Evaluates a copy of `model` with the evaluation cutoff and running
/// batch-norm statistics.
pub fn evaluate_model(model: &Model, data: &Dataset, batch_size: usize, attack: Option<&AttackConfig>, seed: u64) -> Result<EvalResult> {
    let mut m = model.clone();
    if m.scheduled_beta().is_some() {
        m.set_scheduled_beta(EVAL_BETA)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    evaluate(&m.view(BnMode::Eval), data, batch_size, attack, &mut rng)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Contract(msg) if msg.contains("non-finite") => Error::Training { epoch, reason: msg },
        other => other,
    }
}

struct StepResult {
    loss: f64,
    correct: usize,
}

fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    objective: Objective,
    attack: &AttackConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let x_fit = match objective {
        Objective::Natural => x.clone(),
        Objective::PgdAt => pgd(&model.view(BnMode::Train), x, labels, attack, rng)?,
        Objective::Trades { .. } => pgd_kl(&model.view(BnMode::Train), x, attack, rng)?,
    };
    let opts = RecordOptions {
        bn: BnMode::Train,
        param_grads: true,
    };
    let mut tape = Tape::new();
    let mut records = Vec::new();
    let loss = match objective {
        Objective::Natural | Objective::PgdAt => {
            let xv = tape.constant(x_fit.clone());
            let rec = model.record(&mut tape, xv, opts)?;
            let loss = tape.cross_entropy(rec.logits, labels)?;
            records.push(rec);
            loss
        }
        Objective::Trades { beta_trades } => {
            let xv = tape.constant(x.clone());
            let nat = model.record(&mut tape, xv, opts)?;
            let av = tape.constant(x_fit.clone());
            let adv = model.record(&mut tape, av, opts)?;
            let loss = trades_on_tape(&mut tape, nat.logits, adv.logits, labels, beta_trades)?;
            records.push(nat);
            records.push(adv);
            loss
        }
    };
    let fit_logits = tape.value(records.last().expect("one record").logits).clone();
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let mut total: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for rec in &records {
        for (acc, &v) in total.iter_mut().zip(&rec.params) {
            if let Some(g) = grads.take(v) {
                *acc = acc.add(&g)?;
            }
        }
    }
    for rec in &records {
        model.update_running_stats(&rec.batch_stats)?;
    }
    opt.step(model, &total, lr)?;
    if model.params().iter().any(|p| !p.value.is_finite()) {
        return Err(Error::contract("parameter update produced a non-finite value"));
    }
    let correct = argmax_rows(&fit_logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(StepResult { loss: value, correct })
}

/// RNG stream ids derived from the training seed.
const SHUFFLE_STREAM: u64 = 10;
const ATTACK_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;
const EVAL_STREAM: u64 = 13;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Trains `model` in place. Every epoch `t` sets the scheduled cutoffs to
/// `cutoff_schedule(t, T)` before any adversary is generated; after the
/// last epoch they are set to the evaluation value.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    tc: &TrainConfig,
    attack: &AttackConfig,
    eval: Option<EvalSpec<'_>>,
) -> Result<TrainReport> {
    train_with(model, data, tc, attack, eval, |_| Ok(()))
}

/// [`train`] with a callback after every epoch, used for streaming logs.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    tc: &TrainConfig,
    attack: &AttackConfig,
    eval: Option<EvalSpec<'_>>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    tc.validate()?;
    if !matches!(tc.objective, Objective::Natural) {
        attack.validate()?;
    }
    if data.is_empty() {
        return Err(Error::contract("training on an empty dataset"));
    }
    let mut opt = Sgd::new(model, tc.momentum, tc.weight_decay);
    let mut shuffle_rng = stream(tc.seed, SHUFFLE_STREAM);
    let mut attack_rng = stream(tc.seed, ATTACK_STREAM);
    let mut augment_rng = stream(tc.seed, AUGMENT_STREAM);
    let scheduled = model.scheduled_beta().is_some();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(tc.epochs),
        step_losses: Vec::new(),
        optimizer: Vec::new(),
    };
    for t in 0..tc.epochs {
        let beta = cutoff_schedule(t, tc.epochs)?;
        if scheduled {
            model.set_scheduled_beta(beta)?;
        }
        let lr = tc.lr_at(t);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for b in batches(data, tc.batch_size, Some(shuffle_rng.random()))? {
            let x = if tc.augment {
                augment(&b.images, &mut augment_rng)?
            } else {
                b.images
            };
            let step = train_step(model, &mut opt, &x, &b.labels, tc.objective, attack, lr, &mut attack_rng)
                .map_err(|e| diverged(t, e))?;
            if !step.loss.is_finite() {
                return Err(Error::Training {
                    epoch: t,
                    reason: format!("loss is {}", step.loss),
                });
            }
            report.step_losses.push(step.loss);
            loss_sum += step.loss * b.labels.len() as f64;
            correct += step.correct;
        }
        let mut rec = EpochRecord {
            epoch: t,
            beta,
            lr,
            train_loss: loss_sum / data.len() as f64,
            train_robust_acc: correct as f64 / data.len() as f64,
            eval_clean_acc: None,
            eval_robust_acc: None,
        };
        if let Some(ev) = &eval {
            let r = evaluate_model(model, ev.data, ev.batch_size, Some(&ev.attack), stream(tc.seed, EVAL_STREAM).random())?;
            rec.eval_clean_acc = Some(r.clean_acc);
            rec.eval_robust_acc = r.robust_acc;
        }
        on_epoch(&rec)?;
        report.epochs.push(rec);
    }
    if scheduled {
        model.set_scheduled_beta(SCHEDULE_END)?;
    }
    report.optimizer = opt.buffers().to_vec();
    Ok(report)
}
