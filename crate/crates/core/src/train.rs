//! Training: segmentation loss, AdamW with warmup/cosine learning rate,
//! and the five denoising training strategies.
//!
//! Every strategy builds its whole computation for one step on a single
//! tape. Two-pass strategies (self-conditioning and recycling) run the
//! first pass on the same tape and cut it off with a stop-gradient, so
//! the claim "no gradient flows through the first pass" is checked
//! directly on the tape rather than assumed.

use crate::diffusion;
use crate::error::{Error, Result};
use crate::model::{Parameters, UNet};
use crate::schedule::{ImportanceState, NoiseSchedule};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Plain denoising training: predict `x_0` from `x_t`.
    Standard,
    /// Self-conditioning with both passes at the same timestep.
    SelfCondSameT,
    /// Self-conditioning where the estimate comes from `t + 1` and the
    /// second-pass input is drawn from the one-step posterior.
    SelfCondNextT,
    /// Recycling: noise the first-pass prediction from `t + 1` instead
    /// of the ground truth.
    RecycleNextT,
    /// Recycling with the first pass always at the final timestep.
    RecycleMaxT,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Standard,
        Strategy::SelfCondSameT,
        Strategy::SelfCondNextT,
        Strategy::RecycleNextT,
        Strategy::RecycleMaxT,
    ];

    /// Whether the network needs the extra self-conditioning input.
    pub fn wants_self_cond_input(self) -> bool {
        matches!(self, Strategy::SelfCondSameT | Strategy::SelfCondNextT)
    }

    /// Strategies whose first pass sits at `t + 1` can only train on
    /// `t < T`.
    pub fn max_train_t(self, t_max: usize) -> usize {
        match self {
            Strategy::SelfCondNextT | Strategy::RecycleNextT => t_max - 1,
            _ => t_max,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::SelfCondSameT => "self-cond-same-t",
            Strategy::SelfCondNextT => "self-cond-next-t",
            Strategy::RecycleNextT => "recycle-next-t",
            Strategy::RecycleMaxT => "recycle-max-t",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Linear warmup to the peak, cosine decay to the end value, then flat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 1e-5,
            peak: 8e-4,
            end: 5e-5,
            warmup_steps: 100,
            decay_steps: 10_000,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            self.start + f * (self.peak - self.start)
        } else if step < self.warmup_steps + self.decay_steps {
            let f = (step - self.warmup_steps) as f64 / self.decay_steps as f64;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
            self.end + cos * (self.peak - self.end)
        } else {
            self.end
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    /// Probability of using the model estimate (rather than zeros) as
    /// the self-conditioning input during training.
    pub self_cond_prob: f64,
    pub importance_sampling: bool,
    pub checkpoint_every: usize,
    /// Validate (and maybe update the best checkpoint) every this many
    /// steps; 0 disables validation.
    pub eval_every: usize,
    /// Reverse-process steps used for validation sampling.
    pub val_sample_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Standard,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            lr: LrSchedule::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-8,
            ce_weight: 20.0,
            dice_weight: 1.0,
            dice_smooth: 1e-6,
            self_cond_prob: 0.5,
            importance_sampling: false,
            checkpoint_every: 500,
            eval_every: 0,
            val_sample_steps: 5,
        }
    }
}

/// Weighted cross-entropy plus soft Dice over the foreground classes.
/// `target_probs` is the one-hot class map in [0, 1].
pub fn seg_loss<E: Elem>(
    tape: &Tape<E>,
    logits: Var,
    target_probs: Var,
    config: &TrainConfig,
) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 4 || shape != tape.shape(target_probs) {
        return Err(Error::shape(format!(
            "loss expects matching [n, c, h, w] logits and targets, got {:?} vs {:?}",
            shape,
            tape.shape(target_probs)
        )));
    }
    let (n, classes, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pixels = (n * h * w) as f64;

    let log_p = tape.log_softmax(logits, 1)?;
    let ce = tape.mul(target_probs, log_p)?;
    let ce = tape.scale(tape.sum_all(ce), -1.0 / pixels);

    let probs = tape.softmax(logits, 1)?;
    let s = config.dice_smooth;
    let mut dice_sum = None;
    for c in 1..classes {
        let mut mask = Tensor::<E>::zeros(&[classes, 1, 1]);
        mask.data_mut()[c] = E::one();
        let mask = tape.leaf(mask);
        let pc = tape.mul(probs, mask)?;
        let yc = tape.mul(target_probs, mask)?;
        let inter = tape.sum_all(tape.mul(pc, yc)?);
        let denom = tape.add(tape.sum_all(pc), tape.sum_all(yc))?;
        let num = tape.add_scalar(tape.scale(inter, 2.0), s);
        let dice = tape.div(num, tape.add_scalar(denom, s))?;
        dice_sum = Some(match dice_sum {
            None => dice,
            Some(acc) => tape.add(acc, dice)?,
        });
    }
    let mean_dice = tape.scale(
        dice_sum.ok_or_else(|| Error::shape("loss needs at least two classes"))?,
        1.0 / (classes - 1) as f64,
    );
    let dice_loss = tape.add_scalar(tape.scale(mean_dice, -1.0), 1.0);

    tape.add(
        tape.scale(ce, config.ce_weight),
        tape.scale(dice_loss, config.dice_weight),
    )
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<E: Elem> {
    m: HashMap<String, Tensor<E>>,
    v: HashMap<String, Tensor<E>>,
    step: usize,
}

impl<E: Elem> AdamW<E> {
    pub fn new() -> Self {
        Self {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut Parameters<E>,
        grads: &HashMap<String, Tensor<E>>,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = params.names().to_vec();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64();
                let mi = b1 * m.data()[i].to_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].to_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = E::from_f64(mi);
                v.data_mut()[i] = E::from_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + config.adam_eps);
                let pi = p.data()[i].to_f64();
                p.data_mut()[i] = E::from_f64(pi - lr * (update + config.weight_decay * pi));
            }
        }
        Ok(())
    }
}

impl<E: Elem> Default for AdamW<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One mini-batch: conditioning images [n, ic, h, w] and ground-truth
/// mask signals `x_0` in {-1, +1}, [n, classes, h, w].
#[derive(Debug, Clone)]
pub struct Batch<E: Elem> {
    pub images: Tensor<E>,
    pub x0: Tensor<E>,
}

/// Tape nodes exposed for inspection in tests.
#[derive(Debug, Default, Clone)]
pub struct StepDebug {
    /// Noise leaf that feeds only the first pass of a two-pass strategy.
    /// Its gradient must be absent after backward.
    pub pass1_noise: Option<Var>,
    /// First-pass `x_0` estimate (after stop-gradient).
    pub pass1_x0hat: Option<Var>,
    /// First-pass noisy input `x_t` (or `x_{t+1}`).
    pub pass1_xin: Option<Var>,
    /// Timesteps used for the loss-bearing pass.
    pub ts: Vec<usize>,
    /// Whether the self-conditioning coin enabled the two-pass branch.
    pub used_two_pass: bool,
}

/// Test hooks for `train_step`.
#[derive(Debug, Clone)]
pub struct StepHooks<E: Elem> {
    /// Replace the first-pass `x_0` estimate with a fixed signal.
    pub force_pass1_x0hat: Option<Tensor<E>>,
    /// Force the self-conditioning / two-pass coin.
    pub force_two_pass: Option<bool>,
    /// Force the sampled timesteps (length must equal the batch size).
    pub force_ts: Option<Vec<usize>>,
}

impl<E: Elem> Default for StepHooks<E> {
    fn default() -> Self {
        Self {
            force_pass1_x0hat: None,
            force_two_pass: None,
            force_ts: None,
        }
    }
}

pub struct StepResult<E: Elem> {
    pub loss: f64,
    pub grads: HashMap<String, Tensor<E>>,
    pub debug: StepDebug,
}

/// Build `x_t` on the tape: `sqrt(bar_alpha_t) x0 + sqrt(1 - bar_alpha_t) eps`
/// with per-sample coefficients.
fn tape_q_sample<E: Elem>(
    tape: &Tape<E>,
    schedule: &NoiseSchedule,
    x0: Var,
    ts: &[usize],
    eps: Var,
) -> Result<Var> {
    let mut a = Vec::with_capacity(ts.len());
    let mut b = Vec::with_capacity(ts.len());
    for &t in ts {
        schedule.check_step(t)?;
        a.push(E::from_f64(schedule.sqrt_bar_alpha(t)));
        b.push(E::from_f64(schedule.sqrt_one_minus_bar_alpha(t)));
    }
    let a = tape.leaf(Tensor::new(vec![ts.len(), 1, 1, 1], a)?);
    let b = tape.leaf(Tensor::new(vec![ts.len(), 1, 1, 1], b)?);
    tape.add(tape.mul(a, x0)?, tape.mul(b, eps)?)
}

fn noise_leaf<E: Elem>(tape: &Tape<E>, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    tape.leaf(Tensor::randn(shape, rng))
}

/// Softmax probabilities mapped to the signed one-hot signal range.
fn tape_probs_to_signal<E: Elem>(tape: &Tape<E>, logits: Var) -> Result<Var> {
    let probs = tape.softmax(logits, 1)?;
    Ok(tape.add_scalar(tape.scale(probs, 2.0), -1.0))
}

/// Run one training step's forward+backward for `batch` and return the
/// loss, parameter gradients, and debug handles. Does not update
/// parameters.
pub fn train_step<E: Elem>(
    net: &UNet<E>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    batch: &Batch<E>,
    ts: &[usize],
    rng: &mut ChaCha8Rng,
    hooks: &StepHooks<E>,
) -> Result<StepResult<E>> {
    let n = batch.images.shape()[0];
    let ts: Vec<usize> = match &hooks.force_ts {
        Some(f) => f.clone(),
        None => ts.to_vec(),
    };
    if ts.len() != n {
        return Err(Error::shape(format!(
            "got {} timesteps for batch of {n}",
            ts.len()
        )));
    }
    let t_cap = config.strategy.max_train_t(schedule.len());
    for &t in &ts {
        if t < 1 || t > t_cap {
            return Err(Error::TimestepRange { t, max: t_cap });
        }
    }

    let tape = Tape::new();
    let vars = net.bind(&tape);
    let image = tape.leaf(batch.images.clone());
    let x0 = tape.leaf(batch.x0.clone());
    let x0_shape = batch.x0.shape().to_vec();

    let mut debug = StepDebug {
        ts: ts.clone(),
        ..StepDebug::default()
    };

    // First-pass x0 estimate for two-pass strategies: run the network at
    // the first-pass timestep and cut the graph with stop_gradient.
    let pass1_estimate = |pass1_ts: &[usize],
                          sc_zero: Option<Var>,
                          rng: &mut ChaCha8Rng,
                          debug: &mut StepDebug|
     -> Result<Var> {
        let eps1 = noise_leaf(&tape, &x0_shape, rng);
        debug.pass1_noise = Some(eps1);
        let x_in = tape_q_sample(&tape, schedule, x0, pass1_ts, eps1)?;
        debug.pass1_xin = Some(x_in);
        let input = net.assemble_input(&tape, image, x_in, sc_zero)?;
        let logits1 = net.forward(&tape, &vars, input, pass1_ts)?;
        let est = match &hooks.force_pass1_x0hat {
            Some(forced) => tape.leaf(forced.clone()),
            None => tape_probs_to_signal(&tape, logits1)?,
        };
        let est = tape.stop_gradient(est);
        debug.pass1_x0hat = Some(est);
        Ok(est)
    };

    let logits = match config.strategy {
        Strategy::Standard => {
            let eps = noise_leaf(&tape, &x0_shape, rng);
            let x_t = tape_q_sample(&tape, schedule, x0, &ts, eps)?;
            let input = net.assemble_input(&tape, image, x_t, None)?;
            net.forward(&tape, &vars, input, &ts)?
        }
        Strategy::SelfCondSameT => {
            let two_pass = hooks
                .force_two_pass
                .unwrap_or_else(|| rng.gen_range(0.0..1.0) < config.self_cond_prob);
            debug.used_two_pass = two_pass;
            let zeros = tape.leaf(Tensor::zeros(&x0_shape));
            let sc = if two_pass {
                pass1_estimate(&ts, Some(zeros), rng, &mut debug)?
            } else {
                zeros
            };
            let eps = noise_leaf(&tape, &x0_shape, rng);
            let x_t = tape_q_sample(&tape, schedule, x0, &ts, eps)?;
            let input = net.assemble_input(&tape, image, x_t, Some(sc))?;
            net.forward(&tape, &vars, input, &ts)?
        }
        Strategy::SelfCondNextT => {
            let two_pass = hooks
                .force_two_pass
                .unwrap_or_else(|| rng.gen_range(0.0..1.0) < config.self_cond_prob);
            debug.used_two_pass = two_pass;
            let zeros = tape.leaf(Tensor::zeros(&x0_shape));
            let (sc, x_t) = if two_pass {
                // First pass at t + 1; second-pass input drawn from the
                // forward posterior q(x_t | x_{t+1}, x_0) around the
                // true x_0 and the first-pass input.
                let next: Vec<usize> = ts.iter().map(|&t| t + 1).collect();
                let est = pass1_estimate(&next, Some(zeros), rng, &mut debug)?;
                let x_next = tape.value(debug.pass1_xin.expect("first pass ran"));
                let x_t = posterior_draw_leaf(&tape, schedule, &batch.x0, &x_next, &next, rng)?;
                (est, x_t)
            } else {
                let eps = noise_leaf(&tape, &x0_shape, rng);
                (zeros, tape_q_sample(&tape, schedule, x0, &ts, eps)?)
            };
            let input = net.assemble_input(&tape, image, x_t, Some(sc))?;
            net.forward(&tape, &vars, input, &ts)?
        }
        Strategy::RecycleNextT => {
            debug.used_two_pass = true;
            let next: Vec<usize> = ts.iter().map(|&t| t + 1).collect();
            let est = pass1_estimate(&next, None, rng, &mut debug)?;
            let eps = noise_leaf(&tape, &x0_shape, rng);
            let x_t = tape_q_sample(&tape, schedule, est, &ts, eps)?;
            let input = net.assemble_input(&tape, image, x_t, None)?;
            net.forward(&tape, &vars, input, &ts)?
        }
        Strategy::RecycleMaxT => {
            debug.used_two_pass = true;
            let maxs = vec![schedule.len(); n];
            let est = pass1_estimate(&maxs, None, rng, &mut debug)?;
            let eps = noise_leaf(&tape, &x0_shape, rng);
            let x_t = tape_q_sample(&tape, schedule, est, &ts, eps)?;
            let input = net.assemble_input(&tape, image, x_t, None)?;
            net.forward(&tape, &vars, input, &ts)?
        }
    };

    // Loss is always against the true mask, never the recycled estimate.
    let target = tape.add_scalar(tape.scale(x0, 0.5), 0.5);
    let loss = seg_loss(&tape, logits, target, config)?;
    let loss_value = Elem::to_f64(tape.value(loss).item());
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = tape.backward(loss)?;

    let mut named = HashMap::new();
    for (name, var) in vars.iter() {
        if let Some(g) = grads.get(var) {
            named.insert(name.to_string(), g.clone());
        }
    }

    // The first pass sits behind a stop-gradient; nothing upstream of it
    // may receive a gradient.
    if let Some(eps1) = debug.pass1_noise {
        if hooks.force_pass1_x0hat.is_none() && grads.get(eps1).is_some() {
            return Err(Error::Config(
                "gradient leaked through the first-pass stop-gradient".into(),
            ));
        }
    }

    Ok(StepResult {
        loss: loss_value,
        grads: named,
        debug,
    })
}

/// Draw `x_t` from the forward posterior `q(x_t | x_{t+1}, x_0)` with
/// the true `x_0` and the already-sampled `x_{t+1}`. Pure sampling with
/// no gradient path, so it enters the tape as a leaf.
fn posterior_draw_leaf<E: Elem>(
    tape: &Tape<E>,
    schedule: &NoiseSchedule,
    x0: &Tensor<E>,
    x_next: &Tensor<E>,
    next_ts: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = next_ts.len();
    let per = x0.len() / n;
    let mut out = Vec::with_capacity(x0.len());
    for (i, &tn) in next_ts.iter().enumerate() {
        let x0_i = slice_sample(x0, i, per);
        let xn_i = slice_sample(x_next, i, per);
        let mean = diffusion::posterior_mean(&x0_i, &xn_i, tn, schedule)?;
        let sigma = schedule.tilde_beta(tn).sqrt();
        for &m in mean.data() {
            let z = crate::tensor::sample_standard_normal(rng);
            out.push(E::from_f64(m.to_f64() + sigma * z));
        }
    }
    Ok(tape.leaf(Tensor::new(x0.shape().to_vec(), out)?))
}

fn slice_sample<E: Elem>(t: &Tensor<E>, i: usize, per: usize) -> Tensor<E> {
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, t.data()[i * per..(i + 1) * per].to_vec()).expect("slice shape consistent")
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub mean_t: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub best_val_dice: Option<f64>,
    pub steps: usize,
}

/// Full training driver: batching, timestep sampling (optionally
/// importance-weighted), optimisation, logging, checkpoints, and
/// best-by-validation-Dice tracking.
pub struct Trainer<E: Elem> {
    pub net: UNet<E>,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    opt: AdamW<E>,
    importance: Option<ImportanceState>,
    rng: ChaCha8Rng,
    pub log: Vec<LogRow>,
    pub best_params: Option<(f64, Parameters<E>)>,
}

impl<E: Elem> Trainer<E> {
    pub fn new(net: UNet<E>, schedule: NoiseSchedule, config: TrainConfig) -> Self {
        let importance = config
            .importance_sampling
            .then(|| ImportanceState::with_defaults(schedule.len()));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            net,
            schedule,
            config,
            opt: AdamW::new(),
            importance,
            rng,
            log: Vec::new(),
            best_params: None,
        }
    }

    fn sample_ts(&mut self, n: usize) -> Vec<usize> {
        let cap = self.config.strategy.max_train_t(self.schedule.len());
        (0..n)
            .map(|_| match &self.importance {
                Some(imp) => imp.sample_bounded(&mut self.rng, cap),
                None => self.rng.gen_range(1..=cap),
            })
            .collect()
    }

    fn make_batch(&mut self, images: &[Tensor<E>], masks: &[Tensor<E>]) -> Result<Batch<E>> {
        let n = self.config.batch_size.min(images.len());
        let mut img_parts = Vec::with_capacity(n);
        let mut x0_parts = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.rng.gen_range(0..images.len());
            img_parts.push(images[i].clone());
            x0_parts.push(masks[i].clone());
        }
        Ok(Batch {
            images: stack(&img_parts)?,
            x0: stack(&x0_parts)?,
        })
    }

    /// Train for `config.steps` steps. `out_dir`, when given, receives a
    /// CSV log and periodic/best/final checkpoints.
    pub fn train(
        &mut self,
        train_images: &[Tensor<E>],
        train_masks: &[Tensor<E>],
        val_images: &[Tensor<E>],
        val_masks: &[Tensor<E>],
        out_dir: Option<&Path>,
    ) -> Result<TrainReport> {
        if train_images.is_empty() || train_images.len() != train_masks.len() {
            return Err(Error::Config("empty or mismatched training set".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let hooks = StepHooks::default();
        let mut last_loss = f64::NAN;
        let mut best_val = None;
        for step in 0..self.config.steps {
            let batch = self.make_batch(train_images, train_masks)?;
            let ts = self.sample_ts(batch.images.shape()[0]);
            let result = train_step(
                &self.net,
                &self.schedule,
                &self.config,
                &batch,
                &ts,
                &mut self.rng,
                &hooks,
            )?;
            let lr = self.config.lr.lr(step);
            self.opt
                .update(&mut self.net.params, &result.grads, lr, &self.config)?;
            last_loss = result.loss;
            if let Some(imp) = &mut self.importance {
                for &t in &ts {
                    imp.record_loss(t, result.loss)?;
                }
            }

            let mut val_dice = None;
            if self.config.eval_every > 0
                && !val_images.is_empty()
                && (step + 1) % self.config.eval_every == 0
            {
                let dice = self.validate(val_images, val_masks)?;
                val_dice = Some(dice);
                if best_val.map_or(true, |b| dice > b) {
                    best_val = Some(dice);
                    self.best_params = Some((dice, self.net.params.clone()));
                    if let Some(dir) = out_dir {
                        crate::checkpoint::save(&self.net.params, &dir.join("best"))?;
                    }
                }
            }

            self.log.push(LogRow {
                step,
                loss: result.loss,
                lr,
                mean_t: ts.iter().sum::<usize>() as f64 / ts.len() as f64,
                val_dice,
            });

            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0
                    && (step + 1) % self.config.checkpoint_every == 0
                {
                    crate::checkpoint::save(
                        &self.net.params,
                        &dir.join(format!("ckpt_step{:06}", step + 1)),
                    )?;
                }
            }
        }

        if let Some(dir) = out_dir {
            crate::checkpoint::save(&self.net.params, &dir.join("final"))?;
            self.write_log_csv(&dir.join("train_log.csv"))?;
        }

        Ok(TrainReport {
            final_loss: last_loss,
            best_val_dice: best_val,
            steps: self.config.steps,
        })
    }

    /// Mean validation Dice over all foreground classes using a short
    /// reverse-process sample.
    pub fn validate(&self, images: &[Tensor<E>], masks: &[Tensor<E>]) -> Result<f64> {
        let k = self.config.val_sample_steps;
        let sub = self.schedule.resample(&self.schedule.uniform_indices(k)?)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0a11);
        let mut total = 0.0;
        let mut count = 0usize;
        for (img, mask) in images.iter().zip(masks) {
            let trace = crate::infer::sample(
                &self.net,
                &sub,
                img,
                crate::infer::Sampler::Ddpm,
                None,
                &mut rng,
            )?;
            let pred = crate::eval::argmax_labels(trace.final_probs())?;
            let truth = crate::eval::argmax_labels(&signal_to_probs(mask))?;
            let classes = mask.shape()[1];
            for c in 1..classes {
                total += crate::eval::dice_score(&pred, &truth, c)?;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,loss,lr,mean_t,val_dice")?;
        for row in &self.log {
            writeln!(
                f,
                "{},{},{},{},{}",
                row.step,
                row.loss,
                row.lr,
                row.mean_t,
                row.val_dice.map_or(String::new(), |v| v.to_string())
            )?;
        }
        Ok(())
    }
}

/// Stack same-shaped [c, h, w] (or [1, c, h, w]) tensors along a new
/// batch axis.
pub fn stack<E: Elem>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
    let mut shape = first.shape().to_vec();
    if shape.len() == 4 {
        if shape[0] != 1 {
            return Err(Error::shape("stack expects [c, h, w] or [1, c, h, w] parts"));
        }
        shape.remove(0);
    }
    let mut data = Vec::with_capacity(parts.len() * first.len());
    for p in parts {
        let ps: &[usize] = if p.shape().len() == 4 { &p.shape()[1..] } else { p.shape() };
        if ps != shape.as_slice() {
            return Err(Error::shape("stack parts must share a shape"));
        }
        data.extend_from_slice(p.data());
    }
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}

/// Map a {-1, +1} signal to per-class probabilities in [0, 1].
pub fn signal_to_probs<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::from_f64(0.5 * (v.to_f64() + 1.0)))
}

pub fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UNetConfig;

    fn tiny_net(strategy: Strategy) -> UNet<f64> {
        let config = UNetConfig {
            image_channels: 1,
            classes: 2,
            widths: vec![2, 3],
            time_embed_dim: 4,
            with_transformer: false,
            with_self_cond: strategy.wants_self_cond_input(),
        };
        UNet::new(config, 7).unwrap()
    }

    fn tiny_batch() -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let mut x0 = Tensor::full(&[2, 2, 4, 4], -1.0);
        for n in 0..2 {
            for i in 0..16 {
                let fg = (i + n) % 2 == 0;
                let base = n * 32;
                x0.data_mut()[base + if fg { 16 + i } else { i }] = 1.0;
            }
        }
        Batch { images, x0 }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn max_train_t_caps_next_t_strategies() {
        assert_eq!(Strategy::Standard.max_train_t(1001), 1001);
        assert_eq!(Strategy::SelfCondSameT.max_train_t(1001), 1001);
        assert_eq!(Strategy::RecycleMaxT.max_train_t(1001), 1001);
        assert_eq!(Strategy::SelfCondNextT.max_train_t(1001), 1000);
        assert_eq!(Strategy::RecycleNextT.max_train_t(1001), 1000);
    }

    #[test]
    fn lr_schedule_shape() {
        let lr = LrSchedule::default();
        assert!((lr.lr(0) - lr.start).abs() < 1e-12);
        assert!((lr.lr(lr.warmup_steps) - lr.peak).abs() < 1e-12);
        let mid = lr.lr(lr.warmup_steps + lr.decay_steps / 2);
        assert!((mid - (lr.end + 0.5 * (lr.peak - lr.end))).abs() < 1e-12);
        assert!((lr.lr(lr.warmup_steps + lr.decay_steps) - lr.end).abs() < 1e-12);
        assert!((lr.lr(10 * lr.decay_steps) - lr.end).abs() < 1e-12);
        // Monotone up through warmup, monotone down through decay.
        for s in 1..lr.warmup_steps {
            assert!(lr.lr(s) >= lr.lr(s - 1));
        }
        for s in lr.warmup_steps + 1..lr.warmup_steps + lr.decay_steps {
            assert!(lr.lr(s) <= lr.lr(s - 1));
        }
    }

    #[test]
    fn seg_loss_near_zero_for_confident_correct_prediction() {
        let config = TrainConfig::default();
        let batch = tiny_batch();
        let target = signal_to_probs(&batch.x0);
        // Logits = 20 * one-hot target gives a near-one softmax on the
        // correct class everywhere.
        let logits = target.map(|v| v * 20.0);

        let tape = Tape::<f64>::new();
        let lv = tape.leaf(logits);
        let tv = tape.leaf(target);
        let loss = seg_loss(&tape, lv, tv, &config).unwrap();
        let value = tape.value(loss).item();
        assert!(value.abs() < 1e-4, "confident correct loss {value}");
    }

    #[test]
    fn seg_loss_is_weighted_sum_of_ce_and_dice() {
        let batch = tiny_batch();
        let target = signal_to_probs(&batch.x0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::<f64>::randn(&[2, 2, 4, 4], &mut rng);

        let eval = |ce_w: f64, dice_w: f64| -> f64 {
            let config = TrainConfig {
                ce_weight: ce_w,
                dice_weight: dice_w,
                ..TrainConfig::default()
            };
            let tape = Tape::<f64>::new();
            let lv = tape.leaf(logits.clone());
            let tv = tape.leaf(target.clone());
            tape.value(seg_loss(&tape, lv, tv, &config).unwrap()).item()
        };
        let ce_only = eval(1.0, 0.0);
        let dice_only = eval(0.0, 1.0);
        let combined = eval(20.0, 1.0);
        assert!((combined - (20.0 * ce_only + dice_only)).abs() < 1e-10);
        assert!(ce_only > 0.0 && dice_only > 0.0);
    }

    #[test]
    fn adamw_constant_gradient_moves_by_lr() {
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut params = Parameters::<f64>::new();
        params.insert("p".into(), Tensor::full(&[2], 1.0));
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), Tensor::full(&[2], 1.0));
        let mut opt = AdamW::new();
        // With a constant gradient the bias-corrected update is
        // g / (|g| + eps), i.e. one learning rate per step.
        opt.update(&mut params, &grads, 0.1, &config).unwrap();
        assert!((params.get("p").unwrap().data()[0] - 0.9).abs() < 1e-8);
        opt.update(&mut params, &grads, 0.1, &config).unwrap();
        assert!((params.get("p").unwrap().data()[0] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn adamw_weight_decay_is_decoupled() {
        let config = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut params = Parameters::<f64>::new();
        params.insert("p".into(), Tensor::full(&[1], 2.0));
        // Zero gradient: the Adam term vanishes, only decay acts.
        let mut grads = HashMap::new();
        grads.insert("p".to_string(), Tensor::full(&[1], 0.0));
        let mut opt = AdamW::new();
        opt.update(&mut params, &grads, 0.1, &config).unwrap();
        assert!((params.get("p").unwrap().data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn train_step_all_strategies_run_with_stop_gradient_intact() {
        let batch = tiny_batch();
        for strategy in Strategy::ALL {
            let net = tiny_net(strategy);
            let config = TrainConfig {
                strategy,
                ..TrainConfig::default()
            };
            let hooks = StepHooks {
                force_two_pass: strategy.wants_self_cond_input().then_some(true),
                ..StepHooks::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            // train_step itself fails if any gradient reaches the
            // first-pass noise leaf behind the stop-gradient.
            let result =
                train_step(&net, &schedule_short(), &config, &batch, &[3, 5], &mut rng, &hooks)
                    .unwrap_or_else(|e| panic!("{strategy:?}: {e}"));
            assert!(result.loss.is_finite(), "{strategy:?} loss not finite");
            assert!(!result.grads.is_empty(), "{strategy:?} produced no gradients");
            let two_pass = strategy != Strategy::Standard;
            assert_eq!(result.debug.pass1_noise.is_some(), two_pass, "{strategy:?}");
            assert_eq!(result.debug.used_two_pass, two_pass, "{strategy:?}");
        }
    }

    fn schedule_short() -> NoiseSchedule {
        NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn train_step_rejects_out_of_range_timesteps() {
        let net = tiny_net(Strategy::RecycleNextT);
        let config = TrainConfig {
            strategy: Strategy::RecycleNextT,
            ..TrainConfig::default()
        };
        let s = schedule_short();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // t = len(schedule) is out of range because the first pass would
        // need t + 1.
        let err = train_step(
            &net,
            &s,
            &config,
            &tiny_batch(),
            &[s.len(), 1],
            &mut rng,
            &StepHooks::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn train_step_is_deterministic_for_fixed_seed() {
        let net = tiny_net(Strategy::SelfCondSameT);
        let config = TrainConfig {
            strategy: Strategy::SelfCondSameT,
            ..TrainConfig::default()
        };
        let batch = tiny_batch();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            train_step(
                &net,
                &schedule_short(),
                &config,
                &batch,
                &[2, 7],
                &mut rng,
                &StepHooks::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (name, g) in &a.grads {
            assert_eq!(g, b.grads.get(name).unwrap(), "gradient {name} differs");
        }
    }

    #[test]
    fn self_cond_coin_respects_probability() {
        let net = tiny_net(Strategy::SelfCondSameT);
        let s = schedule_short();
        let batch = tiny_batch();
        for (prob, lo, hi) in [(0.0, 0, 0), (1.0, 400, 400), (0.5, 140, 260)] {
            let config = TrainConfig {
                strategy: Strategy::SelfCondSameT,
                self_cond_prob: prob,
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut hits = 0;
            for _ in 0..400 {
                let r = train_step(
                    &net,
                    &s,
                    &config,
                    &batch,
                    &[4, 6],
                    &mut rng,
                    &StepHooks::default(),
                )
                .unwrap();
                hits += r.debug.used_two_pass as usize;
            }
            assert!((lo..=hi).contains(&hits), "prob {prob}: {hits}/400");
        }
    }

    /// Counterexample showing the loss targets the ground truth, not the
    /// recycled estimate: with a constant network output, swapping the
    /// forced first-pass estimate for its negation must not change the
    /// loss, even though a loss against the estimate would change.
    #[test]
    fn loss_targets_ground_truth_not_recycled_estimate() {
        let mut net = tiny_net(Strategy::RecycleMaxT);
        // Constant non-uniform logits: zero head weights, biased head.
        net.params.get_mut("head.b").unwrap().data_mut()[0] = 1.3;
        let config = TrainConfig {
            strategy: Strategy::RecycleMaxT,
            ..TrainConfig::default()
        };
        let s = schedule_short();
        // Imbalanced target (3 of 16 pixels foreground) so that
        // inverting the target genuinely changes a loss against it.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let images = Tensor::randn(&[2, 1, 4, 4], &mut rng);
        let mut x0 = Tensor::full(&[2, 2, 4, 4], -1.0);
        for n in 0..2 {
            for i in 0..16 {
                let fg = i < 3;
                x0.data_mut()[n * 32 + if fg { 16 + i } else { i }] = 1.0;
            }
        }
        let batch = Batch { images, x0 };

        let loss_with_estimate = |est: Tensor<f64>| {
            let hooks = StepHooks {
                force_pass1_x0hat: Some(est),
                ..StepHooks::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            train_step(&net, &s, &config, &batch, &[4, 6], &mut rng, &hooks)
                .unwrap()
                .loss
        };
        let honest = loss_with_estimate(batch.x0.clone());
        let inverted = loss_with_estimate(batch.x0.scale(-1.0));
        assert_eq!(honest.to_bits(), inverted.to_bits());

        // Sanity: against the estimates themselves those targets differ.
        let seg = |target: Tensor<f64>| {
            let tape = Tape::<f64>::new();
            let mut raw = Tensor::full(&[2, 2, 4, 4], 0.0);
            for n in 0..2 {
                for i in 0..16 {
                    raw.data_mut()[n * 32 + i] = 1.3; // background channel bias
                }
            }
            let logits = tape.leaf(raw);
            let tv = tape.leaf(signal_to_probs(&target));
            tape.value(seg_loss(&tape, logits, tv, &config).unwrap()).item()
        };
        assert!((seg(batch.x0.clone()) - seg(batch.x0.scale(-1.0))).abs() > 1e-6);
    }

    #[test]
    fn trainer_short_run_produces_finite_logged_losses() {
        let strategy = Strategy::Standard;
        let config = TrainConfig {
            strategy,
            steps: 3,
            batch_size: 2,
            eval_every: 0,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(tiny_net(strategy), schedule_short(), config);
        let batch = tiny_batch();
        let images: Vec<Tensor<f64>> = (0..2)
            .map(|i| slice_sample(&batch.images, i, 16))
            .collect();
        let masks: Vec<Tensor<f64>> = (0..2).map(|i| slice_sample(&batch.x0, i, 32)).collect();
        let report = trainer.train(&images, &masks, &[], &[], None).unwrap();
        assert_eq!(report.steps, 3);
        assert_eq!(trainer.log.len(), 3);
        assert!(trainer.log.iter().all(|r| r.loss.is_finite()));
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn stack_handles_both_ranks() {
        let a = Tensor::<f64>::full(&[2, 3, 3], 1.0);
        let b = Tensor::<f64>::full(&[1, 2, 3, 3], 2.0);
        let s = stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3, 3]);
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[18], 2.0);
    }
}
