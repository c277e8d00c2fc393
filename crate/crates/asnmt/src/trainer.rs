//! Training loop: gradient step (Adam with global-norm clipping), then a
//! proximal step over the scoped group specs with threshold eta·lambda,
//! where eta is the scheduler's current learning rate. The proximal step
//! runs after every optimizer step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autosize::{scope_to_groups, AutosizeScope};
use crate::data::{batch_iterator, Batch, ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::model::{label_smoothed_loss, Mode, TransformerModel};
use crate::prox::{apply_prox, reg_value, GroupSpec, RegKind, Regularizer};
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub lambda: f64,
    pub reg_kind: RegKind,
    pub scope: AutosizeScope,
    /// padded target tokens per batch
    pub batch_tokens: usize,
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub lr_floor: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 0.1,
            label_smoothing: 0.1,
            lambda: 0.0,
            reg_kind: RegKind::L21,
            scope: AutosizeScope::Ffn,
            batch_tokens: 2048,
            lr_decay: 0.5,
            lr_patience: 1,
            lr_floor: 1e-5,
            max_epochs: 100,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_floor >= self.learning_rate {
            return Err(Error::Config(format!(
                "lr_floor ({}) must be below learning_rate ({})",
                self.lr_floor, self.learning_rate
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.lr_decay) || self.lr_decay <= 0.0 {
            return Err(Error::Config("lr_decay must lie in (0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn regularizer(&self) -> Regularizer {
        Regularizer::new(self.reg_kind, self.lambda)
    }
}

/// Adam moment accumulators, aligned with registry order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &TransformerModel) -> Self {
        let m = model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamState { step: 0, m, v }
    }
}

/// Scale all gradients so the global l2 norm does not exceed `max_norm`.
/// Returns the factor applied (1.0 when no clipping was needed).
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
    factor
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: f64,
    /// global gradient norm after clipping
    pub grad_norm: f64,
    pub raw_grad_norm: f64,
    pub zero_groups: usize,
}

/// Forward, backward, clip, Adam — the gradient half of a step, in place.
pub fn gradient_step(
    model: &mut TransformerModel,
    batch: &Batch,
    config: &TrainConfig,
    opt: &mut AdamState,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let (logits, vars) = model.forward_batch(&mut tape, batch, &mut Mode::Train { rng })?;
    let loss = label_smoothed_loss(&mut tape, logits, &batch.tgt_out, PAD, config.label_smoothing)?;
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { value: loss_value, step: opt.step });
    }
    tape.backward(loss)?;

    let mut grads: Vec<Vec<f64>> = vars
        .entries()
        .iter()
        .map(|(_, id)| tape.grad(*id).expect("parameter gradient").to_vec())
        .collect();
    let raw_norm: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    let factor = clip_gradients(&mut grads, config.clip_norm);
    let clipped_norm = raw_norm * factor;

    opt.step += 1;
    let t = opt.step as f64;
    let bias1 = 1.0 - config.adam_beta1.powf(t);
    let bias2 = 1.0 - config.adam_beta2.powf(t);
    for (i, param) in model.params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        for j in 0..g.len() {
            m[j] = config.adam_beta1 * m[j] + (1.0 - config.adam_beta1) * g[j];
            v[j] = config.adam_beta2 * v[j] + (1.0 - config.adam_beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            param.data[j] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok((loss_value, clipped_norm, raw_norm))
}

/// The proximal half of a step: every scoped group moves to its proximal
/// image with threshold lr·lambda. Returns the count of exactly-zero
/// groups afterwards.
pub fn prox_step(
    model: &mut TransformerModel,
    specs: &[GroupSpec],
    config: &TrainConfig,
    lr: f64,
) -> Result<usize> {
    if specs.is_empty() {
        return Ok(0);
    }
    let report = apply_prox(&mut model.params, specs, config.regularizer(), lr)?;
    Ok(report.iter().map(|m| m.zero_groups).sum())
}

/// One full optimizer step: gradient step, then proximal step.
pub fn train_step(
    model: &mut TransformerModel,
    batch: &Batch,
    config: &TrainConfig,
    opt: &mut AdamState,
    specs: &[GroupSpec],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    let (loss, grad_norm, raw_grad_norm) = gradient_step(model, batch, config, opt, lr, rng)?;
    let zero_groups = prox_step(model, specs, config, lr)?;
    Ok(StepMetrics { loss, grad_norm, raw_grad_norm, zero_groups })
}

/// Plateau-driven learning-rate schedule: decay by `factor` after
/// `patience` epochs without validation improvement, stop at the floor.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        PlateauSchedule { lr, factor, patience, floor, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feed one epoch's validation loss; decays the rate on plateau.
    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.lr < self.floor
    }
}

/// One history line per epoch, also serialized as key=value records.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub zero_groups: usize,
    pub reg_value: f64,
}

impl EpochRecord {
    pub fn record(&self) -> String {
        format!(
            "epoch={} loss={:.6} val_loss={:.6} lr={:e} zero_groups={} reg_value={:.6}",
            self.epoch, self.loss, self.val_loss, self.lr, self.zero_groups, self.reg_value
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn history_text(&self) -> String {
        self.history.iter().map(|r| r.record() + "\n").collect()
    }
}

/// Token-weighted teacher-forced validation loss (no dropout).
pub fn validation_loss(
    model: &TransformerModel,
    corpus: &ParallelCorpus,
    batch_tokens: usize,
    smoothing: f64,
) -> Result<f64> {
    let batches = batch_iterator(corpus, batch_tokens, 0)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let (logits, _) = model.forward_batch(&mut tape, batch, &mut Mode::Eval)?;
        let loss = label_smoothed_loss(&mut tape, logits, &batch.tgt_out, PAD, smoothing)?;
        total += tape.value(loss)[0] * batch.target_tokens as f64;
        tokens += batch.target_tokens;
    }
    Ok(total / tokens as f64)
}

/// Sum of group-norm regularizer values over the scoped matrices
/// (unweighted; multiply by lambda for the penalty term).
pub fn total_reg_value(model: &TransformerModel, specs: &[GroupSpec], kind: RegKind) -> Result<f64> {
    let mut total = 0.0;
    for spec in specs {
        let p = model
            .params
            .get(&spec.param_path)
            .ok_or_else(|| Error::UnknownParam { path: spec.param_path.clone() })?;
        total += reg_value(&p.shape, &p.data, spec, kind)?;
    }
    Ok(total)
}

fn count_zero_groups(model: &TransformerModel, specs: &[GroupSpec]) -> usize {
    crate::autosize::detect_dead_groups(model, specs)
        .map(|dead| dead.iter().map(|(_, idx)| idx.len()).sum())
        .unwrap_or(0)
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train until the plateau schedule drops the learning rate below its
/// floor (or `max_epochs` as a safety cap). Fully deterministic in the
/// seed: batch order, dropout masks and all updates reproduce exactly.
pub fn train_loop(
    model: &mut TransformerModel,
    train: &ParallelCorpus,
    valid: &ParallelCorpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.pairs.is_empty() || valid.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let specs = scope_to_groups(model, config.scope);
    let mut opt = AdamState::new(model);
    let mut schedule = PlateauSchedule::new(
        config.learning_rate,
        config.lr_decay,
        config.lr_patience,
        config.lr_floor,
    );
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xD50));
    let mut history = Vec::new();

    let mut epoch = 0;
    while epoch < config.max_epochs && !schedule.should_stop() {
        epoch += 1;
        let lr = schedule.lr;
        let batches = batch_iterator(train, config.batch_tokens, mix_seed(config.seed, epoch as u64))?;
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in &batches {
            let metrics = train_step(model, batch, config, &mut opt, &specs, lr, &mut dropout_rng)?;
            loss_sum += metrics.loss * batch.target_tokens as f64;
            token_sum += batch.target_tokens;
        }
        let train_loss = loss_sum / token_sum as f64;
        let val_loss = validation_loss(model, valid, config.batch_tokens, config.label_smoothing)?;
        let reg = total_reg_value(model, &specs, config.reg_kind)?;
        let zero_groups = count_zero_groups(model, &specs);
        history.push(EpochRecord { epoch, loss: train_loss, val_loss, lr, zero_groups, reg_value: reg });
        schedule.observe(val_loss);
    }
    Ok(TrainOutcome { history, epochs_run: epoch })
}
