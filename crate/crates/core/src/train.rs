//! Supervised training: per-pixel MSE, Adam, seeded splitting and
//! mini-batching, and early stopping on validation loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::sample_rng;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{Grid2D, Tensor3};
use crate::unet::{backward_into, forward, Architecture, UNetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Wall-clock budget in seconds; no epoch is started that would be
    /// expected to end past it.
    #[serde(default)]
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.1,
            seed: 42,
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if let Some(t) = self.time_limit_secs {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("time limit must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

/// Mean squared error over all pixels and its gradient
/// `2 (pred - target) / (H·W)`.
pub fn mse_loss(pred: &Tensor3, target: &Grid2D) -> Result<(f64, Tensor3)> {
    let (losses, grads) = mse_loss_batch(std::slice::from_ref(pred), &[target])?;
    Ok((losses, grads.into_iter().next().expect("one gradient")))
}

/// Batch MSE: the per-pixel mean additionally averaged over the batch, with
/// gradients scaled by the true element count `H·W·B`.
pub fn mse_loss_batch(preds: &[Tensor3], targets: &[&Grid2D]) -> Result<(f64, Vec<Tensor3>)> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let count: usize = targets.iter().map(|t| t.len()).sum();
    let scale = 2.0 / count as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (pred, target) in preds.iter().zip(targets) {
        if pred.shape() != (1, target.height(), target.width()) {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {}x{}",
                pred.shape(),
                target.height(),
                target.width()
            )));
        }
        let mut grad = Vec::with_capacity(target.len());
        for (&p, &t) in pred.values().iter().zip(target.values()) {
            let d = p - t;
            sum += d * d;
            grad.push(scale * d);
        }
        grads.push(Tensor3::from_raw(1, target.height(), target.width(), grad));
    }
    Ok((sum / count as f64, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &UNetParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched when any
/// gradient is non-finite.
pub fn adam_step(params: &mut UNetParams, grads: &UNetParams, state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.arch != params.arch || state.m.len() != params.layers.len() * 2 {
        return Err(Error::Shape("gradient or optimizer state does not match the parameters".into()));
    }
    let step = state.t + 1;
    for (name, g) in grads.arrays() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: name, step });
        }
    }
    state.t = step;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for ((((_, p), (_, g)), m), v) in params
        .arrays_mut()
        .zip(grads.arrays())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Seeded shuffle of `0..n` split into `(train, validation)` index sets.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples to split, got {n}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

pub fn split_dataset(dataset: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), val_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            Verdict {
                improved: true,
                stop: false,
            }
        } else {
            self.stale += 1;
            Verdict {
                improved: false,
                stop: self.stale >= self.patience,
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// The next epoch would have overrun `time_limit_secs`.
    TimeLimit,
    /// Training hit a non-finite loss or gradient; the best checkpoint so far
    /// is still returned.
    NonFinite(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: UNetParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochReport>,
    pub stop_reason: StopReason,
}

impl TrainOutcome {
    /// History as a comma-separated table with a header row.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.history {
            writeln!(out, "{},{:e},{:e},{:.3}", r.epoch, r.train_loss, r.val_loss, r.seconds).unwrap();
        }
        out
    }
}

/// Preprocessed inputs and labels ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub inputs: Vec<Tensor3>,
    pub labels: Vec<Grid2D>,
}

impl Prepared {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let inputs = dataset
            .samples
            .iter()
            .map(|s| s.input_tensor())
            .collect::<Result<Vec<_>>>()?;
        let labels = dataset.samples.iter().map(|s| s.ir_drop.clone()).collect();
        Ok(Self { inputs, labels })
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean per-pixel squared error of `params` over a prepared set.
pub fn dataset_mse(params: &UNetParams, data: &Prepared) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, target) in data.inputs.iter().zip(&data.labels) {
        let pred = params.predict(x)?;
        target.ensure_same_shape(&pred)?;
        sum += pred
            .values()
            .iter()
            .zip(target.values())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        count += target.len();
    }
    Ok(sum / count as f64)
}

/// Forward and backward over one mini-batch; returns the batch loss and the
/// summed gradient (samples reduced in batch order).
pub fn batch_gradient(params: &UNetParams, data: &Prepared, batch: &[usize]) -> Result<(f64, UNetParams)> {
    let count: usize = batch.iter().map(|&i| data.labels[i].len()).sum();
    let scale = 2.0 / count as f64;
    let mut grads = params.zeros_like();
    let mut sum = 0.0;
    for &i in batch {
        let (pred, cache) = forward(params, &data.inputs[i])?;
        let target = &data.labels[i];
        let mut grad = pred;
        if grad.shape() != (1, target.height(), target.width()) {
            return Err(Error::Shape(format!(
                "prediction {:?} vs label {}x{}",
                grad.shape(),
                target.height(),
                target.width()
            )));
        }
        for (g, &t) in grad.values_mut().iter_mut().zip(target.values()) {
            let d = *g - t;
            sum += d * d;
            *g = scale * d;
        }
        backward_into(params, &cache, &grad, &mut grads)?;
    }
    Ok((sum / count as f64, grads))
}

/// Trains a fresh network on `dataset`, splitting off a validation set.
pub fn train(dataset: &Dataset, config: &TrainConfig, arch: Architecture) -> Result<TrainOutcome> {
    train_with(dataset, config, arch, |_| {})
}

/// [`train`] with a per-epoch callback (progress reporting).
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    arch: Architecture,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let prepared = Prepared::from_dataset(dataset)?;
    let (train_idx, val_idx) = split_indices(prepared.len(), config.val_fraction, config.seed)?;
    let train_set = prepared.subset(&train_idx);
    let val_set = prepared.subset(&val_idx);
    train_prepared(&train_set, &val_set, config, UNetParams::he_init(arch, config.seed), &mut on_epoch)
}

/// The training loop proper, starting from `init`.
pub fn train_prepared(
    train_set: &Prepared,
    val_set: &Prepared,
    config: &TrainConfig,
    init: UNetParams,
    on_epoch: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
    }
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut history: Vec<EpochReport> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let run_started = Instant::now();

    'epochs: for epoch in 1..=config.max_epochs {
        if let (Some(limit), Some(last)) = (config.time_limit_secs, history.last()) {
            if run_started.elapsed().as_secs_f64() + last.seconds > limit {
                stop_reason = StopReason::TimeLimit;
                break;
            }
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sample_rng(config.seed, epoch as u64));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = batch_gradient(&params, train_set, batch)?;
            if !loss.is_finite() {
                stop_reason = StopReason::NonFinite(format!("training loss {loss} in epoch {epoch}"));
                break 'epochs;
            }
            if let Err(e) = adam_step(&mut params, &grads, &mut adam, config.learning_rate) {
                match e {
                    Error::NonFiniteGradient { .. } => {
                        stop_reason = StopReason::NonFinite(e.to_string());
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = match dataset_mse(&params, val_set) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                stop_reason = StopReason::NonFinite(format!("validation loss {v} in epoch {epoch}"));
                break;
            }
            // non-finite activations surface as invalid tensors
            Err(Error::InvalidInput(msg)) => {
                stop_reason = StopReason::NonFinite(msg);
                break;
            }
            Err(e) => return Err(e),
        };

        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e} ({:.1}s)",
            report.seconds
        );
        on_epoch(&report);
        history.push(report);

        let verdict = stopper.observe(epoch, val_loss);
        if verdict.improved {
            best = params.clone();
        }
        if verdict.stop {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().unwrap_or((0, f64::INFINITY));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        history,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: &[f64], h: usize, w: usize) -> Tensor3 {
        Tensor3::new(1, h, w, rows.to_vec()).unwrap()
    }

    #[test]
    fn mse_hand_case() {
        let pred = tensor(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let (loss, grad) = mse_loss(&pred, &Grid2D::zeros(2, 2)).unwrap();
        assert_eq!(loss, 0.25);
        assert_eq!(grad.values(), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_identity_and_offset() {
        let target = Grid2D::from_fn(4, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        let (loss, grad) = mse_loss(&Tensor3::from_grid(&target), &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));

        let zero = Grid2D::zeros(4, 4);
        let (loss, _) = mse_loss(&Tensor3::from_grid(&zero.map(|v| v + 0.1)), &zero).unwrap();
        assert!((loss - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(matches!(
            mse_loss(&Tensor3::zeros(1, 2, 2), &Grid2D::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn batch_mse_uses_total_count() {
        let a = tensor(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let b = tensor(&[0.0; 4], 2, 2);
        let zero = Grid2D::zeros(2, 2);
        let (loss, grads) = mse_loss_batch(&[a, b], &[&zero, &zero]).unwrap();
        assert_eq!(loss, 0.125);
        assert_eq!(grads[0].values()[0], 0.25);
    }

    fn small_params() -> UNetParams {
        UNetParams::he_init(Architecture::new([2, 2, 2]).unwrap(), 1)
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = small_params();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = small_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        for (_, g) in grads.arrays_mut() {
            g.fill(0.37);
        }
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
        for ((_, a), (_, b)) in before.arrays().zip(params.arrays()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((x - y) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let base = small_params();
        let mut grads = base.zeros_like();
        for (i, (_, g)) in grads.arrays_mut().enumerate() {
            for (j, v) in g.iter_mut().enumerate() {
                *v = ((i * 31 + j) % 7) as f64 - 3.0;
            }
        }
        let run = || {
            let mut p = base.clone();
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &grads, &mut s, 1e-3).unwrap();
            adam_step(&mut p, &grads, &mut s, 1e-3).unwrap();
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = small_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.layers[3].weight[0] = f64::NAN;
        let mut state = AdamState::new(&params);
        match adam_step(&mut params, &grads, &mut state, 1e-3) {
            Err(Error::NonFiniteGradient { layer, step }) => {
                assert_eq!(layer, "enc2.conv2.weight");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn split_partitions() {
        let (train, val) = split_indices(1000, 0.1, 3).unwrap();
        assert_eq!((train.len(), val.len()), (900, 100));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 0.1, 3).unwrap(), (train, val));
        assert_ne!(split_indices(1000, 0.1, 4).unwrap().1, split_indices(1000, 0.1, 3).unwrap().1);
        assert!(matches!(split_indices(1, 0.1, 0), Err(Error::InvalidInput(_))));
        assert_eq!(split_indices(2, 0.01, 0).unwrap().1.len(), 1);
    }

    #[test]
    fn early_stopping_rule() {
        // improves through epoch 3, then flat: patience 1 stops at epoch 4
        let losses = [0.5, 0.4, 0.3, 0.3, 0.2];
        let mut stopper = EarlyStopping::new(1);
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            if stopper.observe(i + 1, l).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(stopper.best(), Some((3, 0.3)));

        let mut patient = EarlyStopping::new(3);
        let verdicts: Vec<bool> = [1.0, 2.0, 0.5, 0.6, 0.7, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &l)| patient.observe(i + 1, l).stop)
            .collect();
        assert_eq!(verdicts, vec![false, false, false, false, false, true]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
