//! L1/Adam training with early stopping, per-horizon evaluation metrics, and
//! the win-point comparison.

use std::io::Write;

use crate::config::ModelConfig;
use crate::data::{ForecastWindow, Scaler};
use crate::error::{Error, Result};
use crate::model;
use crate::nawg::Mode;
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::{self, ModelState};
use crate::rng;

/// Momentum of the running normalization statistics.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Mean absolute error over all entries of `prediction - target`.
pub fn l1_loss(tape: &mut Tape, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    if tape.shape(prediction) != tape.shape(target) {
        return Err(Error::shape(
            "l1_loss",
            format!("{:?} vs {:?}", tape.shape(prediction), tape.shape(target)),
        ));
    }
    let diff = tape.sub(prediction, target)?;
    let abs = tape.abs(diff)?;
    tape.mean_all(abs)
}

/// Map normalized model output back to the original scale on the tape, so
/// the loss sees physical units.
pub fn denormalize_on_tape(tape: &mut Tape, prediction: NodeId, scaler: &Scaler) -> Result<NodeId> {
    match scaler {
        Scaler::Global { mean, std } => tape.affine(prediction, *std, *mean),
        Scaler::PerNode { mean, std } => {
            let std_id = tape.input(Tensor::new(vec![std.len()], std.clone()));
            let mean_id = tape.input(Tensor::new(vec![mean.len()], mean.clone()));
            let scaled = tape.mul_col(prediction, std_id)?;
            tape.add_col(scaled, mean_id)
        }
    }
}

// ── Adam ───────────────────────────────────────────────────────────────

/// Bias-corrected Adam state, aligned with the parameter set's order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &params::ParameterSet, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            second: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    /// One update over all parameters; `grads` must be keyed identically to
    /// the parameter set.
    pub fn step(&mut self, params: &mut params::ParameterSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shaped unlike its parameter");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scale gradients so their joint L2 norm is at most `max_norm` (no-op for
/// `max_norm == 0`).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

// ── early stopping ─────────────────────────────────────────────────────

/// Tracks the best validation score; signals a stop once more than
/// `patience` epochs pass without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Feed one epoch's validation score (epochs are 1-based).
    /// Returns (is_new_best, should_stop).
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = score < self.best;
        if improved {
            self.best = score;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch > self.patience)
    }
}

// ── training loop ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Stop as soon as the epoch's training loss drops below this value
    /// (used by the overfit smoke check); None trains to the usual limits.
    pub stop_at_train_loss: Option<f64>,
}

impl TrainSettings {
    pub fn new(batch_size: usize, learning_rate: f64, max_epochs: usize, patience: usize) -> Self {
        TrainSettings {
            batch_size,
            learning_rate,
            max_epochs,
            patience,
            clip_norm: 0.0,
            stop_at_train_loss: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop: StopReason,
}

impl TrainHistory {
    /// Machine-parseable epoch line.
    pub fn format_record(r: &EpochRecord) -> String {
        format!(
            "epoch={} train_loss={:.9} val_mae={:.9} best={}",
            r.epoch, r.train_loss, r.val_mae, r.is_best
        )
    }
}

/// Assemble `[B, T_in, N, F]` inputs and `[B, T_out, N]` targets from a
/// window batch.
fn batch_tensors(windows: &[&ForecastWindow]) -> (Tensor, Tensor) {
    let b = windows.len();
    let xs = windows[0].x.shape();
    let ys = windows[0].y.shape();
    let mut x = Vec::with_capacity(b * windows[0].x.numel());
    let mut y = Vec::with_capacity(b * windows[0].y.numel());
    for w in windows {
        x.extend_from_slice(w.x.data());
        y.extend_from_slice(w.y.data());
    }
    (
        Tensor::new(vec![b, xs[0], xs[1], xs[2]], x),
        Tensor::new(vec![b, ys[0], ys[1]], y),
    )
}

/// Train with shuffled mini-batches, L1 loss on de-normalized predictions,
/// Adam updates, and validation-based early stopping. Returns the best
/// validation-epoch state and the full history.
pub fn train(
    config: &ModelConfig,
    settings: &TrainSettings,
    train_windows: &[ForecastWindow],
    val_windows: &[ForecastWindow],
    scaler: &Scaler,
    mut log: Option<&mut dyn Write>,
) -> Result<(ModelState, TrainHistory)> {
    config.validate()?;
    assert!(!train_windows.is_empty(), "no training windows");
    assert!(!val_windows.is_empty(), "no validation windows");

    let mut state = params::init(config)?;
    let mut adam = AdamState::new(&state.params, settings.learning_rate);
    let mut stopper = EarlyStopper::new(settings.patience);
    let mut best_state = state.clone();
    let mut records = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=settings.max_epochs {
        let mut order: Vec<usize> = (0..train_windows.len()).collect();
        let mut shuffle_rng = rng::stream(config.seed, &format!("shuffle.epoch{epoch}"));
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, chunk) in order.chunks(settings.batch_size).enumerate() {
            let batch: Vec<&ForecastWindow> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let (x, y) = batch_tensors(&batch);

            let mut tape = Tape::new();
            let bound = model::bind(&mut tape, &state, config)?;
            let mut observed = Vec::new();
            let step = (|| -> Result<(f64, Vec<Tensor>, Vec<crate::nawg::NormObs>)> {
                let mut mode = Mode::Train {
                    observed: &mut observed,
                };
                let trace = model::forward(&mut tape, &bound, &x, config, &mut mode)?;
                let denorm = denormalize_on_tape(&mut tape, trace.prediction, scaler)?;
                let target = tape.input(y.clone());
                let loss = l1_loss(&mut tape, denorm, target)?;
                let ids: Vec<NodeId> = bound.param_ids.iter().map(|(_, id)| *id).collect();
                let grads = tape.gradients(loss, &ids)?;
                Ok((tape.value(loss).item(), grads, observed))
            })();
            let (loss_value, mut grads, observed) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                Err(e) => return Err(e),
            };
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }

            clip_gradients(&mut grads, settings.clip_norm);
            adam.step(&mut state.params, &grads);
            for obs in &observed {
                state
                    .norms
                    .update(&obs.site, &obs.mean, &obs.var, NORM_MOMENTUM);
            }
            loss_sum += loss_value * chunk.len() as f64;
            loss_count += chunk.len();
        }
        let train_loss = loss_sum / loss_count as f64;

        let val = evaluate(config, &state, val_windows, scaler, settings.batch_size)?;
        let val_mae = val.average.mae;
        let (is_best, should_stop) = stopper.observe(epoch, val_mae);
        if is_best {
            best_state = state.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_mae,
            is_best,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", TrainHistory::format_record(&record))?;
        }
        records.push(record);
        if let Some(target) = settings.stop_at_train_loss {
            if train_loss < target {
                // target mode returns the state that reached the target
                best_state = state.clone();
                stop = StopReason::TargetReached;
                break;
            }
        }
        if should_stop {
            stop = StopReason::Patience;
            break;
        }
    }

    let history = TrainHistory {
        records,
        best_epoch: stopper.best_epoch,
        best_val_mae: stopper.best,
        stop,
    };
    Ok((best_state, history))
}

// ── evaluation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Absent when every target in the horizon is zero.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Indexed by horizon, 1-based in presentation.
    pub per_horizon: Vec<HorizonMetrics>,
    pub average: HorizonMetrics,
    /// Number of evaluated windows.
    pub samples: usize,
    /// Zero-target entries excluded from MAPE.
    pub masked_zeros: usize,
    /// True when batch statistics were never trained and evaluation fell
    /// back to identity normalization.
    pub identity_stats_used: bool,
}

impl MetricsReport {
    /// Delimited text keyed by horizon.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (h, m) in self.per_horizon.iter().enumerate() {
            out.push_str(&format_metrics_line(&format!("{}", h + 1), m));
        }
        out.push_str(&format_metrics_line("avg", &self.average));
        out
    }
}

fn format_metrics_line(key: &str, m: &HorizonMetrics) -> String {
    let mape = match m.mape {
        Some(v) => format!("{:.9}", v),
        None => "na".to_string(),
    };
    format!(
        "horizon={key} mae={:.9} rmse={:.9} mape={mape}\n",
        m.mae, m.rmse
    )
}

/// De-normalized predictions and original-scale truths over a window list,
/// both `[W, T_out, N]`. The flag reports an identity-statistics fallback.
pub fn predictions_over(
    config: &ModelConfig,
    state: &ModelState,
    windows: &[ForecastWindow],
    scaler: &Scaler,
    batch_size: usize,
) -> Result<(Tensor, Tensor, bool)> {
    let t_out = config.t_out;
    let nodes = config.nodes;
    let mut preds = Vec::with_capacity(windows.len() * t_out * nodes);
    let mut truths = Vec::with_capacity(windows.len() * t_out * nodes);
    let mut identity_stats = false;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ForecastWindow> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs);
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, state, config)?;
        let mut flagged = false;
        let mut mode = Mode::Eval {
            norms: &state.norms,
            used_identity_stats: &mut flagged,
        };
        let trace = model::forward(&mut tape, &bound, &x, config, &mut mode)?;
        identity_stats |= flagged;
        let pred = tape.value(trace.prediction);
        for b in 0..chunk.len() {
            for t in 0..t_out {
                for n in 0..nodes {
                    preds.push(scaler.denormalize(pred.at3(b, t, n), n));
                }
            }
        }
        truths.extend_from_slice(y.data());
    }
    let shape = vec![windows.len(), t_out, nodes];
    Ok((
        Tensor::new(shape.clone(), preds),
        Tensor::new(shape, truths),
        identity_stats,
    ))
}

/// Per-horizon and averaged MAE / RMSE / zero-masked MAPE of `[W, T, N]`
/// predictions against same-shaped truths.
pub fn compute_metrics(predictions: &Tensor, truths: &Tensor) -> MetricsReport {
    assert_eq!(predictions.shape(), truths.shape());
    assert_eq!(predictions.rank(), 3);
    let (w, t_out, nodes) = (
        predictions.shape()[0],
        predictions.shape()[1],
        predictions.shape()[2],
    );
    let mut abs_sum = vec![0.0; t_out];
    let mut sq_sum = vec![0.0; t_out];
    let mut count = vec![0usize; t_out];
    let mut ape_sum = vec![0.0; t_out];
    let mut ape_count = vec![0usize; t_out];
    let mut masked = 0usize;
    for wi in 0..w {
        for t in 0..t_out {
            for n in 0..nodes {
                let p = predictions.at3(wi, t, n);
                let truth = truths.at3(wi, t, n);
                let err = (p - truth).abs();
                abs_sum[t] += err;
                sq_sum[t] += err * err;
                count[t] += 1;
                if truth == 0.0 {
                    masked += 1;
                } else {
                    ape_sum[t] += err / truth.abs();
                    ape_count[t] += 1;
                }
            }
        }
    }
    let horizon = |t: usize| -> HorizonMetrics {
        HorizonMetrics {
            mae: abs_sum[t] / count[t] as f64,
            rmse: (sq_sum[t] / count[t] as f64).sqrt(),
            mape: if ape_count[t] > 0 {
                Some(100.0 * ape_sum[t] / ape_count[t] as f64)
            } else {
                None
            },
        }
    };
    let per_horizon: Vec<HorizonMetrics> = (0..t_out).map(horizon).collect();
    let total_count: usize = count.iter().sum();
    let total_ape: usize = ape_count.iter().sum();
    let average = HorizonMetrics {
        mae: abs_sum.iter().sum::<f64>() / total_count as f64,
        rmse: (sq_sum.iter().sum::<f64>() / total_count as f64).sqrt(),
        mape: if total_ape > 0 {
            Some(100.0 * ape_sum.iter().sum::<f64>() / total_ape as f64)
        } else {
            None
        },
    };
    MetricsReport {
        per_horizon,
        average,
        samples: w,
        masked_zeros: masked,
        identity_stats_used: false,
    }
}

/// Evaluate a trained state on a window list: per-horizon and averaged MAE,
/// RMSE, and zero-masked MAPE, all in original units.
pub fn evaluate(
    config: &ModelConfig,
    state: &ModelState,
    windows: &[ForecastWindow],
    scaler: &Scaler,
    batch_size: usize,
) -> Result<MetricsReport> {
    assert!(!windows.is_empty(), "no evaluation windows");
    let (preds, truths, identity_stats) =
        predictions_over(config, state, windows, scaler, batch_size)?;
    let mut report = compute_metrics(&preds, &truths);
    report.identity_stats_used = identity_stats;
    Ok(report)
}

/// MAE of always predicting the mean target value of `windows` (reference
/// point for the overfit smoke check).
pub fn mean_predictor_mae(windows: &[ForecastWindow]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for w in windows {
        sum += w.y.data().iter().sum::<f64>();
        count += w.y.numel();
    }
    let mean = sum / count as f64;
    let mut abs = 0.0;
    for w in windows {
        abs += w.y.data().iter().map(|v| (v - mean).abs()).sum::<f64>();
    }
    abs / count as f64
}

// ── win point ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinPoint {
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
}

impl WinPoint {
    pub fn total(&self) -> usize {
        self.wins_a + self.wins_b + self.ties
    }

    /// Count difference over total, as a percentage.
    pub fn win_percentage(&self) -> f64 {
        100.0 * (self.wins_a as f64 - self.wins_b as f64) / self.total() as f64
    }
}

/// Per entry, the model with the strictly smaller absolute error scores one
/// point; exact ties score neither.
pub fn win_point(pred_a: &Tensor, pred_b: &Tensor, truth: &Tensor) -> WinPoint {
    assert_eq!(pred_a.shape(), pred_b.shape());
    assert_eq!(pred_a.shape(), truth.shape());
    let mut wp = WinPoint {
        wins_a: 0,
        wins_b: 0,
        ties: 0,
    };
    for ((&a, &b), &y) in pred_a.data().iter().zip(pred_b.data()).zip(truth.data()) {
        let ea = (a - y).abs();
        let eb = (b - y).abs();
        if ea < eb {
            wp.wins_a += 1;
        } else if eb < ea {
            wp.wins_b += 1;
        } else {
            wp.ties += 1;
        }
    }
    wp
}
