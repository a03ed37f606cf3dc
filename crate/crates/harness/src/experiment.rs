//! Pretraining, sequential fine-tuning, the retraining baseline and the
//! uncertainty study.

use std::collections::VecDeque;
use std::time::Instant;

use kbt_core::bayes_head::{forward, init_head, input_state, predict, MeanPredictor, WeightState};
use kbt_core::control::{
    generate_samples, lqr_for, success_rate, ControlSample, LqrGain, PendulumParams, PendulumState,
};
use kbt_core::seqmodel::{
    accuracy, decode_argmax, preprocess_pair, pretrain, state_representation, ActionDataset, PretrainConfig,
    TransformerModel, SOS,
};
use kbt_core::smoother::{sequential_update, MeasurementModel};
use kbt_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::baseline::{HeadExample, HeadMlp};
use crate::config::{BaselineScope, ExperimentConfig};
use crate::metrics::{moving_average, MetricsRow};

/// Environment variable selecting the number of worker threads for trials.
pub const WORKERS_ENV: &str = "KBT_WORKERS";

// Independent random streams derived from (seed, trial).
const STREAM_PRETRAIN_DATA: u64 = 0;
const STREAM_HELDOUT: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_TRAINING: u64 = 3;
const STREAM_NOISE: u64 = 4;

pub fn rng_for(seed: u64, trial: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial as u64) << 8 | stream);
    rng
}

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|n| *n >= 1).unwrap_or(1)
}

/// Run `f` for every trial on the configured worker pool, keeping trial
/// order in the output.
pub fn run_trials<T, F>(trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..trials).into_par_iter().map(&f).collect())
}

/// FIFO of raw training pairs that refuses to exceed its capacity and
/// records the largest size it reached.
#[derive(Debug, Clone)]
pub struct SampleBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
    high_water: usize,
}

impl<T> SampleBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { items: VecDeque::with_capacity(capacity), capacity, high_water: 0 }
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        if self.items.len() >= self.capacity {
            return Err(Error::Domain(format!("sample buffer of capacity {} is full", self.capacity)));
        }
        self.items.push_back(item);
        self.high_water = self.high_water.max(self.items.len());
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn high_water(&self) -> usize {
        self.high_water
    }
}

/// LQR gains of both plants.
#[derive(Debug, Clone)]
pub struct Gains {
    pub nominal: LqrGain,
    pub shifted: LqrGain,
}

impl Gains {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            nominal: lqr_for(&cfg.nominal, cfg.q_diag, cfg.r)?,
            shifted: lqr_for(&cfg.shifted, cfg.q_diag, cfg.r)?,
        })
    }
}

/// Success rate of the full transformer, decoding the argmax token.
pub fn transformer_success(cfg: &ExperimentConfig, model: &TransformerModel, params: &PendulumParams) -> Result<f64> {
    success_rate(params, &cfg.success, |s: &PendulumState| {
        let p = model.predict_probs(&[s.to_array()], &[SOS])?;
        Ok(decode_argmax(&cfg.tokenizer, p.row(0).transpose().as_slice()))
    })
}

/// Success rate of a head applied to the frozen representations.
pub fn head_success<F>(
    cfg: &ExperimentConfig,
    model: &TransformerModel,
    params: &PendulumParams,
    head: F,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    success_rate(params, &cfg.success, |s: &PendulumState| {
        let h = state_representation(model, &s.to_array())?;
        Ok(decode_argmax(&cfg.tokenizer, head(&h)?.as_slice()))
    })
}

pub fn bayes_head_success(cfg: &ExperimentConfig, model: &TransformerModel, w: &WeightState) -> Result<f64> {
    let mp = MeanPredictor::new(w, &cfg.head_config())?;
    head_success(cfg, model, &cfg.shifted, |h| mp.predict(h))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: TransformerModel,
    pub train: ActionDataset,
    pub epoch_loss: Vec<f64>,
    pub heldout_accuracy: f64,
    pub nominal_success: f64,
    pub shifted_success: f64,
}

/// Pretrain on i.i.d. nominal LQR samples and evaluate on held-out data and
/// both plants.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let gains = Gains::new(cfg)?;
    let train = generate_samples(
        &gains.nominal,
        cfg.pretrain_samples,
        &cfg.sampler,
        None,
        &mut rng_for(cfg.seed, 0, STREAM_PRETRAIN_DATA),
    )?;
    let heldout = generate_samples(
        &gains.nominal,
        cfg.pretrain_heldout,
        &cfg.sampler,
        None,
        &mut rng_for(cfg.seed, 0, STREAM_HELDOUT),
    )?;
    let train = ActionDataset::from_samples(&train, &cfg.tokenizer)?;
    let heldout = ActionDataset::from_samples(&heldout, &cfg.tokenizer)?;
    let init = TransformerModel::new(cfg.transformer_config(), cfg.seed)?;
    let pc = PretrainConfig { seed: cfg.seed, ..cfg.pretrain };
    let report = pretrain(&init, &train.pairs(), &pc)?;
    let model = report.model;
    Ok(PretrainOutcome {
        heldout_accuracy: accuracy(&model, &heldout.pairs())?,
        nominal_success: transformer_success(cfg, &model, &cfg.nominal)?,
        shifted_success: transformer_success(cfg, &model, &cfg.shifted)?,
        model,
        train,
        epoch_loss: report.epoch_loss,
    })
}

/// Metrics and bookkeeping of one fine-tuning trial.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    /// Wall time of every processed sample, in seconds.
    pub sample_times: Vec<f64>,
    pub buffer_high_water: usize,
    pub retrain_events: usize,
}

impl RunOutput {
    pub fn success_series(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.success_rate).collect()
    }

    pub fn mean_time(&self) -> f64 {
        self.sample_times.iter().sum::<f64>() / self.sample_times.len().max(1) as f64
    }
}

fn with_sample(e: Error, i: usize) -> Error {
    match e {
        Error::NumericalBreakdown { layer, message } => {
            Error::NumericalBreakdown { layer, message: format!("sample {i}: {message}") }
        }
        other => other,
    }
}

fn shifted_sample(cfg: &ExperimentConfig, gains: &Gains, rng: &mut ChaCha8Rng) -> Result<ControlSample> {
    Ok(generate_samples(&gains.shifted, 1, &cfg.sampler, None, rng)?[0])
}

/// Drives the evaluation cadence and per-window timing of a trial.
struct Recorder {
    method: String,
    trial: usize,
    every: usize,
    n: usize,
    rows: Vec<MetricsRow>,
    times: Vec<f64>,
}

impl Recorder {
    fn new(method: String, trial: usize, cfg: &ExperimentConfig, initial_success: f64) -> Self {
        let mut row = MetricsRow::new(&method, trial, 0);
        row.success_rate = Some(initial_success);
        Self { method, trial, every: cfg.eval_every, n: cfg.n_samples, rows: vec![row], times: Vec::new() }
    }

    fn due(&self) -> bool {
        let i = self.times.len();
        i % self.every == 0 || i == self.n
    }

    fn record(&mut self, success: f64) {
        let i = self.times.len();
        let last = self.rows.last().map(|r| r.samples_seen).unwrap_or(0);
        let window = &self.times[last..i];
        let mut row = MetricsRow::new(&self.method, self.trial, i);
        row.success_rate = Some(success);
        row.time_per_sample_s = Some(window.iter().sum::<f64>() / window.len().max(1) as f64);
        self.rows.push(row);
    }
}

/// Sequential Bayesian fine-tuning of the head on shifted-plant samples, one
/// at a time.
pub fn run_proposed(cfg: &ExperimentConfig, model: &TransformerModel, trial: usize) -> Result<RunOutput> {
    let gains = Gains::new(cfg)?;
    let hc = cfg.head_config();
    let mut w = init_head(&hc, &model.w_o())?;
    let mut rng = rng_for(cfg.seed, trial, STREAM_SAMPLES);
    let mut buffer = SampleBuffer::new(1);
    let mut rec = Recorder::new("proposed".into(), trial, cfg, bayes_head_success(cfg, model, &w)?);
    for i in 1..=cfg.n_samples {
        let s = shifted_sample(cfg, &gains, &mut rng)?;
        let start = Instant::now();
        buffer.push(s)?;
        let y = [SOS, cfg.tokenizer.tokenize(s.action)?];
        let batch = preprocess_pair(model, &cfg.tokenizer, &[s.state.to_array()], &y)?;
        let m = MeasurementModel::one_hot(&batch.y_hat, cfg.finetune_sigma_data)?;
        w = sequential_update(&w, &batch.h_hat, &m, &hc, cfg.update_mode).map_err(|e| with_sample(e, i))?;
        buffer.clear();
        rec.times.push(start.elapsed().as_secs_f64());
        if rec.due() {
            rec.record(bayes_head_success(cfg, model, &w)?);
        }
    }
    Ok(RunOutput { rows: rec.rows, sample_times: rec.times, buffer_high_water: buffer.high_water(), retrain_events: 0 })
}

pub fn baseline_label(scope: BaselineScope, capacity: usize) -> String {
    match scope {
        BaselineScope::Head => format!("baseline_c{capacity}"),
        BaselineScope::Full => format!("baseline_full_c{capacity}"),
    }
}

enum Learner {
    Head(HeadMlp),
    Full(TransformerModel),
}

impl Learner {
    fn success(&self, cfg: &ExperimentConfig, frozen: &TransformerModel) -> Result<f64> {
        match self {
            Learner::Head(mlp) => {
                head_success(cfg, frozen, &cfg.shifted, |h| Ok(mlp.predict(&DVector::from_column_slice(h))))
            }
            Learner::Full(m) => transformer_success(cfg, m, &cfg.shifted),
        }
    }
}

/// Warm-started gradient retraining on a FIFO buffer of `capacity`
/// samples; each time the buffer fills it is trained on for
/// `baseline_epochs` epochs and then emptied.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    model: &TransformerModel,
    trial: usize,
    capacity: usize,
) -> Result<RunOutput> {
    if capacity == 0 {
        return Err(Error::Config("memory capacity must be positive".into()));
    }
    let gains = Gains::new(cfg)?;
    let mut learner = match cfg.baseline_scope {
        BaselineScope::Head => {
            Learner::Head(HeadMlp::from_weights(&init_head(&cfg.head_config(), &model.w_o())?, &cfg.head_config())?)
        }
        BaselineScope::Full => Learner::Full(model.clone()),
    };
    let mut rng = rng_for(cfg.seed, trial, STREAM_SAMPLES);
    let mut train_rng = rng_for(cfg.seed, trial, STREAM_TRAINING);
    let mut buffer: SampleBuffer<(ControlSample, usize, Option<DVector<f64>>)> = SampleBuffer::new(capacity);
    let mut events = 0;
    let label = baseline_label(cfg.baseline_scope, capacity);
    let mut rec = Recorder::new(label, trial, cfg, learner.success(cfg, model)?);
    for _ in 0..cfg.n_samples {
        let s = shifted_sample(cfg, &gains, &mut rng)?;
        let start = Instant::now();
        let token = cfg.tokenizer.tokenize(s.action)?;
        let h = match learner {
            Learner::Head(_) => Some(DVector::from_vec(state_representation(model, &s.state.to_array())?)),
            Learner::Full(_) => None,
        };
        buffer.push((s, token, h))?;
        if buffer.is_full() {
            match &mut learner {
                Learner::Head(mlp) => {
                    let data: Vec<HeadExample> = buffer
                        .items()
                        .map(|(_, t, h)| HeadExample { h: h.clone().expect("head features"), target: *t })
                        .collect();
                    mlp.train(&data, cfg.baseline_epochs, cfg.baseline_lr, cfg.baseline_batch_size, &mut train_rng)?;
                }
                Learner::Full(m) => {
                    let data: Vec<([f64; 4], usize)> =
                        buffer.items().map(|(s, t, _)| (s.state.to_array(), *t)).collect();
                    let pc = PretrainConfig {
                        epochs: cfg.baseline_epochs,
                        lr: cfg.baseline_lr,
                        batch_size: cfg.baseline_batch_size,
                        seed: train_rng.gen(),
                    };
                    *m = pretrain(m, &data, &pc)?.model;
                }
            }
            buffer.clear();
            events += 1;
        }
        rec.times.push(start.elapsed().as_secs_f64());
        if rec.due() {
            rec.record(learner.success(cfg, model)?);
        }
    }
    Ok(RunOutput {
        rows: rec.rows,
        sample_times: rec.times,
        buffer_high_water: buffer.high_water(),
        retrain_events: events,
    })
}

/// Fixed probe states for predicted-variance measurements.
pub fn probe_states(cfg: &ExperimentConfig) -> Vec<PendulumState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.uq_probe_seed);
    (0..cfg.uq_probe_states).map(|_| cfg.sampler.sample(&mut rng)).collect()
}

/// Mean over probes of the mean diagonal of the pre-softmax covariance.
pub fn mean_logit_variance(cfg: &ExperimentConfig, w: &WeightState, probes: &[DMatrix<f64>]) -> Result<f64> {
    let hc = cfg.head_config();
    let mut total = 0.0;
    for h in probes {
        let trace = forward(w, &input_state(h, &hc)?, &hc)?;
        total += trace.u.last().expect("at least one layer").cov.diagonal().mean();
    }
    Ok(total / probes.len() as f64)
}

/// Probe representations of [`probe_states`].
pub fn probe_inputs(cfg: &ExperimentConfig, model: &TransformerModel) -> Result<Vec<DMatrix<f64>>> {
    let d = cfg.head_config().d;
    probe_states(cfg)
        .iter()
        .map(|s| Ok(DMatrix::from_row_slice(1, d, &state_representation(model, &s.to_array())?)))
        .collect()
}

/// Mean over probes of the mean diagonal of the predictive covariance.
pub fn mean_predicted_variance(cfg: &ExperimentConfig, w: &WeightState, probes: &[DMatrix<f64>]) -> Result<f64> {
    let hc = cfg.head_config();
    let mut total = 0.0;
    for h in probes {
        let (_, cov) = predict(w, h, &hc)?;
        total += cov.diagonal().mean();
    }
    Ok(total / probes.len() as f64)
}

#[derive(Debug, Clone)]
pub struct UqOutput {
    pub rows: Vec<MetricsRow>,
    /// `(σ, converged variance)`: the final moving-average value.
    pub converged: Vec<(f64, f64)>,
    /// Raw per-iteration series, one per σ.
    pub raw: Vec<Vec<f64>>,
    /// Weights after the last update, one per σ.
    pub final_weights: Vec<WeightState>,
}

/// For every σ in `uq_sigma_data`, fine-tune on targets perturbed by
/// Gaussian noise of covariance σ·I with a matching data covariance, and
/// track the mean predicted variance at the probe states.
pub fn run_uq(cfg: &ExperimentConfig, model: &TransformerModel, trial: usize) -> Result<UqOutput> {
    let gains = Gains::new(cfg)?;
    let hc = cfg.head_config();
    let probes = probe_inputs(cfg, model)?;
    let (start, end) = (cfg.uq_window_start, if cfg.uq_window_end == 0 { usize::MAX } else { cfg.uq_window_end });
    let mut rows = Vec::new();
    let mut converged = Vec::new();
    let mut raws = Vec::new();
    let mut finals = Vec::new();
    for &sigma in &cfg.uq_sigma_data {
        let mut w = init_head(&hc, &model.w_o())?;
        // the same samples for every σ; only the noise differs
        let mut rng = rng_for(cfg.seed, trial, STREAM_SAMPLES);
        let mut noise_rng = rng_for(cfg.seed, trial, STREAM_NOISE);
        let mut raw = Vec::with_capacity(cfg.uq_samples);
        for i in 1..=cfg.uq_samples {
            let s = shifted_sample(cfg, &gains, &mut rng)?;
            let y = [SOS, cfg.tokenizer.tokenize(s.action)?];
            let batch = preprocess_pair(model, &cfg.tokenizer, &[s.state.to_array()], &y)?;
            let mut target = DVector::from_column_slice(batch.y_hat.transpose().as_slice());
            for v in target.iter_mut() {
                *v += sigma.sqrt() * noise_rng.sample::<f64, _>(StandardNormal);
            }
            let m = MeasurementModel::scalar(target, sigma)?;
            w = sequential_update(&w, &batch.h_hat, &m, &hc, cfg.update_mode).map_err(|e| with_sample(e, i))?;
            raw.push(mean_predicted_variance(cfg, &w, &probes)?);
        }
        let ma = moving_average(&raw, cfg.uq_ma_window);
        for (k, v) in raw.iter().enumerate() {
            let it = k + 1;
            if it >= start && it < end {
                let mut row = MetricsRow::new("uq_raw", trial, it);
                row.mean_pred_variance = Some(*v);
                row.sigma_data = Some(sigma);
                rows.push(row);
            }
        }
        for (k, v) in ma.iter().enumerate() {
            // iteration at the end of the averaging window
            let it = k + cfg.uq_ma_window;
            if it >= start && it < end {
                let mut row = MetricsRow::new("uq_ma", trial, it);
                row.mean_pred_variance = Some(*v);
                row.sigma_data = Some(sigma);
                rows.push(row);
            }
        }
        converged.push((sigma, *ma.last().expect("uq.samples ≥ uq.ma_window")));
        raws.push(raw);
        finals.push(w);
    }
    Ok(UqOutput { rows, converged, raw: raws, final_weights: finals })
}
