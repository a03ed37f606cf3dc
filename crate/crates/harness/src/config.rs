//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use kbt_core::bayes_head::HeadConfig;
use kbt_core::control::{PendulumParams, StateSampler, SuccessCriterion};
use kbt_core::seqmodel::{PretrainConfig, Tokenizer, TransformerConfig};
use kbt_core::smoother::MeasurementUpdate;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Unreadable { path: PathBuf, source: std::io::Error },
    #[error("config line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("config: {0}")]
    Constraint(String),
}

/// What the gradient-retraining baseline updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineScope {
    /// Only the head, as a point-estimate MLP of the same architecture.
    Head,
    /// Every transformer parameter.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub trials: usize,
    pub eval_every: usize,
    pub memory_capacities: Vec<usize>,
    pub baseline_epochs: usize,
    pub baseline_lr: f64,
    pub baseline_batch_size: usize,
    pub baseline_scope: BaselineScope,

    pub nominal: PendulumParams,
    pub shifted: PendulumParams,
    pub q_diag: [f64; 4],
    pub r: f64,
    pub sampler: StateSampler,
    pub success: SuccessCriterion,

    pub tokenizer: Tokenizer,
    pub transformer: TransformerConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_samples: usize,
    pub pretrain_heldout: usize,
    pub checkpoint: PathBuf,

    /// Hidden widths of the head; the output width is the vocabulary size.
    pub head_hidden: Vec<usize>,
    pub weight_eps: f64,
    pub input_eps: f64,
    pub update_mode: MeasurementUpdate,
    /// Data covariance scale for the fine-tuning runs.
    pub finetune_sigma_data: f64,

    pub uq_sigma_data: Vec<f64>,
    /// Independently seeded repetitions of the uncertainty study.
    pub uq_runs: usize,
    pub uq_samples: usize,
    pub uq_ma_window: usize,
    /// Iteration window `[start, end)` of the moving-average series that is
    /// reported; `end = 0` means the end of the run.
    pub uq_window_start: usize,
    pub uq_window_end: usize,
    pub uq_probe_states: usize,
    pub uq_probe_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 400,
            trials: 10,
            eval_every: 20,
            memory_capacities: vec![10, 20, 25, 50, 75, 100],
            baseline_epochs: 100,
            baseline_lr: 1e-2,
            baseline_batch_size: 1,
            baseline_scope: BaselineScope::Head,
            nominal: PendulumParams::nominal(),
            shifted: PendulumParams::shifted(),
            q_diag: [1.0, 1.0, 10.0, 1.0],
            r: 0.1,
            sampler: StateSampler::default(),
            success: SuccessCriterion::default(),
            tokenizer: Tokenizer::new(17, 10.0).expect("default tokenizer"),
            transformer: TransformerConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_samples: 20_000,
            pretrain_heldout: 1000,
            checkpoint: PathBuf::from("pretrained.ckpt"),
            head_hidden: vec![32],
            weight_eps: 0.1,
            input_eps: 0.1,
            update_mode: MeasurementUpdate::Fuse,
            finetune_sigma_data: 0.01,
            uq_sigma_data: vec![0.0, 10.0, 20.0, 50.0],
            uq_runs: 3,
            uq_samples: 1500,
            uq_ma_window: 500,
            uq_window_start: 0,
            uq_window_end: 0,
            uq_probe_states: 32,
            uq_probe_seed: 1234,
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| parse_num(s.trim())).collect()
}

fn parse_array4(v: &str) -> Result<[f64; 4], String> {
    let l: Vec<f64> = parse_list(v)?;
    l.try_into().map_err(|_| "expected 4 comma-separated values".to_string())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Unreadable { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Parse on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Invalid {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            c.set(k.trim(), v.trim()).map_err(|message| ConfigError::Invalid { line: i + 1, message })?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let plant = |p: &mut PendulumParams, field: &str| -> Result<(), String> {
            let x = parse_num(v)?;
            match field {
                "m_c" => p.m_c = x,
                "m_p" => p.m_p = x,
                "l_p" => p.l_p = x,
                "g" => p.g = x,
                "dt" => p.dt = x,
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        };
        match key {
            "seed" => self.seed = parse_num(v)?,
            "n_samples" => self.n_samples = parse_num(v)?,
            "trials" => self.trials = parse_num(v)?,
            "eval_every" => self.eval_every = parse_num(v)?,
            "memory_capacities" => self.memory_capacities = parse_list(v)?,
            "baseline_epochs" => self.baseline_epochs = parse_num(v)?,
            "baseline_lr" => self.baseline_lr = parse_num(v)?,
            "baseline_batch_size" => self.baseline_batch_size = parse_num(v)?,
            "baseline_scope" => {
                self.baseline_scope = match v {
                    "head" => BaselineScope::Head,
                    "full" => BaselineScope::Full,
                    _ => return Err(format!("baseline_scope must be `head` or `full`, got `{v}`")),
                }
            }
            "q_diag" => self.q_diag = parse_array4(v)?,
            "r" => self.r = parse_num(v)?,
            "sampler_bounds" => self.sampler.bounds = parse_array4(v)?,
            "success.steps" => self.success.steps = parse_num(v)?,
            "success.theta_limit" => self.success.theta_limit = parse_num(v)?,
            "success.x_limit" => self.success.x_limit = parse_num(v)?,
            "success.theta_final" => self.success.theta_final = parse_num(v)?,
            "success.theta0_range" => self.success.theta0_range = parse_num(v)?,
            "success.n_initial" => self.success.n_initial = parse_num(v)?,
            "tokenizer.bins" => {
                let bins: usize = parse_num(v)?;
                self.tokenizer = Tokenizer::new(bins + 1, self.tokenizer.u_max).map_err(|e| e.to_string())?;
            }
            "tokenizer.u_max" => {
                self.tokenizer = Tokenizer::new(self.tokenizer.d_world, parse_num(v)?).map_err(|e| e.to_string())?;
            }
            "transformer.d_model" => self.transformer.d_model = parse_num(v)?,
            "transformer.n_layers" => self.transformer.n_layers = parse_num(v)?,
            "transformer.n_heads" => self.transformer.n_heads = parse_num(v)?,
            "transformer.d_ff" => self.transformer.d_ff = parse_num(v)?,
            "pretrain.samples" => self.pretrain_samples = parse_num(v)?,
            "pretrain.heldout" => self.pretrain_heldout = parse_num(v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse_num(v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "head.hidden" => self.head_hidden = parse_list(v)?,
            "head.weight_eps" => self.weight_eps = parse_num(v)?,
            "head.input_eps" => self.input_eps = parse_num(v)?,
            "update_mode" => {
                self.update_mode = match v {
                    "fuse" => MeasurementUpdate::Fuse,
                    "assign" => MeasurementUpdate::Assign,
                    _ => return Err(format!("update_mode must be `fuse` or `assign`, got `{v}`")),
                }
            }
            "finetune_sigma_data" => self.finetune_sigma_data = parse_num(v)?,
            "uq.sigma_data" => self.uq_sigma_data = parse_list(v)?,
            "uq.runs" => self.uq_runs = parse_num(v)?,
            "uq.samples" => self.uq_samples = parse_num(v)?,
            "uq.ma_window" => self.uq_ma_window = parse_num(v)?,
            "uq.window_start" => self.uq_window_start = parse_num(v)?,
            "uq.window_end" => self.uq_window_end = parse_num(v)?,
            "uq.probe_states" => self.uq_probe_states = parse_num(v)?,
            "uq.probe_seed" => self.uq_probe_seed = parse_num(v)?,
            _ => {
                if let Some(f) = key.strip_prefix("nominal.") {
                    plant(&mut self.nominal, f)?
                } else if let Some(f) = key.strip_prefix("shifted.") {
                    plant(&mut self.shifted, f)?
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        let d_o = self.tokenizer.d_world;
        let mut widths = self.head_hidden.clone();
        widths.push(d_o);
        HeadConfig {
            d: self.transformer.d_model,
            d_o,
            widths,
            weight_eps: self.weight_eps,
            input_eps: self.input_eps,
            output: kbt_core::bayes_head::OutputActivation::Softmax,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Constraint(m.to_string()));
        if self.n_samples == 0 || self.trials == 0 || self.eval_every == 0 {
            return fail("n_samples, trials and eval_every must be positive");
        }
        if self.memory_capacities.iter().any(|c| *c == 0) {
            return fail("memory capacities must be positive");
        }
        if self.baseline_batch_size == 0 || !(self.baseline_lr >= 0.0 && self.baseline_lr.is_finite()) {
            return fail("baseline batch size must be positive and its step size finite and nonnegative");
        }
        if self.pretrain_samples == 0 || self.pretrain_heldout == 0 {
            return fail("pretraining sample counts must be positive");
        }
        if self.q_diag.iter().any(|q| !(*q >= 0.0)) || !(self.r > 0.0) {
            return fail("LQR weights must be nonnegative with r > 0");
        }
        if self.sampler.bounds.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return fail("sampler bounds must be finite and nonnegative");
        }
        if self.success.n_initial == 0 || self.success.steps == 0 {
            return fail("success criterion needs at least one initial state and one step");
        }
        if !(self.finetune_sigma_data >= 0.0) || self.uq_sigma_data.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return fail("data covariances must be nonnegative");
        }
        if self.uq_runs == 0
            || self.uq_ma_window == 0
            || self.uq_probe_states == 0
            || self.uq_samples < self.uq_ma_window
        {
            return fail(
                "uq.runs, uq.ma_window and uq.probe_states must be positive and uq.samples at least uq.ma_window",
            );
        }
        if self.uq_window_end != 0 && self.uq_window_end <= self.uq_window_start {
            return fail("uq.window_end must exceed uq.window_start");
        }
        let mut tc = self.transformer;
        tc.vocab = self.tokenizer.d_world;
        tc.validate().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        self.nominal.validate().map_err(|e| ConfigError::Constraint(format!("nominal plant: {e}")))?;
        self.shifted.validate().map_err(|e| ConfigError::Constraint(format!("shifted plant: {e}")))?;
        self.head_config().validate_for_init().map_err(|e| ConfigError::Constraint(e.to_string()))?;
        Ok(())
    }

    /// Transformer architecture with the vocabulary matching the tokenizer.
    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig { vocab: self.tokenizer.d_world, ..self.transformer }
    }
}
