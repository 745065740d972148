//! Adam, the training loop and its CSV log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{sample_indices, TrainingSet};
use crate::error::{Error, Result};
use crate::losses::{ring_pairing, total_loss, EmaRef, LossConfig, LossValues, VideoLossState};
use crate::model::{BoundModel, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// 2000 at desk scale; the full-size setting is 20000.
    pub iterations: usize,
    pub batch_size: usize,
    /// 1e-2 at desk scale, 1e-4 for the full 20k-iteration schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Drives batch sampling and pairing.
    pub seed: u64,
    pub loss: LossConfig,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 10,
            lr: 1e-2,
            weight_decay: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// 20k iterations at lr 1e-4, as used with real features.
    pub fn full_scale() -> Self {
        Self {
            iterations: 20_000,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.adam_eps];
        let betas = [self.adam_beta1, self.adam_beta2];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite()))
            || betas.iter().any(|&b| !(0.0..1.0).contains(&b))
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::Config(format!(
                "train needs lr, eps > 0, betas in [0, 1), weight_decay >= 0; got {self:?}"
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be positive".into()));
        }
        if self.loss.needs_pairs() && self.batch_size < 2 {
            return Err(Error::Config(
                "the discriminative loss pairs videos and needs batch_size >= 2".into(),
            ));
        }
        self.loss.validate()
    }
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            first_moment: ModelParams::zeros(config),
            second_moment: ModelParams::zeros(config),
            step: 0,
        }
    }
}

/// One Adam update with coupled L2 weight decay (`g + wd·θ`).
///
/// Gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and state untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (g, name) in grads.arrays().iter().zip(ModelParams::names()) {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let moments = state
        .first_moment
        .arrays_mut()
        .into_iter()
        .zip(state.second_moment.arrays_mut());
    for ((theta, g), (m, v)) in params.arrays_mut().into_iter().zip(grads.arrays()).zip(moments) {
        let theta = theta.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..theta.len() {
            let gi = g.as_slice()[i] + cfg.weight_decay * theta[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    #[serde(flatten)]
    pub losses: LossValues,
}

pub const LOG_HEADER: &str = "iteration,L_Dis,L_DS,L_DV,total";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, l.discriminative, l.snippet, l.video, l.total
        );
    }
    out
}

/// Model, optimizer and reference embedding between iterations.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub ema: EmaRef,
    pub iteration: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        Ok(Self {
            params: ModelParams::init(model)?,
            optimizer: OptimizerState::new(model),
            ema: EmaRef::new(model.embedding_dim()),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model: model.clone(),
            config: config.clone(),
        })
    }

    fn check_data(&self, set: &TrainingSet) -> Result<()> {
        if set.feature_dim != self.model.feature_dim || set.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "model expects d={} C={}, data has d={} C={}",
                self.model.feature_dim, self.model.num_classes, set.feature_dim, set.num_classes
            )));
        }
        if self.config.batch_size > set.len() {
            return Err(Error::Config(format!(
                "batch size {} exceeds {} training videos",
                self.config.batch_size,
                set.len()
            )));
        }
        Ok(())
    }

    /// Sample a batch, take one optimizer step, update the reference embedding.
    pub fn step(&mut self, set: &TrainingSet) -> Result<LogRow> {
        self.check_data(set)?;
        let loss_cfg = &self.config.loss;
        let batch = sample_indices(set.len(), self.config.batch_size, &mut self.rng)?;
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, &self.model, &self.params, true);
        let mut states = Vec::with_capacity(batch.len());
        for &i in &batch {
            let video = &set.videos[i];
            let forward = bound.forward(&mut tape, &video.rgb, &video.flow)?;
            states.push(VideoLossState::new(
                &mut tape,
                forward,
                video.labels.clone(),
                &self.ema,
                loss_cfg,
            )?);
        }
        let pairing = if loss_cfg.needs_pairs() {
            ring_pairing(states.len(), &mut self.rng)
        } else {
            Vec::new()
        };
        let breakdown = total_loss(&mut tape, &states, &pairing, loss_cfg)?;
        let iteration = self.iteration as usize + 1;
        let losses = breakdown.values(&tape);
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        tape.backward(breakdown.total)?;
        for &v in &breakdown.denoising.label_vars {
            debug_assert!(
                !tape.requires_grad(v) && tape.grad(v).as_slice().iter().all(|&g| g == 0.0),
                "gradient reached a label matrix"
            );
        }
        let grads = bound.gradients(&tape);
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config)?;
        let backgrounds: Vec<Vec<f64>> = states
            .iter()
            .map(|s| tape.value(s.pooled.x_bg).as_slice().to_vec())
            .collect();
        self.ema.update(&backgrounds)?;
        self.iteration += 1;
        if breakdown.denoising.skipped_snippet > 0 {
            debug!(
                "iteration {iteration}: {} videos without a valid snippet joint",
                breakdown.denoising.skipped_snippet
            );
        }
        Ok(LogRow { iteration, losses })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            ema: self.ema.clone(),
            iteration: self.iteration,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "model.d2ck";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Runs `cfg.iterations` steps. With an output directory, writes
/// `model.d2ck` at the configured cadence and at the end (intermediate ones
/// as `model_<iter>.d2ck`) plus `train_log.csv`.
pub fn train(
    set: &TrainingSet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.check_data(set)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    let report_every = (cfg.iterations / 10).max(1);
    for _ in 0..cfg.iterations {
        let row = trainer.step(set)?;
        if row.iteration % report_every == 0 {
            info!(
                "iter {:>6}  L_Dis {:.5}  L_DS {:.5}  L_DV {:.5}  total {:.5}",
                row.iteration,
                row.losses.discriminative,
                row.losses.snippet,
                row.losses.video,
                row.losses.total
            );
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && row.iteration % cfg.checkpoint_every == 0
                && row.iteration != cfg.iterations
            {
                let path = dir.join(format!("model_{:06}.d2ck", row.iteration));
                trainer.checkpoint().save(&path)?;
            }
        }
        log.push(row);
    }
    if !trainer.params.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        write_log(&dir.join(LOG_FILE), &log)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(PathBuf::from(path), e))
}
