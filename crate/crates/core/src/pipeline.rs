//! The staged training loop: score training on the current kernel, then
//! (every `update_every` stages) backward simulation and SA updates of the
//! drift. With `adaptive = false` the drift stays at `A ≡ 0` and the same
//! loop trains the SGM baseline.

use ndarray::Array2;
use rand::RngCore;

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::RunConfig;
use crate::drift::DriftMatrixGrid;
use crate::error::{Result, VsdmError};
use crate::kernel::KernelTable;
use crate::par::Exec;
use crate::rng::{stream_rng, Purpose};
use crate::sampler::{sample_batch, SampleBatch, SampleMode, SamplerSetup};
use crate::schedule::BetaSchedule;
use crate::score::{train_round, ScoreModel, TrainState};
use crate::variational::{CellMoments, VariationalScore};

/// Diagnostics emitted at the end of every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: u64,
    pub rounds_done: u64,
    pub mean_loss: f64,
    pub last_loss: f64,
    pub sa_updated: bool,
    /// Cell-averaged diagonal of the effective `D`, times `β_max`.
    pub d_scale: Vec<f64>,
    /// Same for the raw (unaveraged) iterate.
    pub raw_d_scale: Vec<f64>,
    pub min_eigenvalue: f64,
}

/// One SA step inside an update.
#[derive(Clone, Debug, PartialEq)]
pub struct SaRecord {
    pub sa_step: u64,
    pub stage: u64,
    pub change_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Stage(StageRecord),
    Sa(SaRecord),
}

pub struct Trainer {
    config: RunConfig,
    model: ScoreModel,
    state: TrainState,
    vs: VariationalScore,
    progress: Progress,
    exec: Exec,
    table: Option<KernelTable>,
}

/// Independent seed for a numbered consumer.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    stream_rng(seed, purpose, index).next_u64()
}

impl Trainer {
    pub fn new(config: RunConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let mut model = ScoreModel::new(config.layout(), config.schedule.horizon, config.seed)?;
        if config.train.ema_rate > 0.0 {
            model.enable_ema(config.train.ema_rate);
        }
        let state = TrainState::new(&model, &config.train);
        let d = &config.drift;
        let vs = VariationalScore::isotropic(
            config.data.dim(),
            d.mode,
            config.schedule.steps,
            d.parametrization,
            d.lambda_min,
            d.averaging,
        )?;
        Ok(Trainer {
            config,
            model,
            state,
            vs,
            progress: Progress::default(),
            exec,
            table: None,
        })
    }

    pub fn resume(ckpt: Checkpoint, exec: Exec) -> Result<Self> {
        ckpt.config.validate()?;
        if ckpt.model.layout() != &ckpt.config.layout() {
            return Err(VsdmError::Checkpoint("model layout does not match the embedded config".into()));
        }
        if ckpt.variational.grid().cells() != ckpt.config.schedule.steps {
            return Err(VsdmError::Checkpoint("drift grid does not match the schedule".into()));
        }
        Ok(Trainer {
            state: TrainState {
                adam: ckpt.adam,
                rounds_done: ckpt.progress.rounds_done,
            },
            config: ckpt.config,
            model: ckpt.model,
            vs: ckpt.variational,
            progress: ckpt.progress,
            exec,
            table: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    pub fn variational(&self) -> &VariationalScore {
        &self.vs
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn is_done(&self) -> bool {
        self.progress.stage >= self.config.drift.stages as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.state.adam.clone(),
            variational: self.vs.clone(),
            progress: self.progress,
        }
    }

    fn table(&mut self) -> Result<&KernelTable> {
        if self.table.is_none() {
            self.table = Some(KernelTable::build(&self.config.schedule, &self.vs.effective_drift_grid())?);
        }
        Ok(self.table.as_ref().expect("just built"))
    }

    fn stage_record(&self, sa_updated: bool) -> StageRecord {
        let bmax = self.config.schedule.beta_max;
        let rounds = self.progress.round_in_stage.max(1) as f64;
        StageRecord {
            stage: self.progress.stage,
            rounds_done: self.progress.rounds_done,
            mean_loss: self.progress.stage_loss_sum / rounds,
            last_loss: self.progress.last_loss,
            sa_updated,
            d_scale: self.vs.effective_drift_grid().mean_diagonal_scale(bmax),
            raw_d_scale: self.vs.grid().mean_diagonal_scale(bmax),
            min_eigenvalue: self.vs.grid().min_eigenvalue(),
        }
    }

    /// Simulate backward trajectories with the current score and run the
    /// configured SA steps on their per-cell moments.
    fn sa_update(&mut self, sink: &mut dyn FnMut(Event) -> Result<()>) -> Result<()> {
        let cfg = self.config.drift.clone();
        let seed = derive_seed(self.config.seed, Purpose::Variational, self.progress.sa_updates);
        let grid = self.vs.effective_drift_grid();
        let exec = self.exec;
        let table = self.table()?.clone();
        let setup = SamplerSetup {
            table: &table,
            drift: &grid,
            exec,
        };
        let batch = sample_batch(cfg.sa_batch, SampleMode::Sde, &setup, &self.model.averaged(), seed, true)?;
        let moments = cell_moments(&batch, &self.config.schedule)?;
        let changes = self.vs.stage_update(&moments, cfg.zeta, &cfg.step, cfg.a_iters_per_stage)?;
        let first = self.progress.sa_updates * cfg.a_iters_per_stage as u64;
        for (i, c) in changes.into_iter().enumerate() {
            sink(Event::Sa(SaRecord {
                sa_step: first + i as u64 + 1,
                stage: self.progress.stage,
                change_norm: c,
            }))?;
        }
        self.progress.sa_updates += 1;
        self.table = None;
        Ok(())
    }

    /// Train until every stage is done or `budget` more rounds have run.
    /// Returns whether training is complete.
    pub fn run(&mut self, budget: Option<u64>, sink: &mut dyn FnMut(Event) -> Result<()>) -> Result<bool> {
        let rounds = self.config.train.rounds as u64;
        let mut left = budget.unwrap_or(u64::MAX);
        while !self.is_done() {
            let todo = (rounds - self.progress.round_in_stage).min(left);
            if todo > 0 {
                let train_cfg = self.config.train.clone();
                let data = self.config.data.clone();
                self.table()?;
                let table = self.table.as_ref().expect("built");
                let losses = train_round(&mut self.model, &mut self.state, table, &data, &train_cfg, todo as usize)
                    .map_err(|e| stage_context(e, self.progress.stage))?;
                self.progress.round_in_stage += todo;
                self.progress.rounds_done = self.state.rounds_done;
                for l in &losses {
                    self.progress.stage_loss_sum += l;
                }
                self.progress.last_loss = *losses.last().expect("todo > 0");
                left -= todo;
            }
            if self.progress.round_in_stage < rounds {
                return Ok(false);
            }
            let d = &self.config.drift;
            let due = d.adaptive && (self.progress.stage + 1) % d.update_every as u64 == 0;
            if due {
                self.sa_update(sink).map_err(|e| stage_context(e, self.progress.stage))?;
            }
            sink(Event::Stage(self.stage_record(due)))?;
            self.progress.stage += 1;
            self.progress.round_in_stage = 0;
            self.progress.stage_loss_sum = 0.0;
        }
        Ok(true)
    }
}

fn stage_context(e: VsdmError, stage: u64) -> VsdmError {
    match e {
        VsdmError::Training(m) => VsdmError::Training(format!("stage {stage}: {m}")),
        VsdmError::Sampler(m) => VsdmError::Sampler(format!("stage {stage}: {m}")),
        VsdmError::Kernel(m) => VsdmError::Kernel(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// Per-cell SA moments: cell `c` sees the states and `z = √β s` at node `c + 1`.
pub fn cell_moments(batch: &SampleBatch, schedule: &BetaSchedule) -> Result<Vec<CellMoments>> {
    let states = batch.states.as_ref().ok_or_else(|| VsdmError::Sampler("SA needs recorded states".into()))?;
    let scores = batch.scores.as_ref().ok_or_else(|| VsdmError::Sampler("SA needs recorded scores".into()))?;
    (0..schedule.steps)
        .map(|c| {
            let n = c + 1;
            let beta = schedule.beta_node(n);
            let z: Array2<f64> = &scores[n] * beta.sqrt();
            CellMoments::from_batch(states[n].view(), z.view(), beta)
        })
        .collect()
}

/// Draw samples from a trained model on a grid of `nfe` steps (0 keeps the
/// training grid).
pub fn generate(
    config: &RunConfig,
    model: &ScoreModel,
    drift: &DriftMatrixGrid,
    mode: SampleMode,
    count: usize,
    nfe: usize,
    seed: u64,
    record: bool,
    exec: Exec,
) -> Result<(SampleBatch, BetaSchedule)> {
    let steps = if nfe == 0 { config.schedule.steps } else { nfe };
    let schedule = BetaSchedule {
        steps,
        ..config.schedule.clone()
    };
    schedule.validate()?;
    let grid = drift.resample(steps);
    let table = KernelTable::build(&schedule, &grid)?;
    let setup = SamplerSetup {
        table: &table,
        drift: &grid,
        exec,
    };
    let batch = sample_batch(count, mode, &setup, &model.averaged(), seed, record)?;
    Ok((batch, schedule))
}
