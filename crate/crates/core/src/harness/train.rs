use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Element;
use crate::data::{
    augment_rotations, fixed_eval_set, load_omniglot, sample_episode, split_classes,
    split_classes_with, synth_glyph_pool, ClassPool, Episode, Section, SplitAssignment, SynthSpec,
};
use crate::error::{Error, Result};
use crate::meta::{IterationMetrics, MetaLearner, MetaState, Order, RunPlan};
use crate::network::Network;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DigestStatus, RngState};
use super::config::{hex, ExperimentConfig, KeepCheckpoints, Precision, Source};
use super::eval::{evaluate, mean_and_std_error, select_top3, EpochSummary, EvalResult};
use super::metrics::{truncate_metrics, MetricsRecord, MetricsWriter};

/// Stream of the episode-sampling generator; stream 0 draws the
/// initialization.
const TRAIN_STREAM: u64 = 1;

/// Class pool and split an experiment samples from.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub pool: ClassPool,
    pub split: SplitAssignment,
}

impl TaskData {
    /// Loads (or generates) the pool, splits base classes, then adds
    /// rotations if configured.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let d = &config.dataset;
        let (pool, split) = match d.source {
            Source::Omniglot => {
                let root = d.root.clone().ok_or_else(|| Error::Ingest {
                    path: PathBuf::new(),
                    msg: format!(
                        "no Omniglot root: set dataset.root or {}",
                        super::config::ENV_DATA_ROOT
                    ),
                })?;
                let pool = load_omniglot(&root, d.image_size, d.instances)?;
                let split = match d.split {
                    Some(counts) => split_classes_with(&pool, counts, d.split_seed)?,
                    None => split_classes(&pool, d.split_seed)?,
                };
                (pool, split)
            }
            Source::Synthetic => {
                let s = &d.synth;
                let spec = SynthSpec {
                    n_classes: s.n_classes,
                    instances: s.instances,
                    image_size: d.image_size,
                    noise: s.noise,
                    jitter: s.jitter,
                    strokes: s.strokes,
                };
                let pool = synth_glyph_pool(&spec, &mut ChaCha8Rng::seed_from_u64(d.split_seed));
                let counts = d
                    .split
                    .ok_or_else(|| Error::Config("synthetic datasets need dataset.split".into()))?;
                let split = split_classes_with(&pool, counts, d.split_seed)?;
                (pool, split)
            }
        };
        let (pool, split) = if d.rotations {
            augment_rotations(&pool, &split)
        } else {
            (pool, split)
        };
        Ok(Self { pool, split })
    }

    pub fn eval_set(&self, config: &ExperimentConfig, section: Section) -> Result<Vec<Episode>> {
        let d = &config.dataset;
        let seed = match section {
            Section::Test => d.eval_seed.wrapping_add(1),
            _ => d.eval_seed,
        };
        fixed_eval_set(
            &self.pool,
            &self.split,
            section,
            d.n_way,
            d.k_shot,
            d.eval_q_targets(),
            seed,
            d.eval_tasks,
        )
    }
}

pub fn build_learner(config: &ExperimentConfig) -> Result<MetaLearner> {
    let net =
        Network::new(config.network_spec()).map_err(|e| Error::Config(format!("network: {e}")))?;
    let plan = RunPlan {
        epochs: config.run.epochs,
        iterations_per_epoch: config.run.iterations_per_epoch,
    };
    MetaLearner::new(net, config.meta.clone(), plan)
}

/// Training loop state for one seed.
pub struct Trainer<T> {
    config: ExperimentConfig,
    learner: MetaLearner,
    data: Arc<TaskData>,
    val: Arc<Vec<Episode>>,
    seed: u64,
    state: MetaState<T>,
    rng: ChaCha8Rng,
    iteration: usize,
    history: Vec<EpochSummary>,
}

impl<T: Element> Trainer<T> {
    pub fn new(
        config: &ExperimentConfig,
        data: Arc<TaskData>,
        val: Arc<Vec<Episode>>,
        seed: u64,
    ) -> Result<Self> {
        let learner = build_learner(config)?;
        let state = learner.init_state(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config: config.clone(),
            learner,
            data,
            val,
            seed,
            state,
            rng,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Continues from `ck`, which must have been written for `config`'s
    /// network and precision.
    pub fn resume(
        config: &ExperimentConfig,
        data: Arc<TaskData>,
        val: Arc<Vec<Episode>>,
        ck: Checkpoint<T>,
    ) -> Result<Self> {
        let mut t = Self::new(config, data, val, ck.seed)?;
        if !ck.state.params.is_compatible(&t.state.params) {
            return Err(Error::Structure(
                "checkpoint parameters do not match the configured network".into(),
            ));
        }
        t.state = ck.state;
        t.rng = ck.rng.restore();
        t.iteration = ck.iteration;
        t.history = ck.history;
        Ok(t)
    }

    pub fn learner(&self) -> &MetaLearner {
        &self.learner
    }

    pub fn state(&self) -> &MetaState<T> {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Completed outer iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.iteration / self.config.run.iterations_per_epoch
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.run.epochs * self.config.run.iterations_per_epoch
    }

    /// True right after the last iteration of an epoch that has not been
    /// evaluated yet.
    pub fn at_epoch_end(&self) -> bool {
        self.iteration > 0
            && self
                .iteration
                .is_multiple_of(self.config.run.iterations_per_epoch)
            && self
                .history
                .last()
                .is_none_or(|h| h.iteration < self.iteration)
    }

    /// Draws the next training task batch from the meta-training classes.
    pub fn sample_batch(&mut self) -> Result<Vec<Episode>> {
        let d = &self.config.dataset;
        (0..self.config.meta.task_batch)
            .map(|_| {
                sample_episode(
                    &self.data.pool,
                    &self.data.split,
                    Section::Train,
                    d.n_way,
                    d.k_shot,
                    d.q_targets,
                    &mut self.rng,
                )
            })
            .collect()
    }

    /// Samples a task batch and runs one outer update. The timing in the
    /// returned metrics excludes sampling.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let tasks = self.sample_batch()?;
        let epoch = self.epoch();
        let m = self
            .learner
            .outer_update(&mut self.state, &tasks, epoch, self.iteration)?;
        self.iteration += 1;
        Ok(m)
    }

    /// Evaluates on the fixed validation set and records the result under
    /// the epoch just completed.
    pub fn end_epoch(&mut self) -> Result<EpochSummary> {
        let r = self.evaluate_on(&self.val)?;
        let s = EpochSummary {
            epoch: (self.iteration - 1) / self.config.run.iterations_per_epoch,
            iteration: self.iteration,
            accuracy: r.accuracy,
            std_error: r.std_error,
            loss: r.loss,
        };
        self.history.push(s);
        Ok(s)
    }

    pub fn evaluate_on(&self, episodes: &[Episode]) -> Result<EvalResult> {
        evaluate(
            &self.learner,
            &[&self.state],
            episodes,
            self.config.meta.eval_steps(),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            config_digest: self.config.digest(),
            seed: self.seed,
            epoch: self.history.len(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            state: self.state.clone(),
            history: self.history.clone(),
        }
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub diverged: bool,
    /// `(epoch, iteration)` of the non-finite loss.
    pub diverged_at: Option<(usize, usize)>,
    pub epochs_completed: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub top3_epochs: Option<[usize; 3]>,
    pub test_accuracy: Option<f64>,
    /// Standard error over the test episodes.
    pub test_std_error: Option<f64>,
    pub ms_per_iter_first_order: Option<f64>,
    pub ms_per_iter_second_order: Option<f64>,
    pub metrics_file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_digest: String,
    pub seeds: Vec<SeedSummary>,
    pub diverged_seeds: usize,
    pub test_accuracy_mean: Option<f64>,
    /// Sample standard deviation of the per-seed test accuracies.
    pub test_accuracy_std_across_seeds: Option<f64>,
    /// Mean of the per-seed standard errors over test episodes.
    pub test_std_error_mean: Option<f64>,
    pub ms_per_iter_first_order: Option<f64>,
    pub ms_per_iter_second_order: Option<f64>,
}

impl RunSummary {
    pub fn all_diverged(&self) -> bool {
        !self.seeds.is_empty() && self.diverged_seeds == self.seeds.len()
    }
}

/// Output directory of one seed.
pub fn seed_dir(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config
        .run
        .out_dir
        .join(&config.name)
        .join(format!("seed{seed}"))
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:04}.ckpt"))
}

/// Hooks for progress reporting.
pub trait Observer {
    fn iteration(&mut self, _seed: u64, _m: &IterationMetrics) {}
    fn epoch(&mut self, _seed: u64, _s: &EpochSummary) {}
    fn diverged(&mut self, _seed: u64, _err: &Error) {}
    fn message(&mut self, _msg: &str) {}
}

pub struct Silent;

impl Observer for Silent {}

/// Trains every configured seed (a single one if `only_seed` is given),
/// ensembles each seed's top-3 validation epochs on the test set, and
/// writes per-seed metrics plus `summary.json`.
pub fn run_training(
    config: &ExperimentConfig,
    only_seed: Option<u64>,
    resume: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<RunSummary> {
    match config.run.precision {
        Precision::F32 => run_training_as::<f32>(config, only_seed, resume, observer),
        Precision::F64 => run_training_as::<f64>(config, only_seed, resume, observer),
    }
}

fn run_training_as<T: Element>(
    config: &ExperimentConfig,
    only_seed: Option<u64>,
    resume: Option<&Path>,
    observer: &mut dyn Observer,
) -> Result<RunSummary> {
    config.validate()?;
    let data = Arc::new(TaskData::prepare(config)?);
    let val = Arc::new(data.eval_set(config, Section::Val)?);
    let resume_ck = match resume {
        Some(path) => {
            let (ck, status) = load_checkpoint::<T>(path, Some(config))?;
            if let DigestStatus::Mismatch { stored, current } = &status {
                observer.message(&format!(
                    "warning: checkpoint config digest {stored} differs from the current config {current}"
                ));
            }
            Some(ck)
        }
        None => None,
    };
    let seeds: Vec<u64> = match (only_seed, &resume_ck) {
        (_, Some(ck)) => vec![ck.seed],
        (Some(s), None) => vec![s],
        (None, None) => config.run.seeds.clone(),
    };
    let mut test: Option<Vec<Episode>> = None;
    let mut summaries = Vec::new();
    let mut resume_ck = resume_ck;
    for seed in seeds {
        let trainer = match resume_ck.take() {
            Some(ck) => Trainer::<T>::resume(config, data.clone(), val.clone(), ck)?,
            None => Trainer::<T>::new(config, data.clone(), val.clone(), seed)?,
        };
        let s = train_seed(config, trainer, &data, &mut test, observer)?;
        summaries.push(s);
    }
    let summary = summarize(config, summaries);
    let path = config.run.out_dir.join(&config.name).join("summary.json");
    std::fs::create_dir_all(path.parent().expect("summary has a parent"))?;
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn train_seed<T: Element>(
    config: &ExperimentConfig,
    mut trainer: Trainer<T>,
    data: &TaskData,
    test: &mut Option<Vec<Episode>>,
    observer: &mut dyn Observer,
) -> Result<SeedSummary> {
    let seed = trainer.seed();
    let dir = seed_dir(config, seed);
    std::fs::create_dir_all(&dir)?;
    let metrics_path = dir.join("metrics.csv");
    if trainer.iteration() == 0 {
        if metrics_path.exists() {
            std::fs::remove_file(&metrics_path)?;
        }
    } else {
        truncate_metrics(&metrics_path, trainer.iteration())?;
    }
    let mut writer = MetricsWriter::open(&metrics_path)?;
    let run_id = config.name.clone();
    let mut timing: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut diverged_at = None;

    while !trainer.is_done() {
        let (epoch, iteration) = (trainer.epoch(), trainer.iteration());
        match trainer.step() {
            Ok(m) => {
                timing[usize::from(m.order == Order::Second)].push(m.wall_ms);
                writer.write(&MetricsRecord::iteration(&run_id, seed, &m))?;
                observer.iteration(seed, &m);
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. })) => {
                let per_step = match &e {
                    Error::Diverged { per_step } => per_step.clone(),
                    _ => Vec::new(),
                };
                writer.write(&MetricsRecord::diverged(
                    &run_id,
                    seed,
                    epoch,
                    iteration,
                    &per_step,
                    &e.to_string(),
                ))?;
                observer.diverged(seed, &e);
                diverged_at = Some((epoch, iteration));
                break;
            }
            Err(e) => return Err(e),
        }
        if trainer.at_epoch_end() {
            let s = trainer.end_epoch()?;
            writer.write(&MetricsRecord::epoch(&run_id, seed, &s))?;
            observer.epoch(seed, &s);
            save_checkpoint(&epoch_checkpoint_path(&dir, s.epoch), &trainer.checkpoint())?;
            if config.run.keep_checkpoints == KeepCheckpoints::Top3 {
                prune_checkpoints(&dir, trainer.history(), s.epoch)?;
            }
        }
    }

    let history = trainer.history().to_vec();
    let best = history.iter().max_by(|a, b| {
        a.accuracy
            .total_cmp(&b.accuracy)
            .then(b.epoch.cmp(&a.epoch))
    });
    let mut summary = SeedSummary {
        seed,
        diverged: diverged_at.is_some(),
        diverged_at,
        epochs_completed: history.len(),
        best_val_accuracy: best.map(|b| b.accuracy),
        best_epoch: best.map(|b| b.epoch),
        top3_epochs: None,
        test_accuracy: None,
        test_std_error: None,
        ms_per_iter_first_order: mean(&timing[0]),
        ms_per_iter_second_order: mean(&timing[1]),
        metrics_file: metrics_path,
    };
    if diverged_at.is_none() && history.len() >= 3 {
        let top = select_top3(&history)?;
        let paths: Vec<PathBuf> = top
            .iter()
            .map(|&e| epoch_checkpoint_path(&dir, e))
            .collect();
        if test.is_none() {
            *test = Some(data.eval_set(config, Section::Test)?);
        }
        let r =
            test_with_ensemble::<T>(&paths, test.as_ref().expect("test set drawn"), Some(config))?;
        observer.message(&format!(
            "seed {seed}: top-3 epochs {top:?}, test accuracy {:.4} +- {:.4}",
            r.accuracy, r.std_error
        ));
        summary.top3_epochs = Some(top);
        summary.test_accuracy = Some(r.accuracy);
        summary.test_std_error = Some(r.std_error);
    }
    Ok(summary)
}

/// Keeps the latest epoch and the current top three.
fn prune_checkpoints(dir: &Path, history: &[EpochSummary], latest: usize) -> Result<()> {
    let keep: Vec<usize> = match select_top3(history) {
        Ok(top) => top.to_vec(),
        Err(_) => return Ok(()),
    };
    for h in history {
        if h.epoch != latest && !keep.contains(&h.epoch) {
            let p = epoch_checkpoint_path(dir, h.epoch);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

/// Loads the given checkpoints and evaluates their probability-averaged
/// ensemble.
pub fn test_with_ensemble<T: Element>(
    paths: &[PathBuf],
    episodes: &[Episode],
    current: Option<&ExperimentConfig>,
) -> Result<EvalResult> {
    let mut cks = Vec::new();
    for p in paths {
        cks.push(load_checkpoint::<T>(p, current)?.0);
    }
    let first = cks
        .first()
        .ok_or_else(|| Error::Structure("no checkpoints given".into()))?;
    for ck in &cks[1..] {
        if !ck.state.params.is_compatible(&first.state.params)
            || ck.config.network_spec() != first.config.network_spec()
        {
            return Err(Error::Structure(
                "ensemble checkpoints have different structures".into(),
            ));
        }
    }
    let learner = build_learner(&first.config)?;
    let states: Vec<&MetaState<T>> = cks.iter().map(|c| &c.state).collect();
    evaluate(&learner, &states, episodes, first.config.meta.eval_steps())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn summarize(config: &ExperimentConfig, seeds: Vec<SeedSummary>) -> RunSummary {
    let tests: Vec<f64> = seeds.iter().filter_map(|s| s.test_accuracy).collect();
    let errs: Vec<f64> = seeds.iter().filter_map(|s| s.test_std_error).collect();
    let (m, se) = mean_and_std_error(&tests);
    let firsts: Vec<f64> = seeds
        .iter()
        .filter_map(|s| s.ms_per_iter_first_order)
        .collect();
    let seconds: Vec<f64> = seeds
        .iter()
        .filter_map(|s| s.ms_per_iter_second_order)
        .collect();
    RunSummary {
        run_id: config.name.clone(),
        config_digest: hex(&config.digest()),
        diverged_seeds: seeds.iter().filter(|s| s.diverged).count(),
        test_accuracy_mean: (!tests.is_empty()).then_some(m),
        test_accuracy_std_across_seeds: (!tests.is_empty())
            .then(|| se * (tests.len() as f64).sqrt()),
        test_std_error_mean: mean(&errs),
        ms_per_iter_first_order: mean(&firsts),
        ms_per_iter_second_order: mean(&seconds),
        seeds,
    }
}

#[cfg(test)]
mod tests;
