//! Training loop, configuration, checkpoints and the ablation suite.

mod ablation;
mod checkpoint;
mod config;
mod dataset;

pub use ablation::{ablation_csv, default_variants, run_ablation_suite, AblationRow, Variant};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::Config;
pub use dataset::{prepare_dataset, worker_count, Dataset, Prepared, Sample, NEUTRAL_FILE, REGIONS_FILE, THREADS_ENV};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::mask_from_init;
use crate::error::{Error, Result};
use crate::fai::{compute_displacements, compute_intensity, normalize_min_max, MaskInit, StftConfig};
use crate::losses::{evaluate_metrics, reconstruction_loss, velocity_loss, LossReport, MetricReport};
use crate::mesh_motion::{MotionSequence, NeutralGeometry, RegionMask};
use crate::model::{Model, ModelConfig};
use crate::numerics::{adam_step, decay_lr, AdamState, Graph, ParamStore};
use crate::scalar::{lit, Scalar};

/// PRNG stream of the random mask initializer, apart from the parameter draws.
const MASK_STREAM: u64 = 1;

/// Position of a run inside its epoch schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub epoch: u64,
    /// Steps already taken in the current epoch.
    pub position: usize,
    pub global_step: u64,
    /// Visit order of the current epoch; empty between epochs.
    pub order: Vec<usize>,
}

/// Losses of one optimizer step, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub index: usize,
    pub sequence: String,
    pub lr: f64,
    /// Values read from the training graph.
    pub graph: LossReport<f64>,
    /// The same terms recomputed from the graph's prediction with the plain loss functions.
    pub recomputed: LossReport<f64>,
}

/// Per-vertex activity averaged over the dataset, then min-max normalized.
pub fn dataset_mask_init<S: Scalar>(
    sequences: &[&MotionSequence<S>],
    neutral: &NeutralGeometry<S>,
    fps: f64,
) -> Result<MaskInit<S>> {
    let cfg = StftConfig::for_fps(fps as f32);
    let mut raw = vec![S::zero(); neutral.num_vertices()];
    for seq in sequences {
        let map = compute_intensity(&compute_displacements(seq, neutral)?, &cfg)?;
        for (r, x) in raw.iter_mut().zip(map.mean_fundamental()) {
            *r += x;
        }
    }
    let n = lit::<S>(sequences.len() as f64);
    let raw: Vec<S> = raw.into_iter().map(|x| x / n).collect();
    Ok(normalize_min_max(&raw))
}

pub struct Trainer<S: Scalar = f64> {
    pub config: Config,
    pub model: Model,
    pub params: ParamStore<S>,
    pub adam: AdamState<S>,
    pub progress: Progress,
    pub log: Vec<StepRecord>,
    pub data: Vec<Prepared<S>>,
    pub neutral: NeutralGeometry<S>,
    pub regions: RegionMask,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    /// Extracts features, initializes the mask and draws the initial parameters from `seed`.
    pub fn new(config: &Config, dataset: &Dataset<S>) -> Result<Self> {
        config.validate()?;
        let data = prepare_dataset(config, dataset, worker_count())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let v = dataset.num_vertices();
        let mask = if config.single_branch {
            None
        } else if config.random_mask_init {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
            mask_rng.set_stream(MASK_STREAM);
            Some(MaskInit { m0: (0..v).map(|_| S::lit(mask_rng.random_range(0.0..1.0))).collect() })
        } else {
            let seqs: Vec<&MotionSequence<S>> = data.iter().map(|p| &p.motion).collect();
            Some(dataset_mask_init(&seqs, &dataset.neutral, config.fps)?)
        };
        let mut params = ParamStore::new();
        let model = Model::register(&mut params, &mut rng, &config.model_config(v), mask.as_ref().map(mask_from_init))?;
        let adam =
            AdamState::new(S::lit(config.base_lr), S::lit(config.beta1), S::lit(config.beta2), S::lit(config.adam_eps));
        Ok(Trainer {
            config: config.clone(),
            model,
            params,
            adam,
            progress: Progress::default(),
            log: Vec::new(),
            data,
            neutral: dataset.neutral.clone(),
            regions: dataset.regions.clone(),
            rng,
        })
    }

    /// Rebuilds a trainer and restores parameters, optimizer, schedule and PRNG from `checkpoint`.
    pub fn resume(checkpoint: &Checkpoint<S>, dataset: &Dataset<S>) -> Result<Self> {
        let config = checkpoint.config()?;
        let mut t = Self::new(&config, dataset)?;
        checkpoint.restore_params(&mut t.params)?;
        t.adam = checkpoint.adam.clone();
        t.progress = checkpoint.progress.clone();
        t.rng = checkpoint.rng.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint::capture(&self.config, &self.params, &self.adam, &self.progress, &self.rng)
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn total_steps(&self) -> u64 {
        let per_epoch = self.config.epochs * self.data.len() as u64;
        if self.config.max_steps > 0 {
            per_epoch.min(self.config.max_steps)
        } else {
            per_epoch
        }
    }

    pub fn finished(&self) -> bool {
        self.progress.global_step >= self.total_steps()
    }

    /// Decoder history for a sequence: ground truth, or the model's own rollout.
    fn history(&self, p: &Prepared<S>) -> Result<MotionSequence<S>> {
        if self.config.autoregressive_training {
            Ok(self.model.synthesize(&self.params, &p.acoustic, &self.neutral, p.style, p.motion.fps)?.motion)
        } else {
            Ok(p.motion.clone())
        }
    }

    /// Teacher-forced losses of one sequence under the current parameters, without updating.
    pub fn sequence_losses(&self, index: usize) -> Result<LossReport<S>> {
        let p = &self.data[index];
        let history = self.history(p)?;
        let mut g = Graph::new();
        let (_, l) = self.model.loss(&mut g, &self.params, &p.acoustic, &history, &p.motion, &self.neutral, p.style)?;
        Ok(LossReport {
            l_rec: g.value(l.l_rec).item(),
            l_vel: g.value(l.l_vel).item(),
            l_total: g.value(l.l_total).item(),
        })
    }

    /// Mean teacher-forced losses over the dataset.
    pub fn dataset_losses(&self) -> Result<LossReport<S>> {
        let n = lit::<S>(self.data.len() as f64);
        let (mut rec, mut vel) = (S::zero(), S::zero());
        for i in 0..self.data.len() {
            let l = self.sequence_losses(i)?;
            rec += l.l_rec;
            vel += l.l_vel;
        }
        Ok(LossReport::new(rec / n, vel / n))
    }

    /// One optimizer step on the next sequence of the schedule.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.progress.order.is_empty() {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut self.rng);
            self.progress.order = order;
            self.progress.position = 0;
            decay_lr(&mut self.adam, self.progress.epoch);
        }
        let index = self.progress.order[self.progress.position];
        let step = self.progress.global_step + 1;
        let p = &self.data[index];
        let non_finite = || Error::NonFiniteLoss { sequence: p.name.clone(), step };
        let history = self.history(p)?;

        let mut g = Graph::new();
        let (fwd, losses) = self
            .model
            .loss(&mut g, &self.params, &p.acoustic, &history, &p.motion, &self.neutral, p.style)
            .map_err(|e| match e {
                Error::NonFinite { .. } => non_finite(),
                e => e,
            })?;
        let graph = LossReport {
            l_rec: g.value(losses.l_rec).item().to_f64_exact(),
            l_vel: g.value(losses.l_vel).item().to_f64_exact(),
            l_total: g.value(losses.l_total).item().to_f64_exact(),
        };
        if !graph.l_total.is_finite() {
            return Err(non_finite());
        }
        let pred = MotionSequence::new(g.value(fwd.pred).clone(), p.motion.fps, p.motion.subject_id)?;
        let mask: Vec<S> = match fwd.mask {
            Some(m) => g.value(m).data().to_vec(),
            None => vec![S::one(); self.neutral.num_vertices()],
        };
        let recomputed = LossReport::new(
            reconstruction_loss(&pred, &p.motion)?.to_f64_exact(),
            velocity_loss(&pred, &p.motion, &mask)?.to_f64_exact(),
        );

        g.backward(losses.l_total).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(),
            e => e,
        })?;
        self.params.zero_grads();
        self.params.accumulate_grads(&g);
        adam_step(&mut self.params, &mut self.adam)?;

        let record = StepRecord {
            epoch: self.progress.epoch,
            step,
            index,
            sequence: p.name.clone(),
            lr: self.adam.lr.to_f64_exact(),
            graph,
            recomputed,
        };
        self.progress.global_step = step;
        self.progress.position += 1;
        if self.progress.position == self.data.len() {
            self.progress.epoch += 1;
            self.progress.position = 0;
            self.progress.order.clear();
        }
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs up to `n` steps, stopping early when the configured run length is reached.
    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Runs until `epochs` (or `max_steps`) is reached.
    pub fn train(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    /// Autoregressive prediction for prepared sequence `index`.
    pub fn predict(&self, index: usize) -> Result<MotionSequence<S>> {
        let p = &self.data[index];
        Ok(self.model.synthesize(&self.params, &p.acoustic, &self.neutral, p.style, p.motion.fps)?.motion)
    }

    /// Dataset-mean metrics of autoregressive predictions.
    pub fn evaluate(&self) -> Result<MetricReport<S>> {
        let n = lit::<S>(self.data.len() as f64);
        let (mut lve, mut fdd) = (S::zero(), S::zero());
        for i in 0..self.data.len() {
            let m = evaluate_metrics(&self.predict(i)?, &self.data[i].motion, &self.neutral, &self.regions)?;
            lve += m.lip_vertex_error;
            fdd += m.fdd;
        }
        Ok(MetricReport { lip_vertex_error: lve / n, fdd: fdd / n })
    }
}

/// One CSV row per step.
pub fn step_log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("epoch,step,sequence,lr,l_rec,l_vel,l_total\n");
    for r in log {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{:e},{:e},{:e}",
            r.epoch, r.step, r.sequence, r.lr, r.graph.l_rec, r.graph.l_vel, r.graph.l_total
        );
    }
    out
}

/// One CSV row per epoch with the loss terms summed over its steps.
pub fn epoch_log_csv(log: &[StepRecord]) -> String {
    let mut out = String::from("epoch,steps,lr,l_rec,l_vel,l_total\n");
    let mut i = 0;
    while i < log.len() {
        let epoch = log[i].epoch;
        let rows: Vec<&StepRecord> = log[i..].iter().take_while(|r| r.epoch == epoch).collect();
        let rec: f64 = rows.iter().map(|r| r.graph.l_rec).sum();
        let vel: f64 = rows.iter().map(|r| r.graph.l_vel).sum();
        let _ = writeln!(out, "{epoch},{},{:e},{:e},{:e},{:e}", rows.len(), rows[0].lr, rec, vel, rec + vel);
        i += rows.len();
    }
    out
}
