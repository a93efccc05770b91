//! Losses, Adam with cosine annealing, the training loop and evaluation.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{Dataset, ImagePair, Task};
use crate::error::{invalid, Error, Result};
use crate::fdmee::NormMode;
use crate::metrics::{psnr, ssim, SSIM_WINDOW};
use crate::model::{Checkpoint, Model, NamedTensor, RngState, TensorKind};
use crate::numerics::{Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "MEAS_THREADS";

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, restored: Var, clean: Var) -> Result<Var> {
    let d = g.sub(restored, clean)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `l1 + λ·balance`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l1: Var, balance: Var, lambda: f64) -> Result<Var> {
    let b = g.scale(balance, T::of(lambda));
    g.add(l1, b)
}

/// `lr0 · ½ · (1 + cos(π·t/T))`, with `t` clamped to `[0, T]`.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = t.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam moments for every entry of a [`ParamStore`]; buffers are skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates taken.
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |id| Tensor::zeros(store.value(id).shape());
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// One update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let i = id.0;
            let grad = store.grad(id).clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for (j, &gj) in grad.data().iter().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// First and second moments named after their parameters.
    pub fn named_moments(&self, store: &ParamStore<T>) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (kind, moments) in [(TensorKind::AdamM, &self.m), (TensorKind::AdamV, &self.v)] {
            for id in store.trainable_ids() {
                out.push(NamedTensor {
                    name: store.name(id).to_owned(),
                    kind,
                    value: moments[id.0].cast(),
                });
            }
        }
        out
    }

    /// Restores moments saved by [`Adam::named_moments`].
    pub fn from_checkpoint(store: &ParamStore<T>, ckpt: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(store);
        adam.t = ckpt.optimizer_t.ok_or_else(|| Error::Corrupt("checkpoint has no optimizer state".into()))?;
        for (kind, slot) in [(TensorKind::AdamM, &mut adam.m), (TensorKind::AdamV, &mut adam.v)] {
            let mut seen = 0;
            for t in ckpt.tensors_of(kind) {
                let id = store
                    .id(&t.name)
                    .filter(|&id| store.is_trainable(id))
                    .ok_or_else(|| Error::Corrupt(format!("optimizer state for unknown parameter `{}`", t.name)))?;
                if t.value.shape() != store.value(id).shape() {
                    return Err(Error::Corrupt(format!("optimizer state `{}` has shape {:?}", t.name, t.value.shape())));
                }
                slot[id.0] = t.value.cast();
                seen += 1;
            }
            if seen != store.trainable_ids().count() {
                return Err(Error::Corrupt(format!("optimizer state covers {seen} of {} parameters", store.trainable_ids().count())));
            }
        }
        Ok(adam)
    }
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .trainable_ids()
        .flat_map(|id| store.grad(id).data().iter().map(|v| v.as_f64().powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients to global norm `max_norm` when above it. Returns the
/// norm before clipping and whether clipping fired.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> (f64, bool) {
    let norm = grad_norm(store);
    if !(norm > max_norm) {
        return (norm, false);
    }
    let s = T::of(max_norm / norm);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        store.grad_mut(id).data_mut().iter_mut().for_each(|v| *v *= s);
    }
    (norm, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer steps; ignored when `epochs` is set.
    pub steps: u64,
    /// Passes over the base images, at `ceil(images / batch_size)` steps each.
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub lr0: f64,
    /// Weight of the balance loss.
    pub lambda: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluate every this many steps (0 = never).
    pub eval_every: u64,
    /// Held-out pairs per task in periodic evaluation.
    pub eval_per_task: usize,
    /// Emit a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            epochs: None,
            batch_size: 4,
            lr0: DEFAULT_LR,
            lambda: DEFAULT_LAMBDA,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            eval_every: 0,
            eval_per_task: 4,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be finite and > 0, got {}", self.lr0));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, images: usize) -> u64 {
        match self.epochs {
            Some(e) => e * images.div_ceil(self.batch_size) as u64,
            None => self.steps,
        }
    }
}

/// Source of training batches.
pub trait PairSource<T>: Sync {
    /// Number of base images (defines an epoch).
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<ImagePair<T>>>;
}

impl<T: Scalar> PairSource<T> for Dataset<T> {
    fn len(&self) -> usize {
        self.images.len()
    }

    /// Samples at random stream indices drawn from `rng`, generated in
    /// parallel.
    fn batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<ImagePair<T>>> {
        let idx: Vec<u64> = (0..size).map(|_| rng.gen()).collect();
        idx.par_iter().map(|&i| self.sample(i)).collect()
    }
}

/// A fixed set of pairs. Batches at least as large as the set return all of
/// it in order; smaller batches are random subsets.
#[derive(Clone, Debug)]
pub struct FixedPairs<T>(pub Vec<ImagePair<T>>);

impl<T: Scalar> PairSource<T> for FixedPairs<T> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<ImagePair<T>>> {
        if self.0.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        if size >= self.0.len() {
            return Ok(self.0.clone());
        }
        Ok(sample(rng, self.0.len(), size).into_iter().map(|i| self.0[i].clone()).collect())
    }
}

/// Stacks the clean and degraded members of a batch.
pub fn stack_pairs<T: Scalar>(pairs: &[ImagePair<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    if pairs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let clean: Vec<_> = pairs.iter().map(|p| p.clean.clone()).collect();
    let degraded: Vec<_> = pairs.iter().map(|p| p.degraded.clone()).collect();
    Ok((Tensor::stack(&clean)?, Tensor::stack(&degraded)?))
}

/// Per-task means over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    pub count: usize,
    pub psnr: f64,
    /// `None` when the images are smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub input_psnr: f64,
    pub input_ssim: Option<f64>,
}

/// Parses a `MEAS_THREADS` value; `None` leaves the pool size to rayon.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

/// Thread pool sized by `MEAS_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = parse_threads(std::env::var(THREADS_ENV).ok().as_deref())? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn maybe_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<f64>> {
    let (_, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        Ok(None)
    } else {
        ssim(a, b).map(Some)
    }
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Restores every pair (eval mode) and averages PSNR/SSIM per task, tasks in
/// [`Task::ALL`] order.
pub fn evaluate<T: Scalar>(model: &Model<T>, pairs: &[ImagePair<T>]) -> Result<Vec<TaskMetrics>> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let pool = thread_pool()?;
    type Scores = (Task, f64, Option<f64>, f64, Option<f64>);
    let per: Vec<Scores> = pool.install(|| {
        pairs
            .par_iter()
            .map(|p| {
                let r = model.restore(&p.degraded)?;
                Ok((
                    p.task,
                    psnr(&r, &p.clean)?,
                    maybe_ssim(&r, &p.clean)?,
                    psnr(&p.degraded, &p.clean)?,
                    maybe_ssim(&p.degraded, &p.clean)?,
                ))
            })
            .collect::<Result<_>>()
    })?;
    Ok(Task::ALL
        .iter()
        .filter_map(|&task| {
            let rows: Vec<_> = per.iter().filter(|r| r.0 == task).collect();
            (!rows.is_empty()).then(|| TaskMetrics {
                task,
                count: rows.len(),
                psnr: rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64,
                ssim: mean_opt(rows.iter().map(|r| r.2)),
                input_psnr: rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64,
                input_ssim: mean_opt(rows.iter().map(|r| r.4)),
            })
        })
        .collect())
}

/// Mean squared activation of the low and high branch inputs per task.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    pub task: Task,
    pub count: usize,
    pub low_energy: f64,
    pub high_energy: f64,
}

/// Low/high energy of the first stage's frequency split, per task.
pub fn spectrum_report<T: Scalar>(model: &Model<T>, pairs: &[ImagePair<T>]) -> Result<Vec<SpectrumRow>> {
    let energy = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / t.len() as f64;
    let per: Vec<(Task, f64, f64)> = pairs
        .iter()
        .map(|p| {
            let mut g = Graph::new();
            let x = g.input(p.degraded.clone());
            let out = model.forward(&mut g, x, NormMode::Eval)?;
            let s = &out.stages[0];
            Ok((p.task, energy(g.value(s.low)), energy(g.value(s.high))))
        })
        .collect::<Result<_>>()?;
    Ok(Task::ALL
        .iter()
        .filter_map(|&task| {
            let rows: Vec<_> = per.iter().filter(|r| r.0 == task).collect();
            let n = rows.len() as f64;
            (!rows.is_empty()).then(|| SpectrumRow {
                task,
                count: rows.len(),
                low_energy: rows.iter().map(|r| r.1).sum::<f64>() / n,
                high_energy: rows.iter().map(|r| r.2).sum::<f64>() / n,
            })
        })
        .collect())
}

pub fn write_spectrum_csv(rows: &[SpectrumRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "task,count,low_energy,high_energy")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{:e}", r.task.as_str(), r.count, r.low_energy, r.high_energy)?;
    }
    Ok(())
}

/// One optimizer step's record. `step` is the 0-based update index; the
/// losses are measured before the update and `eval` after it.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub l1: f64,
    pub balance: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub eval: Vec<TaskMetrics>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl LogRow {
    pub fn csv_header(tasks: &[Task]) -> String {
        let mut h = String::from("step,lr,l1,balance,total,grad_norm,clipped");
        for t in tasks {
            h.push_str(&format!(",{0}_psnr,{0}_ssim", t.as_str()));
        }
        h
    }

    pub fn csv_line(&self, tasks: &[Task]) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.l1, self.balance, self.total, self.grad_norm, self.clipped as u8
        );
        for t in tasks {
            match self.eval.iter().find(|m| m.task == *t) {
                Some(m) => s.push_str(&format!(",{},{}", m.psnr, opt(m.ssim))),
                None => s.push_str(",,"),
            }
        }
        s
    }
}

/// Hooks invoked by [`Trainer::run`].
pub trait Callbacks {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Callbacks for () {}

/// Writes `log.csv` and `step_{n}.meas` checkpoints into a directory.
pub struct OutputDir {
    dir: std::path::PathBuf,
    tasks: Vec<Task>,
    log: std::io::BufWriter<std::fs::File>,
    /// Path of the most recent checkpoint.
    pub last_checkpoint: Option<std::path::PathBuf>,
}

impl OutputDir {
    pub fn create(dir: impl Into<std::path::PathBuf>, tasks: &[Task]) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join("log.csv"))?);
        writeln!(log, "{}", LogRow::csv_header(tasks))?;
        log.flush()?;
        Ok(Self {
            dir,
            tasks: tasks.to_vec(),
            log,
            last_checkpoint: None,
        })
    }
}

impl Callbacks for OutputDir {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.log, "{}", row.csv_line(&self.tasks))?;
        self.log.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let path = self.dir.join(format!("step_{}.meas", ckpt.step));
        ckpt.save(&path)?;
        self.last_checkpoint = Some(path);
        Ok(())
    }
}

/// Model, optimizer and sampling RNG; everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub adam: Adam<T>,
    pub rng: ChaCha8Rng,
    /// Updates taken so far.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(&model.store),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::from_checkpoint(ckpt)?;
        let adam = Adam::from_checkpoint(&model.store, ckpt)?;
        let rng = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Corrupt("checkpoint has no rng state".into()))?
            .restore()?;
        Ok(Self {
            model,
            config,
            adam,
            rng,
            step: ckpt.step,
        })
    }

    /// Parameters, buffers, optimizer moments and RNG position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint(self.step);
        c.rng = Some(RngState::capture(&self.rng));
        c.optimizer_t = Some(self.adam.t);
        c.tensors.extend(self.adam.named_moments(&self.model.store));
        c
    }

    /// Forward, backward, clip and update on one batch.
    pub fn train_step(&mut self, pairs: &[ImagePair<T>], total_steps: u64) -> Result<LogRow> {
        let step = self.step;
        let non_finite = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            e => e,
        };
        let (clean, degraded) = stack_pairs(pairs)?;
        let mut g = Graph::new();
        let x = g.input(degraded);
        let out = self.model.forward(&mut g, x, NormMode::Train).map_err(non_finite)?;
        let target = g.input(clean);
        let l1 = l1_loss(&mut g, out.restored, target)?;
        let total = total_loss(&mut g, l1, out.balance, self.config.lambda)?;
        let value = |v: Var| g.value(v).data()[0].as_f64();
        let (l1v, balv, totv) = (value(l1), value(out.balance), value(total));
        if !totv.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(total).map_err(non_finite)?;
        let store = &mut self.model.store;
        store.zero_grad();
        grads.accumulate_into(store);
        let (norm, clipped) = match self.config.clip_norm {
            Some(c) => clip_grad_norm(store, c),
            None => (grad_norm(store), false),
        };
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = cosine_lr(self.config.lr0, step, total_steps);
        self.adam.step(store, lr);
        self.model.absorb_bn_stats(&out.bn_stats);
        self.step += 1;
        Ok(LogRow {
            step,
            lr,
            l1: l1v,
            balance: balv,
            total: totv,
            grad_norm: norm,
            clipped,
            eval: Vec::new(),
        })
    }

    /// Trains until the configured step count, evaluating and emitting
    /// checkpoints at the configured cadence. The final state is always
    /// emitted as a checkpoint.
    pub fn run(&mut self, source: &dyn PairSource<T>, eval: &[ImagePair<T>], cb: &mut dyn Callbacks) -> Result<Vec<LogRow>> {
        let total = self.config.total_steps(source.len());
        self.run_until(source, eval, total, cb)
    }

    /// Like [`Trainer::run`] but stops after update `stop` (the schedule
    /// still spans the configured total).
    pub fn run_until(
        &mut self,
        source: &dyn PairSource<T>,
        eval: &[ImagePair<T>],
        stop: u64,
        cb: &mut dyn Callbacks,
    ) -> Result<Vec<LogRow>> {
        let total = self.config.total_steps(source.len());
        let stop = stop.min(total);
        let mut log = Vec::new();
        while self.step < stop {
            let batch = source.batch(&mut self.rng, self.config.batch_size)?;
            let mut row = self.train_step(&batch, total)?;
            let done = self.step;
            let every = self.config.eval_every;
            if every > 0 && !eval.is_empty() && (done.is_multiple_of(every) || done == total) {
                row.eval = evaluate(&self.model, eval)?;
            }
            cb.on_step(&row)?;
            log.push(row);
            let ck = self.config.checkpoint_every;
            if ck > 0 && done.is_multiple_of(ck) && done != stop {
                cb.on_checkpoint(&self.checkpoint())?;
            }
        }
        cb.on_checkpoint(&self.checkpoint())?;
        Ok(log)
    }
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutput<T> {
    pub trainer: Trainer<T>,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Trains `model` from scratch on `source`.
pub fn fit<T: Scalar>(
    model: Model<T>,
    source: &dyn PairSource<T>,
    eval: &[ImagePair<T>],
    config: &TrainConfig,
    cb: &mut dyn Callbacks,
) -> Result<FitOutput<T>> {
    if source.is_empty() {
        return Err(invalid!("training source is empty"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let log = trainer.run(source, eval, cb)?;
    Ok(FitOutput {
        checkpoint: trainer.checkpoint(),
        trainer,
        log,
    })
}

#[cfg(test)]
mod tests;
