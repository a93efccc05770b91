//! Commands behind the `meas` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use meas_core::degrade::{load_image, save_image, Dataset, DatasetSpec};
use meas_core::fdmee::NormMode;
use meas_core::gradcheck::{run_suite, SuiteOptions};
use meas_core::metrics::format_psnr;
use meas_core::model::{Checkpoint, Model, ModelConfig};
use meas_core::numerics::Graph;
use meas_core::training::{evaluate, fit, OutputDir, TaskMetrics, TrainConfig};
use meas_core::{Error, Model32};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) => exit::DATA,
            CliError::Numerical(_) => exit::NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) => CliError::Usage(m),
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => CliError::Numerical(m),
            _ => CliError::Data(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "meas", version, about = "All-in-one image restoration with multi-expert adaptive selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model, training and data seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the step count (and clears any epoch count).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Restore one PNG.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task PSNR/SSIM on the held-out set described by `[data]`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the data seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pairs per task (defaults to `train.eval_per_task`).
        #[arg(long)]
        per_task: Option<usize>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every module.
    Gradcheck {
        /// Uses the `[model]` section; the tiny configuration otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupts the backward rule of the named op (test hook).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Routing, global-score and frequency diagnostics for one PNG.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "inspect")]
        out: PathBuf,
    },
}

/// Contents of a configuration file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.train.seed = s;
            self.data.seed = s;
        }
        self
    }
}

fn load_model(path: &Path) -> CliResult<Model32> {
    let ckpt = Checkpoint::load(path)
        .map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))?;
    Ok(Model::from_checkpoint(&ckpt)?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, seed, steps, out } => cmd_train(&config, seed, steps, &out),
        Command::Restore { checkpoint, input, out } => cmd_restore(&checkpoint, &input, &out),
        Command::Eval { checkpoint, config, seed, per_task, out } => {
            cmd_eval(&checkpoint, config.as_deref(), seed, per_task, &out).map(|_| ())
        }
        Command::Gradcheck { config, seed, corrupt } => cmd_gradcheck(config.as_deref(), seed, corrupt),
        Command::Inspect { checkpoint, input, out } => cmd_inspect(&checkpoint, &input, &out),
    }
}

pub fn cmd_train(config: &Path, seed: Option<u64>, steps: Option<u64>, out: &Path) -> CliResult<()> {
    let mut cfg = RunConfig::load(config)?.with_seed(seed);
    if let Some(s) = steps {
        cfg.train.steps = s;
        cfg.train.epochs = None;
    }
    let data = Dataset::<f32>::new(cfg.data.clone())?;
    let eval = if cfg.train.eval_every > 0 {
        Dataset::<f32>::new(cfg.data.held_out())?.eval_pairs(cfg.train.eval_per_task)?
    } else {
        Vec::new()
    };
    let model = Model::<f32>::new(cfg.model.clone())?;
    println!("model parameters: {}", model.param_count());
    let mut sink = OutputDir::create(out, &cfg.data.tasks)?;
    let result = fit(model, &data, &eval, &cfg.train, &mut sink)?;
    let final_path = out.join("model.meas");
    result.trainer.model.to_checkpoint(result.trainer.step).save(&final_path)?;
    match (result.log.first(), result.log.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} steps: total loss {:.6} -> {:.6}, clipped {} times",
            result.log.len(),
            a.total,
            b.total,
            result.log.iter().filter(|r| r.clipped).count()
        ),
        _ => println!("0 steps: wrote the initial checkpoint"),
    }
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

pub fn cmd_restore(checkpoint: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let img = load_image::<f32>(input)?;
    let restored = model.restore(&img)?;
    save_image(&restored, out)?;
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    per_task: Option<usize>,
    out: &Path,
) -> CliResult<Vec<TaskMetrics>> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut data = cfg.data.held_out();
    if let Some(s) = seed {
        data.seed = s;
    }
    let model = load_model(checkpoint)?;
    let pairs = Dataset::<f32>::new(data)?.eval_pairs(per_task.unwrap_or(cfg.train.eval_per_task))?;
    let metrics = evaluate(&model, &pairs)?;
    std::fs::create_dir_all(out)?;
    let mut w = create(&out.join("eval.csv"))?;
    writeln!(w, "task,count,psnr,ssim,input_psnr,input_ssim")?;
    println!("{:<9} {:>5} {:>9} {:>7} {:>10} {:>8}", "task", "count", "psnr", "ssim", "input_psnr", "input_ssim");
    let o = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for m in &metrics {
        let raw = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", m.task.as_str(), m.count, m.psnr, raw(m.ssim), m.input_psnr, raw(m.input_ssim))?;
        println!(
            "{:<9} {:>5} {:>9} {:>7} {:>10} {:>8}",
            m.task.as_str(),
            m.count,
            format_psnr(m.psnr),
            o(m.ssim),
            format_psnr(m.input_psnr),
            o(m.input_ssim)
        );
    }
    w.flush()?;
    Ok(metrics)
}

pub fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>, corrupt: Option<String>) -> CliResult<()> {
    let mut model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::tiny(),
    };
    if let Some(s) = seed {
        model.seed = s;
    }
    let corrupt_op: Option<&'static str> = corrupt.map(|s| &*Box::leak(s.into_boxed_str()));
    let opts = SuiteOptions {
        corrupt_op,
        ..SuiteOptions::default()
    };
    let suite = run_suite(&model, &opts)?;
    println!(
        "{:<12} {:>8} {:>10} {:>6} {:>11} {:>11}  worst entry",
        "module", "checked", "rel_err", "tol", "analytic", "numeric"
    );
    let mut failed = Vec::new();
    for e in &suite {
        let r = &e.report;
        let (at, a, n) = r
            .worst
            .as_ref()
            .map(|w| (format!("{}[{}]", w.param, w.index), w.analytic, w.numeric))
            .unwrap_or_default();
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<12} {:>8} {:>10.3e} {:>6.0e} {a:>11.3e} {n:>11.3e}  {at} {status}",
            e.module,
            r.checked,
            r.worst_rel_err(),
            r.tol
        );
        if !r.passed() {
            failed.push(e.module);
        }
    }
    if failed.is_empty() {
        return Ok(());
    }
    let cause = match corrupt_op {
        Some(op) => format!(" (backward of `{op}` corrupted)"),
        None => String::new(),
    };
    Err(CliError::Numerical(format!("gradient check failed in {}{cause}", failed.join(", "))))
}

/// Writes an 8-bit palette PNG.
fn save_indexed_png(path: &Path, ids: &[u8], w: usize, h: usize, palette: &[[u8; 3]]) -> CliResult<()> {
    let mut enc = png::Encoder::new(create(path)?, w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| CliError::Data(e.to_string()))?;
    writer.write_image_data(ids).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

/// Evenly spaced hues, one per expert.
fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64 * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].map(|v: f64| (v * 255.0).round() as u8)
        })
        .collect()
}

pub fn cmd_inspect(checkpoint: &Path, input: &Path, out: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let img = load_image::<f32>(input)?;
    let (_, _, h, w) = img.dims4()?;
    let n = model.config.experts;
    std::fs::create_dir_all(out)?;
    let mut g = Graph::new();
    let x = g.input(img);
    let fwd = model.forward(&mut g, x, NormMode::Eval)?;

    let mut usage = create(&out.join("usage.csv"))?;
    writeln!(usage, "stage,expert,count")?;
    let mut scores = create(&out.join("global_scores.csv"))?;
    writeln!(scores, "stage,branch,expert,score,selected")?;
    let mut spectrum = create(&out.join("spectrum.csv"))?;
    writeln!(spectrum, "stage,low_energy,high_energy")?;
    let energy = |t: &meas_core::Tensor32| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.len() as f64;
    for (s, aux) in fwd.stages.iter().enumerate() {
        if let Some(r) = &aux.routing {
            for (e, c) in r.counts.data().iter().enumerate() {
                writeln!(usage, "{s},{e},{}", *c as u64)?;
            }
            if s == 0 {
                let wts = r.weights.data();
                let ids: Vec<u8> = (0..h * w)
                    .map(|p| (0..n).fold(0, |best, e| if wts[e * h * w + p] > wts[best * h * w + p] { e } else { best }) as u8)
                    .collect();
                save_indexed_png(&out.join("expert_ids.png"), &ids, w, h, &palette(n))?;
            }
        }
        for (branch, sv, sel) in [("low", aux.low_scores, &aux.low_selection), ("high", aux.high_scores, &aux.high_selection)] {
            for (e, v) in g.value(sv).data().iter().enumerate() {
                writeln!(scores, "{s},{branch},{e},{v},{}", sel.indices[0].contains(&e) as u8)?;
            }
        }
        writeln!(spectrum, "{s},{:e},{:e}", energy(g.value(aux.low)), energy(g.value(aux.high)))?;
    }
    for f in [&mut usage, &mut scores, &mut spectrum] {
        f.flush()?;
    }
    if fwd.stages.iter().all(|a| a.routing.is_none()) {
        println!("pixel routing disabled: no expert map or usage histogram");
    }
    println!("wrote diagnostics to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_config_parses() {
        let text = include_str!("../../../configs/smoke.toml");
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.experts, 4);
        assert_eq!(cfg.data.tasks.len(), 2);
        assert_eq!(cfg.train.eval_every, 100);
    }

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn flat_key_value_sections_parse() {
        let cfg = RunConfig::parse("[model]\nchannels = 8\n\n[train]\nsteps = 3\n").unwrap();
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.train.steps, 3);
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let cfg = RunConfig::default().with_seed(Some(9));
        assert_eq!((cfg.model.seed, cfg.train.seed, cfg.data.seed), (9, 9, 9));
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Config("x".into())).code(), exit::USAGE);
        assert_eq!(CliError::from(Error::Data("x".into())).code(), exit::DATA);
        assert_eq!(CliError::from(Error::Corrupt("x".into())).code(), exit::DATA);
        assert_eq!(CliError::from(Error::NonFiniteLoss { step: 3 }).code(), exit::NUMERICAL);
    }
}
