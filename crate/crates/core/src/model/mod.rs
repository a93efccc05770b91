//! The full restoration network.
//!
//! encoder conv → (prompt, pixel experts) → transformer → frequency split →
//! low/high global experts → concat → decoder (conv, transformer, conv) →
//! residual add with the input image.

mod checkpoint;
mod config;
pub mod transformer;

pub use checkpoint::{Checkpoint, NamedTensor, RngState, TensorKind, CHECKPOINT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use transformer::{transformer_block, TransformerParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::experts::ExpertScope;
use crate::fdmee::{
    branch_forward, make_lowpass_filter, split_frequencies, update_running_stats, BranchParams, FilterParams,
    GlobalSelection, NormMode,
};
use crate::mese::{balance_loss_var, mese_forward, MeseParams, RoutingMap, BALANCE_EPS};
use crate::numerics::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tspg::{prompt_map, TspgParams};

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn conv3<T: Scalar>(store: &mut ParamStore<T>, base: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(&format!("{base}.w"), &[co, ci, 3, 3], ci * 9, rng)?,
            b: store.add(&format!("{base}.b"), Tensor::zeros(&[co]))?,
        })
    }

    fn conv1<T: Scalar>(store: &mut ParamStore<T>, base: &str, ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add_uniform(&format!("{base}.w"), &[co, ci], ci, rng)?,
            b: store.add(&format!("{base}.b"), Tensor::zeros(&[co]))?,
        })
    }

    fn apply3<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.conv2d(x, w, Some(b))
    }

    fn apply1<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.pointwise_conv2d(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
struct StageParams {
    mese: Option<MeseParams>,
    /// 1×1 projection of `[P̃, F]` used instead of the experts when pixel
    /// routing is disabled.
    bypass: Option<ConvParams>,
    transformer: TransformerParams,
    filter: Option<FilterParams>,
    low: BranchParams,
    high: BranchParams,
    /// `2C → C` merge feeding the next stage.
    merge: Option<ConvParams>,
}

/// Diagnostics of one stage.
#[derive(Clone, Debug)]
pub struct StageAux<T> {
    pub routing: Option<RoutingMap<T>>,
    /// Dynamic filter, `[B, C, k, k]` (absent when decomposition is off).
    pub filter: Option<Var>,
    pub low: Var,
    pub high: Var,
    pub low_scores: Var,
    pub high_scores: Var,
    pub low_selection: GlobalSelection<T>,
    pub high_selection: GlobalSelection<T>,
}

pub struct ForwardOutput<T> {
    /// `input + decoder(...)`, not clamped.
    pub restored: Var,
    /// Balance loss summed over stages (a constant 0 when nothing is routed).
    pub balance: Var,
    pub stages: Vec<StageAux<T>>,
    /// Batch statistics of each stage's filter generator in training mode.
    pub bn_stats: Vec<Option<BatchStats<T>>>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    encoder: ConvParams,
    tspg: Option<TspgParams>,
    stages: Vec<StageParams>,
    dec_in: ConvParams,
    dec_transformer: TransformerParams,
    dec_out: ConvParams,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let (n, hidden) = (config.experts, config.hidden());
        let encoder = ConvParams::conv3(&mut store, "enc.conv", 3, c, &mut rng)?;
        let tspg = if config.use_tspg {
            Some(TspgParams::init(&mut store, c, &mut rng)?)
        } else {
            None
        };
        let mut stages = Vec::with_capacity(config.stages);
        for s in 0..config.stages {
            let prefix = if s == 0 { String::new() } else { format!("stage{s}.") };
            let (mese, bypass) = if config.use_mese {
                (Some(MeseParams::init(&mut store, &prefix, c, n, hidden, &mut rng)?), None)
            } else {
                let p = ConvParams::conv1(&mut store, &format!("{prefix}mese.bypass"), 2 * c, c, &mut rng)?;
                (None, Some(p))
            };
            let transformer = TransformerParams::init(&mut store, &format!("{prefix}mese.tf"), c, config.heads, &mut rng)?;
            let filter = if config.use_fd {
                Some(FilterParams::init(&mut store, &prefix, c, config.filter_size, &mut rng)?)
            } else {
                None
            };
            let low = BranchParams::init(&mut store, &prefix, ExpertScope::Low, c, n, hidden, &mut rng)?;
            let high = BranchParams::init(&mut store, &prefix, ExpertScope::High, c, n, hidden, &mut rng)?;
            let merge = if s + 1 < config.stages {
                Some(ConvParams::conv1(&mut store, &format!("{prefix}merge"), 2 * c, c, &mut rng)?)
            } else {
                None
            };
            stages.push(StageParams {
                mese,
                bypass,
                transformer,
                filter,
                low,
                high,
                merge,
            });
        }
        let dec_in = ConvParams::conv3(&mut store, "dec.conv_in", 2 * c, c, &mut rng)?;
        let dec_transformer = TransformerParams::init(&mut store, "dec.tf", c, config.heads, &mut rng)?;
        let dec_out = ConvParams::conv3(&mut store, "dec.conv_out", c, 3, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            tspg,
            stages,
            dec_in,
            dec_transformer,
            dec_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_trainable()
    }

    /// Output-conv weight and bias of the decoder; zeroing them turns the
    /// model into the identity.
    pub fn decoder_output_params(&self) -> (ParamId, ParamId) {
        (self.dec_out.w, self.dec_out.b)
    }

    /// Records the whole network for a `[B, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph<T>, image: Var, mode: NormMode) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        let store = &self.store;
        let (b, ch, h, w) = g.value(image).dims4()?;
        if ch != 3 {
            return Err(shape_err!("model expects RGB input, got {ch} channels"));
        }
        let min = cfg.filter_size.max(1);
        if h < min || w < min {
            return Err(invalid!("input {h}×{w} smaller than the {min}×{min} filter"));
        }
        let c = cfg.channels;
        let mut features = self.encoder.apply3(g, store, image)?;
        let prompt = match &self.tspg {
            Some(p) => prompt_map(g, store, p, image)?,
            None => g.input(Tensor::zeros(&[b, c, h, w])),
        };

        let mut balance: Option<Var> = None;
        let mut add_balance = |g: &mut Graph<T>, term: Var| -> Result<()> {
            balance = Some(match balance {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
            Ok(())
        };
        let mut aux = Vec::with_capacity(self.stages.len());
        let mut bn_stats = Vec::with_capacity(self.stages.len());
        let mut merged = features;
        for stage in &self.stages {
            let (routed, routing) = match (&stage.mese, &stage.bypass) {
                (Some(mp), _) => {
                    let out = mese_forward(g, store, mp, prompt, features, cfg.top_k, cfg.balance_variant)?;
                    add_balance(g, out.balance)?;
                    (out.features, Some(out.routing))
                }
                (None, Some(bp)) => {
                    let fused = g.concat(&[prompt, features], 1)?;
                    (bp.apply1(g, store, fused)?, None)
                }
                (None, None) => unreachable!("stage without pixel block"),
            };
            let ft = transformer_block(g, store, &stage.transformer, routed)?;

            let (low, high, filter, stats) = match &stage.filter {
                Some(fp) => {
                    let (filter, stats) = make_lowpass_filter(g, store, fp, ft, mode)?;
                    let pair = split_frequencies(g, ft, filter)?;
                    (pair.low, pair.high, Some(filter), stats)
                }
                None => (ft, g.input(Tensor::zeros(&[b, c, h, w])), None, None),
            };
            bn_stats.push(stats);
            let lo = branch_forward(g, store, &stage.low, low, cfg.top_k, cfg.use_mee)?;
            let hi = branch_forward(g, store, &stage.high, high, cfg.top_k, cfg.use_mee)?;
            if cfg.balance_global && cfg.use_mee {
                for br in [&lo, &hi] {
                    let counts = br.selection.mask(cfg.experts);
                    let term = balance_loss_var(g, br.scores, &counts, T::of(BALANCE_EPS), cfg.balance_variant)?;
                    add_balance(g, term)?;
                }
            }
            merged = g.concat(&[lo.features, hi.features], 1)?;
            if let Some(m) = &stage.merge {
                features = m.apply1(g, store, merged)?;
            }
            aux.push(StageAux {
                routing,
                filter,
                low,
                high,
                low_scores: lo.scores,
                high_scores: hi.scores,
                low_selection: lo.selection,
                high_selection: hi.selection,
            });
        }

        let d = self.dec_in.apply3(g, store, merged)?;
        let d = transformer_block(g, store, &self.dec_transformer, d)?;
        let residual = self.dec_out.apply3(g, store, d)?;
        let restored = g.add(image, residual)?;
        let balance = match balance {
            Some(v) => v,
            None => g.input(Tensor::scalar(T::zero())),
        };
        g.check_finite()?;
        Ok(ForwardOutput {
            restored,
            balance,
            stages: aux,
            bn_stats,
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn absorb_bn_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (stage, s) in self.stages.iter().zip(stats) {
            if let (Some(fp), Some(s)) = (&stage.filter, s) {
                update_running_stats(&mut self.store, fp, s);
            }
        }
    }

    /// Inference on a `[B, 3, H, W]` batch with running statistics; output
    /// clamped to `[0, 1]`.
    pub fn restore(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let out = self.forward(&mut g, x, NormMode::Eval)?;
        Ok(g.value(out.restored).clamp(T::zero(), T::one()))
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder,
            tspg: self.tspg,
            stages: self.stages.clone(),
            dec_in: self.dec_in,
            dec_transformer: self.dec_transformer,
            dec_out: self.dec_out,
        }
    }

    /// Parameters and buffers as a checkpoint without optimizer state.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let tensors = self
            .store
            .ids()
            .map(|id| NamedTensor {
                name: self.store.name(id).to_owned(),
                kind: if self.store.is_trainable(id) {
                    TensorKind::Param
                } else {
                    TensorKind::Buffer
                },
                value: self.store.value(id).cast(),
            })
            .collect();
        Checkpoint {
            config: self.config.clone(),
            step,
            rng: None,
            optimizer_t: None,
            tensors,
        }
    }

    /// Rebuilds the model described by `ckpt` and loads its tensors. Missing
    /// or unexpected names are an error.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.config.clone())?;
        let stored: Vec<&NamedTensor> = ckpt
            .tensors
            .iter()
            .filter(|t| matches!(t.kind, TensorKind::Param | TensorKind::Buffer))
            .collect();
        let missing: Vec<String> = model
            .store
            .ids()
            .map(|id| model.store.name(id).to_owned())
            .filter(|name| !stored.iter().any(|t| &t.name == name))
            .collect();
        let unexpected: Vec<String> = stored
            .iter()
            .filter(|t| model.store.id(&t.name).is_none())
            .map(|t| t.name.clone())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(crate::Error::ParamMismatch { missing, unexpected });
        }
        for t in stored {
            let id = model.store.id(&t.name).expect("checked above");
            model.store.set(id, t.value.cast())?;
        }
        Ok(model)
    }
}
