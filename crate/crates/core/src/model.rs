//! The full network: parameter layout, initialisation and the per-sample
//! forward pass for one task.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::{InputDims, ModalityInputs};
use crate::encoder::{self, EmbedderParams, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams};
use crate::moe::{self, ExpertParams, MoEParams};
use crate::params::{normal_init, xavier_std, ParamId, ParamStore, Scalar};
use crate::seqlayout::{
    build_layout, build_layout_without_combinations, build_mask, enumerate_combinations, full_combination_count,
    ModalityCombination, ModalityId,
};
use crate::tasks::{self, HeadParams, TaskRegistry, TaskSpec};

const TOKEN_STD: f64 = 0.1;
const POS_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Either creates parameters (fresh model) or looks them up and checks their
/// shapes (model rebuilt from a loaded store).
enum Binder<'a, T: Scalar> {
    Create { store: &'a mut ParamStore<T>, rng: ChaCha8Rng },
    Bind { store: &'a ParamStore<T> },
}

impl<T: Scalar> Binder<'_, T> {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        match self {
            Binder::Create { store, rng } => {
                let value = match init {
                    Init::Normal(std) => normal_init(rng, rows, cols, std),
                    Init::Zeros => Array2::zeros((rows, cols)),
                    Init::Ones => Array2::ones((rows, cols)),
                };
                store.add(name, value)
            }
            Binder::Bind { store } => {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))?;
                let got = store.get(id).dim();
                if got != (rows, cols) {
                    return Err(Error::CheckpointMismatch(format!(
                        "tensor `{name}` has shape {got:?}, expected ({rows}, {cols})"
                    )));
                }
                Ok(id)
            }
        }
    }

    fn reseed(&mut self, seed: u64, key: &str) {
        if let Binder::Create { rng, .. } = self {
            *rng = seeded(seed, key);
        }
    }
}

fn seeded(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub registry: TaskRegistry,
    pub params: ParamStore<T>,
    pub embed: EmbedderParams,
    pub layers: Vec<EncoderLayerParams>,
    /// `None` when the mixture of experts is disabled.
    pub moe: Option<MoEParams>,
    pub fusion: FusionParams,
    pub task_tokens: Vec<ParamId>,
    pub heads: Vec<HeadParams>,
    /// Seed used to initialise parameters, kept so later tasks initialise
    /// deterministically.
    pub init_seed: u64,
}

/// Encoder and head tensors bound to names.
struct Handles {
    embed: EmbedderParams,
    layers: Vec<EncoderLayerParams>,
    moe: Option<MoEParams>,
    fusion: FusionParams,
}

fn bind_shared<T: Scalar>(b: &mut Binder<'_, T>, cfg: &ModelConfig, seed: u64) -> Result<Handles> {
    let d = cfg.d_model;
    let x = |i, o| Init::Normal(xavier_std(i, o));
    b.reseed(seed, "embed");
    let pw = cfg.patch_width();
    let n_comb_rows = if cfg.combination_tokens { full_combination_count() } else { 0 };
    let embed = EmbedderParams {
        ts_proj: b.param("embed.ts.proj", cfg.ts_features, d, x(cfg.ts_features, d))?,
        ts_bias: b.param("embed.ts.bias", 1, d, Init::Zeros)?,
        ts_pos: b.param("embed.ts.pos", cfg.ts_max_steps, d, Init::Normal(POS_STD))?,
        img_proj: b.param("embed.image.proj", pw, d, x(pw, d))?,
        img_bias: b.param("embed.image.bias", 1, d, Init::Zeros)?,
        img_pos: b.param("embed.image.pos", cfg.image_tokens(), d, Init::Normal(POS_STD))?,
        note_proj: b.param("embed.note.proj", cfg.note_features, d, x(cfg.note_features, d))?,
        note_bias: b.param("embed.note.bias", 1, d, Init::Zeros)?,
        note_pos: b.param("embed.note.pos", cfg.note_max_tokens, d, Init::Normal(POS_STD))?,
        comb_tokens: if n_comb_rows > 0 {
            b.param("embed.comb_tokens", n_comb_rows, d, Init::Normal(TOKEN_STD))?
        } else {
            // Never read when combination tokens are off; a zero-row sentinel
            // keeps the struct uniform.
            b.param("embed.comb_tokens", 0, d, Init::Zeros)?
        },
    };
    let f = cfg.ffn_mult * d;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        b.reseed(seed, &format!("encoder.{l}"));
        let n = |s: &str| format!("encoder.{l}.{s}");
        layers.push(EncoderLayerParams {
            wq: b.param(&n("wq"), d, d, x(d, d))?,
            wk: b.param(&n("wk"), d, d, x(d, d))?,
            wv: b.param(&n("wv"), d, d, x(d, d))?,
            ff1_w: b.param(&n("ff1.w"), d, f, x(d, f))?,
            ff1_b: b.param(&n("ff1.b"), 1, f, Init::Zeros)?,
            ff2_w: b.param(&n("ff2.w"), f, d, x(f, d))?,
            ff2_b: b.param(&n("ff2.b"), 1, d, Init::Zeros)?,
            ln1_gain: b.param(&n("ln1.gain"), 1, d, Init::Ones)?,
            ln1_bias: b.param(&n("ln1.bias"), 1, d, Init::Zeros)?,
            ln2_gain: b.param(&n("ln2.gain"), 1, d, Init::Ones)?,
            ln2_bias: b.param(&n("ln2.bias"), 1, d, Init::Zeros)?,
        });
    }
    let moe = if cfg.moe {
        b.reseed(seed, "moe");
        let e = cfg.experts;
        let h = cfg.expert_hidden_mult * d;
        let router_w1 = b.param("moe.router.w1", d, e, x(d, e))?;
        let router_w2 = b.param("moe.router.w2", d, e, x(d, e))?;
        let mut experts = Vec::with_capacity(e);
        for k in 0..e {
            let n = |s: &str| format!("moe.expert.{k}.{s}");
            experts.push(ExpertParams {
                w1: b.param(&n("w1"), d, h, x(d, h))?,
                b1: b.param(&n("b1"), 1, h, Init::Zeros)?,
                w2: b.param(&n("w2"), h, d, x(h, d))?,
                b2: b.param(&n("b2"), 1, d, Init::Zeros)?,
            });
        }
        Some(MoEParams {
            experts,
            router_w1,
            router_w2,
            k: cfg.top_k,
        })
    } else {
        None
    };
    b.reseed(seed, "fusion");
    let fusion = FusionParams {
        w1: b.param("fusion.w1", 2 * d, d, x(2 * d, d))?,
        w2: b.param("fusion.w2", d, 1, x(d, 1))?,
        ln_gain: b.param("fusion.ln.gain", 1, d, Init::Ones)?,
        ln_bias: b.param("fusion.ln.bias", 1, d, Init::Zeros)?,
        epsilon: cfg.epsilon,
    };
    Ok(Handles {
        embed,
        layers,
        moe,
        fusion,
    })
}

fn bind_task<T: Scalar>(b: &mut Binder<'_, T>, cfg: &ModelConfig, spec: &TaskSpec, seed: u64) -> Result<(ParamId, HeadParams)> {
    let d = cfg.d_model;
    b.reseed(seed, &format!("task/{}", spec.name));
    let token = b.param(&format!("task_token.{}", spec.name), 1, d, Init::Normal(TOKEN_STD))?;
    let head = HeadParams {
        w: b.param(
            &format!("head.{}.w", spec.name),
            2 * d,
            spec.label_dim,
            Init::Normal(xavier_std(2 * d, spec.label_dim)),
        )?,
        b: b.param(&format!("head.{}.b", spec.name), 1, spec.label_dim, Init::Zeros)?,
    };
    Ok((token, head))
}

/// Everything the forward pass exposes for losses and analysis.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Var,
    /// Patient representation (`1 x 2d`).
    pub s_p: Var,
    pub z_task: Var,
    /// Combinations present in the sample, canonical order.
    pub combinations: Vec<ModalityCombination>,
    /// Combination token outputs (one row per combination), when the model
    /// has combination tokens.
    pub z_comb: Option<Var>,
    /// Per-modality encoder outputs, by modality index.
    pub modality_outputs: [Option<Var>; 3],
    /// Fusion weights (`1 x |combinations|`).
    pub alphas: Var,
    /// Decorrelation regulariser (`1 x 1`), when enabled.
    pub cov: Option<Var>,
    /// Gate weights and selected experts per combination, when MoE is on.
    pub gates: Vec<(Var, Vec<usize>)>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with deterministic initialisation.
    pub fn new(config: ModelConfig, registry: TaskRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (h, tokens, heads) = {
            let mut b = Binder::Create {
                store: &mut params,
                rng: seeded(seed, ""),
            };
            let h = bind_shared(&mut b, &config, seed)?;
            let mut tokens = Vec::new();
            let mut heads = Vec::new();
            for spec in registry.iter() {
                let (t, hd) = bind_task(&mut b, &config, spec, seed)?;
                tokens.push(t);
                heads.push(hd);
            }
            (h, tokens, heads)
        };
        Ok(Self {
            config,
            registry,
            params,
            embed: h.embed,
            layers: h.layers,
            moe: h.moe,
            fusion: h.fusion,
            task_tokens: tokens,
            heads,
            init_seed: seed,
        })
    }

    /// Rebuild handles over an existing parameter store (e.g. a loaded
    /// checkpoint). Every expected tensor must exist with the right shape and
    /// no extra tensors may be present.
    pub fn from_params(config: ModelConfig, registry: TaskRegistry, params: ParamStore<T>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (h, tokens, heads) = {
            let mut b = Binder::Bind { store: &params };
            let h = bind_shared(&mut b, &config, init_seed)?;
            let mut tokens = Vec::new();
            let mut heads = Vec::new();
            for spec in registry.iter() {
                let (t, hd) = bind_task(&mut b, &config, spec, init_seed)?;
                tokens.push(t);
                heads.push(hd);
            }
            (h, tokens, heads)
        };
        let model = Self {
            config,
            registry,
            params,
            embed: h.embed,
            layers: h.layers,
            moe: h.moe,
            fusion: h.fusion,
            task_tokens: tokens,
            heads,
            init_seed,
        };
        let expected = model.expected_tensor_count();
        if model.params.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "store holds {} tensors, model expects {expected}",
                model.params.len()
            )));
        }
        Ok(model)
    }

    fn expected_tensor_count(&self) -> usize {
        let shared = 10 + 11 * self.layers.len() + 4;
        let moe = self.moe.as_ref().map_or(0, |m| 2 + 4 * m.experts.len());
        shared + moe + 3 * self.registry.len()
    }

    /// Register a new task with a fresh task token and head. Existing tensors
    /// are untouched.
    pub fn add_task(&mut self, name: &str, kind: tasks::HeadKind, label_dim: usize, loss_weight: f64) -> Result<usize> {
        let id = self.registry.register(name, kind, label_dim, loss_weight)?;
        let spec = self.registry.get(id)?.clone();
        let (token, head) = {
            let mut b = Binder::Create {
                store: &mut self.params,
                rng: seeded(self.init_seed, ""),
            };
            bind_task(&mut b, &self.config, &spec, self.init_seed)?
        };
        self.task_tokens.push(token);
        self.heads.push(head);
        Ok(id)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            registry: self.registry.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            layers: self.layers.clone(),
            moe: self.moe.clone(),
            fusion: self.fusion.clone(),
            task_tokens: self.task_tokens.clone(),
            heads: self.heads.clone(),
            init_seed: self.init_seed,
        }
    }

    pub fn input_dims(&self) -> InputDims {
        InputDims {
            ts_features: self.config.ts_features,
            image_size: self.config.image_size,
            image_channels: self.config.image_channels,
            note_features: self.config.note_features,
        }
    }

    /// Check that a dataset's input dimensions match this model.
    pub fn check_dims(&self, dims: &InputDims) -> Result<()> {
        if *dims != self.input_dims() {
            return Err(Error::CheckpointMismatch(format!(
                "dataset dims {dims:?} do not match model dims {:?}",
                self.input_dims()
            )));
        }
        Ok(())
    }

    /// Forward pass of one sample for task `task_id` on `tape`.
    /// `router_noise` adds `N(0, std^2)` noise to router logits.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        inputs: &ModalityInputs<T>,
        task_id: usize,
        router_noise: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<ForwardOutput> {
        let spec = self.registry.get(task_id)?;
        let cfg = &self.config;
        let present = inputs.present();
        if present.is_empty() {
            return Err(Error::data("sample has no modalities"));
        }
        let mut tokens: [Option<Var>; 3] = [None; 3];
        let mut counts = [0usize; 3];
        if let Some(x) = &inputs.ts {
            let v = encoder::embed_timeseries(tape, x.view(), &self.embed)?;
            counts[ModalityId::TimeSeries.index()] = x.nrows();
            tokens[ModalityId::TimeSeries.index()] = Some(v);
        }
        if let Some(x) = &inputs.image {
            let v = encoder::embed_image(tape, x.view(), cfg.patch_size, &self.embed)?;
            counts[ModalityId::Image.index()] = tape.shape(v).0;
            tokens[ModalityId::Image.index()] = Some(v);
        }
        if let Some(x) = &inputs.note {
            let v = encoder::embed_note(tape, x.view(), &self.embed)?;
            counts[ModalityId::Note.index()] = x.nrows();
            tokens[ModalityId::Note.index()] = Some(v);
        }
        let layout = if cfg.combination_tokens {
            build_layout(present, counts)?
        } else {
            build_layout_without_combinations(present, counts)?
        };
        let mask = build_mask(&layout).additive::<T>();
        let h0 = encoder::assemble_sequence(tape, self.task_tokens[task_id], &layout, &tokens, &self.embed)?;
        let enc = encoder::encode(tape, h0, &mask, &self.layers, cfg.heads, &layout)?;

        let combinations = enumerate_combinations(present)?;
        let z_cs: Vec<Var> = match enc.z_comb {
            Some(zc) => (0..combinations.len()).map(|r| tape.row(zc, r)).collect::<Result<_>>()?,
            None => combinations
                .iter()
                .map(|c| {
                    let parts: Vec<Var> = c
                        .members()
                        .modalities()
                        .map(|m| enc.modality_outputs[m.index()].expect("present modality has outputs"))
                        .collect();
                    let cat = tape.concat_rows(&parts)?;
                    Ok(tape.mean_rows(cat))
                })
                .collect::<Result<_>>()?,
        };
        let cov = match (cfg.decorrelation, enc.z_comb) {
            (true, Some(zc)) => Some(tape.cov_reg(zc, cfg.centering)?),
            _ => None,
        };

        let mut refined = Vec::with_capacity(z_cs.len());
        let mut gates = Vec::new();
        let mut noise_src = router_noise;
        for &zc in &z_cs {
            match &self.moe {
                Some(mp) => {
                    let noise: Option<Vec<T>> = match noise_src.as_mut() {
                        Some((std, rng)) if *std > 0.0 => Some(
                            (0..mp.experts.len())
                                .map(|_| {
                                    let e: f64 = StandardNormal.sample(&mut **rng);
                                    T::lit(*std * e)
                                })
                                .collect(),
                        ),
                        _ => None,
                    };
                    let out = moe::moe_forward(tape, zc, enc.z_task, mp, noise.as_deref())?;
                    refined.push(out.s);
                    gates.push((out.gates, out.selected));
                }
                None => refined.push(zc),
            }
        }
        let fused = fusion::fuse(tape, enc.z_task, &refined, &self.fusion)?;
        let probs = tasks::predict(tape, fused.s_p, spec, &self.heads[task_id])?;
        Ok(ForwardOutput {
            probs,
            s_p: fused.s_p,
            z_task: enc.z_task,
            combinations,
            z_comb: enc.z_comb,
            modality_outputs: enc.modality_outputs,
            alphas: fused.alphas,
            cov,
            gates,
        })
    }

    /// Probabilities for one sample (inference, no noise).
    pub fn predict(&self, inputs: &ModalityInputs<T>, task_id: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, inputs, task_id, None)?;
        Ok(tape.value(out.probs).iter().copied().collect())
    }

    /// Patient representation for one sample.
    pub fn representation(&self, inputs: &ModalityInputs<T>, task_id: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, inputs, task_id, None)?;
        Ok(tape.value(out.s_p).iter().copied().collect())
    }

    /// Random generator for router noise, derived from the init seed.
    pub fn noise_rng(&self, salt: u64) -> ChaCha8Rng {
        let mut r = seeded(self.init_seed, "router-noise");
        let skip: u64 = r.random();
        seeded(skip ^ salt, "router-noise")
    }
}
