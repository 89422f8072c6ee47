//! Named parameter registry with deterministic, name-keyed initialization.
//!
//! Every tensor is seeded by `derive_rng(cfg.seed, <param name>, 0)`, so the
//! initial values depend only on (seed, name, shape) — never on registration
//! order — and two stores built from the same config are bit-identical.

use super::{ModelConfig, ModelError};
use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::rng::derive_rng;
use rand::Rng;
use std::collections::BTreeMap;

/// How a parameter tensor is filled at init.
enum Init {
    /// N(0, 2/(fan_in+fan_out)) for attention and linear weights.
    Glorot,
    /// N(0, 2/fan_in) for weights feeding a relu.
    He,
    /// N(0, sigma) for embeddings and query latents.
    Normal(f64),
    Zeros,
    Ones,
    Constant(f64),
}

fn box_muller(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// (fan_in, fan_out) for 2-D linear [in, out] and conv [c_out, c_in, k, k].
fn fans(shape: &[usize]) -> (f64, f64) {
    match shape.len() {
        2 => (shape[0] as f64, shape[1] as f64),
        4 => {
            let rf = (shape[2] * shape[3]) as f64;
            (shape[1] as f64 * rf, shape[0] as f64 * rf)
        }
        _ => (shape.iter().product::<usize>() as f64, 1.0),
    }
}

/// Ordered collection of all learnable tensors, addressable by name.
pub struct ParamStore {
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    /// Build and initialize every parameter the configured model uses.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore { params: Vec::new(), index: BTreeMap::new() };
        let w = cfg.width;
        let n_patches = cfg.patches_per_camera();
        let patch_features = cfg.patch_size * cfg.patch_size * 2;

        store.register(cfg, "enc.patch.w", vec![patch_features, w], Init::Glorot);
        store.register(cfg, "enc.patch.b", vec![w], Init::Zeros);
        for c in 0..cfg.cameras {
            // per-camera-slot positional embeddings: the only signal that
            // distinguishes camera slots in a calibration-free model
            store.register(cfg, &format!("enc.pos.cam{c}"), vec![n_patches, w], Init::Normal(0.02));
        }
        for l in 1..=cfg.depth {
            store.register_transformer_block(cfg, &format!("enc.block{l}"));
        }
        for &l in &cfg.tapped_layers {
            let side = cfg.query_side;
            store.register(
                cfg,
                &format!("proj.layer{l}.queries"),
                vec![side * side, cfg.query_channels],
                Init::Normal(0.02),
            );
            for b in 0..cfg.projector.blocks() {
                store.register_transformer_block(cfg, &format!("proj.layer{l}.block{b}"));
            }
        }

        let stages = cfg.fusion_stages();
        let concat_channels = cfg.tapped_layers.len() * cfg.query_channels;
        let mut c_in = concat_channels;
        for s in 0..stages {
            store.register(cfg, &format!("fuse.stage{s}.conv.w"), vec![cfg.fused_channels, c_in, 3, 3], Init::He);
            store.register(cfg, &format!("fuse.stage{s}.conv.b"), vec![cfg.fused_channels], Init::Zeros);
            c_in = cfg.fused_channels;
        }
        store.register(cfg, "fuse.proj.w", vec![cfg.fused_channels, c_in, 1, 1], Init::He);
        store.register(cfg, "fuse.proj.b", vec![cfg.fused_channels], Init::Zeros);

        let h0 = cfg.decoder_hidden[0];
        store.register(cfg, "dec.in.w", vec![cfg.fused_channels + 3, h0], Init::He);
        store.register(cfg, "dec.in.b", vec![h0], Init::Zeros);
        for i in 1..cfg.decoder_hidden.len() {
            let h = cfg.decoder_hidden[i];
            store.register(cfg, &format!("dec.res{i}.w"), vec![h, h], Init::He);
            store.register(cfg, &format!("dec.res{i}.b"), vec![h], Init::Zeros);
        }
        let h_last = *cfg.decoder_hidden.last().unwrap();
        store.register(cfg, "dec.out.w", vec![h_last, 1], Init::Glorot);
        // free-space prior: regions the supervision never reaches decode
        // to low occupancy instead of coin flips
        store.register(cfg, "dec.out.b", vec![1], Init::Constant(-2.5));
        Ok(store)
    }

    fn register_transformer_block(&mut self, cfg: &ModelConfig, prefix: &str) {
        let w = cfg.width;
        let hd = w / cfg.heads;
        for h in 0..cfg.heads {
            self.register(cfg, &format!("{prefix}.attn.q{h}.w"), vec![w, hd], Init::Glorot);
            self.register(cfg, &format!("{prefix}.attn.k{h}.w"), vec![w, hd], Init::Glorot);
            self.register(cfg, &format!("{prefix}.attn.v{h}.w"), vec![w, hd], Init::Glorot);
        }
        self.register(cfg, &format!("{prefix}.attn.out.w"), vec![w, w], Init::Glorot);
        self.register(cfg, &format!("{prefix}.attn.out.b"), vec![w], Init::Zeros);
        self.register(cfg, &format!("{prefix}.ln1.g"), vec![w], Init::Ones);
        self.register(cfg, &format!("{prefix}.ln1.b"), vec![w], Init::Zeros);
        self.register(cfg, &format!("{prefix}.ff.w1"), vec![w, 4 * w], Init::Glorot);
        self.register(cfg, &format!("{prefix}.ff.b1"), vec![4 * w], Init::Zeros);
        self.register(cfg, &format!("{prefix}.ff.w2"), vec![4 * w, w], Init::Glorot);
        self.register(cfg, &format!("{prefix}.ff.b2"), vec![w], Init::Zeros);
        self.register(cfg, &format!("{prefix}.ln2.g"), vec![w], Init::Ones);
        self.register(cfg, &format!("{prefix}.ln2.b"), vec![w], Init::Zeros);
    }

    fn register(&mut self, cfg: &ModelConfig, name: &str, shape: Vec<usize>, init: Init) {
        let numel: usize = shape.iter().product();
        let mut rng = derive_rng(cfg.seed, name, 0);
        let (fan_in, fan_out) = fans(&shape);
        let data: Vec<f64> = match init {
            Init::Glorot => {
                let std = (2.0 / (fan_in + fan_out)).sqrt();
                (0..numel).map(|_| std * box_muller(&mut rng)).collect()
            }
            Init::He => {
                let std = (2.0 / fan_in).sqrt();
                (0..numel).map(|_| std * box_muller(&mut rng)).collect()
            }
            Init::Normal(std) => (0..numel).map(|_| std * box_muller(&mut rng)).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Constant(v) => vec![v; numel],
        };
        let tensor = Tensor::new(shape, data).expect("registered shapes are valid");
        let idx = self.params.len();
        let existing = self.index.insert(name.to_string(), idx);
        debug_assert!(existing.is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.params[idx].tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.params[idx].tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copy with `requires_grad` cleared on every tensor (for inference
    /// handles).
    pub fn frozen_clone(&self) -> ParamStore {
        let params = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.requires_grad = false;
                t.grad = None;
                // bypass Parameter::new, which re-enables requires_grad
                Parameter { name: p.name.clone(), tensor: t }
            })
            .collect();
        ParamStore { params, index: self.index.clone() }
    }
}

/// Parameters registered as leaves on a tape for one forward/backward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Self {
        Self::bind_filtered(store, tape, |_| true)
    }

    /// Bind only parameters whose name passes `keep` (e.g. just the decoder
    /// for cached-grid inference).
    pub fn bind_filtered(store: &ParamStore, tape: &mut Tape, keep: impl Fn(&str) -> bool) -> Self {
        let mut vars = BTreeMap::new();
        for p in store.params() {
            if keep(&p.name) {
                vars.insert(p.name.clone(), tape.leaf(p.tensor.clone()));
            }
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Copy gradients accumulated on the tape back into the store after
/// `tape.backward`.
pub fn pull_gradients(tape: &Tape, bound: &BoundParams, store: &mut ParamStore) {
    for (name, var) in bound.iter() {
        if let Some(g) = tape.grad(var) {
            let g = g.to_vec();
            store.get_mut(name).accumulate_grad(&g);
        }
    }
}
