//! Model assembly: named parameter store, initialization, sequence
//! tokenization, and the shared embedding-plus-encoder forward path.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    build_hand_graph, chirality_embed, compose_tokens, gesture_embed, temporal_encoding,
    GestureEmbedVars, HandGraph, GCN_CHANNELS, POOLED_NODES,
};
use crate::encoder::{encode, EncoderConfig, EncoderLayerVars};
use crate::handmodel::LATENT_DIMS;
use crate::numerics::{Graph, Result, Scalar, Var};
use crate::posedata::{
    crop_box_for, normalize_to_crop, sample_frames, Chirality, HandSequence, SamplingMode,
    CROP_SIZE, JOINT_COUNT,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// frames sampled per hand (T); tokens per sequence = 2T
    pub frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 256,
            encoder_layers: 3,
            encoder_heads: 4,
            ffn_dim: 1024,
            dropout: 0.1,
            frames: 32,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.encoder_layers,
            heads: self.encoder_heads,
            model_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.frames == 0 {
            return Err("frames must be positive".into());
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be positive".into());
        }
        self.encoder_config().validate()
    }
}

/// Ordered, named parameter arrays. Order is the optimizer/checkpoint order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<ArrayD<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, array: ArrayD<T>) {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.arrays.push(array);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[ArrayD<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.arrays
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.arrays[i]
    }

    pub fn set(&mut self, name: &str, array: ArrayD<T>) {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.arrays[i] = array;
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.arrays.iter().map(|a| a.shape()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.names.iter().zip(self.arrays.iter())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn xavier<T: Scalar>(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> ArrayD<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
        T::from_f64(rng.gen_range(-bound..bound))
    })
}

fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// Embedding + encoder parameters (the part shared by both stages).
pub fn init_backbone<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha20Rng, store: &mut ParamStore<T>) {
    let d = cfg.embed_dim;
    store.push("embed.gcn1", xavier(rng, 2, GCN_CHANNELS[0]));
    store.push("embed.gcn2", xavier(rng, GCN_CHANNELS[0], GCN_CHANNELS[1]));
    store.push("embed.pool_w", xavier(rng, POOLED_NODES * GCN_CHANNELS[1], d));
    store.push("embed.pool_b", zeros(&[d]));
    store.push("embed.chirality", xavier(rng, 2, d));
    for i in 0..cfg.encoder_layers {
        let p = format!("encoder.layer{i}");
        store.push(&format!("{p}.wq"), xavier(rng, d, d));
        store.push(&format!("{p}.bq"), zeros(&[d]));
        store.push(&format!("{p}.wk"), xavier(rng, d, d));
        store.push(&format!("{p}.bk"), zeros(&[d]));
        store.push(&format!("{p}.wv"), xavier(rng, d, d));
        store.push(&format!("{p}.bv"), zeros(&[d]));
        store.push(&format!("{p}.wo"), xavier(rng, d, d));
        store.push(&format!("{p}.bo"), zeros(&[d]));
        store.push(&format!("{p}.norm1_gamma"), ones(&[d]));
        store.push(&format!("{p}.norm1_beta"), zeros(&[d]));
        store.push(&format!("{p}.ffn_w1"), xavier(rng, d, cfg.ffn_dim));
        store.push(&format!("{p}.ffn_b1"), zeros(&[cfg.ffn_dim]));
        store.push(&format!("{p}.ffn_w2"), xavier(rng, cfg.ffn_dim, d));
        store.push(&format!("{p}.ffn_b2"), zeros(&[d]));
        store.push(&format!("{p}.norm2_gamma"), ones(&[d]));
        store.push(&format!("{p}.norm2_beta"), zeros(&[d]));
    }
}

/// Latent head mapping encoder features to hand-model parameters.
pub fn init_latent_head<T: Scalar>(
    cfg: &ModelConfig,
    rng: &mut ChaCha20Rng,
    store: &mut ParamStore<T>,
) {
    store.push("latent.w", xavier(rng, cfg.embed_dim, LATENT_DIMS));
    store.push("latent.b", zeros(&[LATENT_DIMS]));
}

/// Attention-pooling scorer plus linear classifier.
pub fn init_classifier_head<T: Scalar>(
    cfg: &ModelConfig,
    classes: usize,
    rng: &mut ChaCha20Rng,
    store: &mut ParamStore<T>,
) {
    store.push("head.score_w", xavier(rng, cfg.embed_dim, 1));
    store.push("head.score_b", zeros(&[1]));
    store.push("head.class_w", xavier(rng, cfg.embed_dim, classes));
    store.push("head.class_b", zeros(&[classes]));
}

/// Parameter names that belong to the backbone (loaded when fine-tuning from
/// a pretraining checkpoint).
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("embed.") || name.starts_with("encoder.")
}

/// Store parameters registered on a graph, indexable by name.
pub struct RegisteredParams {
    pub names: Vec<String>,
    pub vars: Vec<Var>,
}

impl RegisteredParams {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}

pub fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
) -> Result<RegisteredParams> {
    let mut vars = Vec::with_capacity(store.len());
    for (_, arr) in store.iter() {
        vars.push(g.input(arr.clone())?);
    }
    Ok(RegisteredParams {
        names: store.names().to_vec(),
        vars,
    })
}

// ---- tokenization ----

/// Map a crop-frame coordinate (0..256) to the unit range [-1, 1].
pub fn crop_to_unit(v: f64) -> f64 {
    v / (CROP_SIZE / 2.0) - 1.0
}

/// Inverse of [`crop_to_unit`].
pub fn unit_to_crop(v: f64) -> f64 {
    (v + 1.0) * (CROP_SIZE / 2.0)
}

/// One sequence turned into the 2T-token batch the model consumes. Token
/// order: all left-hand tokens by time, then all right-hand tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// (2T*21, 2) crop coordinates rescaled to [-1,1]
    pub coords: Array2<f64>,
    /// (2T, 21) detector confidences
    pub confidences: Array2<f64>,
    /// sampled time value per token (same for the two hands)
    pub times: Vec<usize>,
    /// 0 = left, 1 = right, per token
    pub chirality: Vec<usize>,
}

impl TokenBatch {
    pub fn token_count(&self) -> usize {
        self.times.len()
    }
}

/// Sample `t_count` frames, crop-normalize each hand independently, and
/// rescale into [-1,1]. Hands with no confident joints become zero tokens.
pub fn tokenize(
    seq: &HandSequence,
    t_count: usize,
    mode: SamplingMode,
    rng: &mut ChaCha20Rng,
) -> std::result::Result<TokenBatch, crate::posedata::PoseDataError> {
    let sampled = sample_frames(seq, t_count, mode, rng)?;
    let n = 2 * t_count;
    let mut coords = Array2::<f64>::zeros((n * JOINT_COUNT, 2));
    let mut confidences = Array2::<f64>::zeros((n, JOINT_COUNT));
    let mut times = Vec::with_capacity(n);
    let mut chirality = Vec::with_capacity(n);
    for (hi, ch) in [Chirality::Left, Chirality::Right].iter().enumerate() {
        for (si, &t) in sampled.iter().enumerate() {
            let token = hi * t_count + si;
            times.push(t);
            chirality.push(hi);
            let frame = match seq.frame(t, *ch) {
                Some(f) if !f.is_missing() => f,
                _ => continue, // zero token, zero confidence
            };
            match crop_box_for(frame) {
                Some(cb) => {
                    let normed = normalize_to_crop(frame, &cb)
                        .expect("crop_box_for returns positive-area boxes");
                    for j in 0..JOINT_COUNT {
                        // joints with no detection stay at the crop center
                        if normed.confidence[j] > 0.0 {
                            coords[[token * JOINT_COUNT + j, 0]] =
                                crop_to_unit(normed.joints[j][0]);
                            coords[[token * JOINT_COUNT + j, 1]] =
                                crop_to_unit(normed.joints[j][1]);
                        }
                        confidences[[token, j]] = normed.confidence[j];
                    }
                }
                None => {} // zero token
            }
        }
    }
    Ok(TokenBatch {
        coords,
        confidences,
        times,
        chirality,
    })
}

// ---- forward ----

pub struct Backbone {
    pub graph_def: HandGraph,
}

impl Backbone {
    pub fn new() -> Self {
        Backbone {
            graph_def: build_hand_graph(),
        }
    }
}

impl Default for Backbone {
    fn default() -> Self {
        Self::new()
    }
}

fn encoder_layer_vars(reg: &RegisteredParams, layer: usize) -> EncoderLayerVars {
    let p = format!("encoder.layer{layer}");
    EncoderLayerVars {
        wq: reg.get(&format!("{p}.wq")),
        bq: reg.get(&format!("{p}.bq")),
        wk: reg.get(&format!("{p}.wk")),
        bk: reg.get(&format!("{p}.bk")),
        wv: reg.get(&format!("{p}.wv")),
        bv: reg.get(&format!("{p}.bv")),
        wo: reg.get(&format!("{p}.wo")),
        bo: reg.get(&format!("{p}.bo")),
        norm1_gamma: reg.get(&format!("{p}.norm1_gamma")),
        norm1_beta: reg.get(&format!("{p}.norm1_beta")),
        ffn_w1: reg.get(&format!("{p}.ffn_w1")),
        ffn_b1: reg.get(&format!("{p}.ffn_b1")),
        ffn_w2: reg.get(&format!("{p}.ffn_w2")),
        ffn_b2: reg.get(&format!("{p}.ffn_b2")),
        norm2_gamma: reg.get(&format!("{p}.norm2_gamma")),
        norm2_beta: reg.get(&format!("{p}.norm2_beta")),
    }
}

/// Embedding + encoder: token coordinates (already masked, if pretraining)
/// to encoder features `(2T, d)`.
pub fn forward_features<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    backbone: &Backbone,
    reg: &RegisteredParams,
    coords: &Array2<f64>,
    times: &[usize],
    chirality: &[usize],
    train_rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let tokens = times.len();
    let coords_v = g.input2(coords.mapv(T::from_f64))?;
    let vars = GestureEmbedVars {
        gcn1: reg.get("embed.gcn1"),
        gcn2: reg.get("embed.gcn2"),
        pool_w: reg.get("embed.pool_w"),
        pool_b: reg.get("embed.pool_b"),
    };
    let f_p = gesture_embed(g, &backbone.graph_def, &vars, coords_v, tokens)?;
    let pe = temporal_encoding(times, cfg.embed_dim).mapv(T::from_f64);
    let f_o = g.input2(pe)?;
    let f_h = chirality_embed(g, reg.get("embed.chirality"), chirality)?;
    let f0 = compose_tokens(g, f_p, f_o, f_h)?;
    let enc_cfg = cfg.encoder_config();
    let layers: Vec<EncoderLayerVars> = (0..cfg.encoder_layers)
        .map(|i| encoder_layer_vars(reg, i))
        .collect();
    encode(g, &enc_cfg, &layers, f0, train_rng)
}
