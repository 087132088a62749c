//! Small post-LN transformer encoder with a classification head and four
//! tuning modes.
//!
//! Inputs always start with the `[CLS]` token, which is globally attended.
//! In prefix modes the backbone is frozen and only the prefix bank, the
//! `[CLS]` embedding and the head are trained.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    build_mask, compose_graph, gaussian, kernel_decomposed_graph, multi_head_graph, Alpha, AttentionConfig,
    AttentionMask, AttnParams, LayerWeights, PrefixBank, PrefixKind, Window,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
/// First id available to task vocabularies.
pub const FIRST_FREE_ID: usize = 3;

const CHECKPOINT_FORMAT: &str = "prefixprop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    FineTuning,
    PrefixTuning,
    PrefixPropagation,
    PropagationKernel,
}

impl TuningMode {
    pub const ALL: [TuningMode; 4] = [
        TuningMode::FineTuning,
        TuningMode::PrefixTuning,
        TuningMode::PrefixPropagation,
        TuningMode::PropagationKernel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::FineTuning => "fine_tuning",
            TuningMode::PrefixTuning => "prefix_tuning",
            TuningMode::PrefixPropagation => "prefix_propagation",
            TuningMode::PropagationKernel => "propagation_kernel",
        }
    }

    pub fn is_prefix(self) -> bool {
        self != TuningMode::FineTuning
    }

    /// Whether prefix rows are part of the hidden sequence.
    pub fn propagates(self) -> bool {
        matches!(self, TuningMode::PrefixPropagation | TuningMode::PropagationKernel)
    }

    pub fn prefix_kind(self) -> Option<PrefixKind> {
        match self {
            TuningMode::FineTuning => None,
            TuningMode::PrefixTuning => Some(PrefixKind::PrefixTuning),
            TuningMode::PrefixPropagation | TuningMode::PropagationKernel => Some(PrefixKind::Propagation),
        }
    }
}

impl std::str::FromStr for TuningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TuningMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for TuningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub window: Window,
    pub prefix_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub alpha: Alpha,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 512,
            window: Window::Size(64),
            prefix_len: 8,
            n_classes: 2,
            dropout: 0.1,
            alpha: Alpha::Exact,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("model.d_model {} must be a positive multiple of model.n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("model.n_layers and model.d_ff must be positive".into());
        }
        if self.vocab_size <= FIRST_FREE_ID {
            return bad(format!("model.vocab_size must exceed {FIRST_FREE_ID}"));
        }
        if self.max_len == 0 || self.n_classes < 2 {
            return bad("model.max_len must be positive and model.n_classes >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            return bad("model.layer_norm_eps must be positive".into());
        }
        if let Alpha::Scale(a) = self.alpha {
            if !(a > 0.0) {
                return bad(format!("model.alpha must be positive, got {a}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub mode: TuningMode,
    pub token_embeddings: Tensor,
    pub cls_embedding: Tensor,
    pub position_embeddings: Tensor,
    pub embed_ln_gamma: Tensor,
    pub embed_ln_beta: Tensor,
    pub layers: Vec<LayerWeights>,
    pub bank: Option<PrefixBank>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub trainable: Vec<ParamCount>,
    pub frozen: Vec<ParamCount>,
    pub trainable_count: usize,
    pub frozen_count: usize,
    pub total: usize,
    /// Parameters in the prefix bank alone.
    pub prefix_count: usize,
    pub trainable_fraction: f64,
}

/// Graph handles for every parameter, in [`EncoderModel::parameters`] order.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Var,
    pub params: Vec<Var>,
}

impl EncoderModel {
    /// Deterministic stand-in for a pretrained backbone, plus fresh prefixes
    /// and head, all drawn from `config.seed`.
    pub fn new(config: ModelConfig, mode: TuningMode) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut backbone = SplitMix64::stream(config.seed, 0);
        let token_embeddings = gaussian(config.vocab_size, d, 1.0, &mut backbone);
        let position_embeddings = gaussian(config.max_len, d, 0.2, &mut backbone);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::random(d, config.d_ff, &mut backbone))
            .collect();
        let cls_embedding = token_embeddings.slice_rows(CLS_ID, 1)?;

        let mut adapt = SplitMix64::stream(config.seed, 1);
        let bank = mode
            .prefix_kind()
            .map(|kind| PrefixBank::random(kind, config.n_layers, config.prefix_len, d, &mut adapt));
        let head_w = gaussian(d, config.n_classes, 1.0 / (d as f64).sqrt(), &mut adapt);

        Ok(Self {
            head_b: Tensor::zeros(&[config.n_classes]),
            embed_ln_gamma: Tensor::filled(&[d], 1.0),
            embed_ln_beta: Tensor::zeros(&[d]),
            config,
            mode,
            token_embeddings,
            cls_embedding,
            position_embeddings,
            layers,
            bank,
            head_w,
        })
    }

    /// Same backbone and head, different tuning mode (fresh prefix bank).
    pub fn with_mode(&self, mode: TuningMode) -> Result<Self> {
        let mut fresh = Self::new(self.config.clone(), mode)?;
        fresh.with_backbone(self)?;
        fresh.head_w = self.head_w.clone();
        fresh.head_b = self.head_b.clone();
        Ok(fresh)
    }

    /// Replaces embeddings and layers with those of `other`, keeping this
    /// model's head and prefixes.
    pub fn with_backbone(&mut self, other: &EncoderModel) -> Result<()> {
        let (a, b) = (&self.config, &other.config);
        let dims = |c: &ModelConfig| [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_len];
        if dims(a) != dims(b) {
            return Err(Error::Config(format!(
                "backbone dimensions {:?} do not match {:?} (vocab, d_model, heads, layers, d_ff, max_len)",
                dims(b),
                dims(a)
            )));
        }
        self.token_embeddings = other.token_embeddings.clone();
        self.cls_embedding = other.cls_embedding.clone();
        self.position_embeddings = other.position_embeddings.clone();
        self.embed_ln_gamma = other.embed_ln_gamma.clone();
        self.embed_ln_beta = other.embed_ln_beta.clone();
        self.layers = other.layers.clone();
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        if self.mode.is_prefix() {
            self.config.prefix_len
        } else {
            0
        }
    }

    /// Row of the final hidden state that feeds the head.
    pub fn readout_row(&self) -> usize {
        if self.mode.propagates() {
            self.prefix_len()
        } else {
            0
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.config.d_model,
            n_heads: self.config.n_heads,
            prefix_len: if self.mode == TuningMode::FineTuning { 0 } else { self.config.prefix_len },
            window: self.config.window,
            global_positions: vec![0],
        }
    }

    /// All parameters in a fixed order, with names.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embeddings.token".into(), &self.token_embeddings),
            ("embeddings.cls".into(), &self.cls_embedding),
            ("embeddings.position".into(), &self.position_embeddings),
            ("embeddings.ln_gamma".into(), &self.embed_ln_gamma),
            ("embeddings.ln_beta".into(), &self.embed_ln_beta),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        if let Some(bank) = &self.bank {
            out.extend(bank.tensors());
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable view in the same order as [`Self::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_embeddings,
            &mut self.cls_embedding,
            &mut self.position_embeddings,
            &mut self.embed_ln_gamma,
            &mut self.embed_ln_beta,
        ];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.w_q,
                &mut layer.w_k,
                &mut layer.w_v,
                &mut layer.w_o,
                &mut layer.ffn_w1,
                &mut layer.ffn_b1,
                &mut layer.ffn_w2,
                &mut layer.ffn_b2,
                &mut layer.ln1_gamma,
                &mut layer.ln1_beta,
                &mut layer.ln2_gamma,
                &mut layer.ln2_beta,
            ]);
        }
        if let Some(bank) = &mut self.bank {
            out.extend(bank.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self.mode {
            TuningMode::FineTuning => true,
            _ => name == "embeddings.cls" || name.starts_with("prefix.") || name.starts_with("head."),
        }
    }

    /// Trainable flag per parameter, in [`Self::parameters`] order.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.parameters().iter().map(|(n, _)| self.is_trainable(n)).collect()
    }

    pub fn partition_parameters(&self) -> ParameterPartition {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for (name, t) in self.parameters() {
            let entry = ParamCount {
                count: t.len(),
                name: name.clone(),
            };
            if self.is_trainable(&name) {
                trainable.push(entry);
            } else {
                frozen.push(entry);
            }
        }
        let trainable_count: usize = trainable.iter().map(|p| p.count).sum();
        let frozen_count: usize = frozen.iter().map(|p| p.count).sum();
        let total = trainable_count + frozen_count;
        ParameterPartition {
            trainable,
            frozen,
            trainable_count,
            frozen_count,
            total,
            prefix_count: self.bank.as_ref().map_or(0, PrefixBank::trainable_count),
            trainable_fraction: trainable_count as f64 / total as f64,
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Length {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if tokens[0] != CLS_ID {
            return Err(Error::Input(format!("sequence must start with [CLS] ({CLS_ID}), got {}", tokens[0])));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut SplitMix64>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let scale = 1.0 / (1.0 - rate);
                let keep = (0..g.value(x).len())
                    .map(|_| if rng.uniform() < rate { 0.0 } else { scale })
                    .collect();
                g.dropout(x, keep)
            }
            _ => Ok(x),
        }
    }

    /// Records the forward pass on a fresh graph. `dropout_rng` switches on
    /// training-mode dropout; `None` is evaluation mode.
    pub fn forward_graph(&self, tokens: &[usize], mut dropout_rng: Option<&mut SplitMix64>) -> Result<ForwardPass> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let params: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(name, t)| g.leaf(t.clone(), self.is_trainable(&name)))
            .collect();
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter order");
        let (tok_table, cls, pos_table, emb_g, emb_b) = (next(), next(), next(), next(), next());
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for _ in 0..self.layers.len() {
            let v: Vec<Var> = (0..12).map(|_| next()).collect();
            layer_vars.push(v);
        }
        let prefix_vars: Vec<Var> = match &self.bank {
            Some(b) => b.tensors().map(|_| next()).collect(),
            None => Vec::new(),
        };
        let (head_w, head_b) = (next(), next());

        let m = tokens.len();
        let mut x = g.slice_rows(cls, 0, 1)?;
        if m > 1 {
            let rest = g.gather(tok_table, &tokens[1..])?;
            x = g.concat_rows(&[x, rest])?;
        }
        let pos = g.slice_rows(pos_table, 0, m)?;
        let x = g.add(x, pos)?;
        let mut h = g.layer_norm(x, emb_g, emb_b, self.config.layer_norm_eps)?;

        let att_cfg = self.attention_config();
        let j = att_cfg.prefix_len;
        let square = build_mask(&att_cfg, m)?;
        let mask: AttentionMask = match self.mode {
            TuningMode::PrefixTuning => square.query_rows_from(j),
            _ => square,
        };
        if !self.mode.propagates() {
            h = self.dropout(&mut g, h, &mut dropout_rng)?;
        }

        for (l, lv) in layer_vars.iter().enumerate() {
            let ap = AttnParams {
                w_q: lv[0],
                w_k: lv[1],
                w_v: lv[2],
                w_o: lv[3],
            };
            let n_heads = self.config.n_heads;
            let (input, attn) = match self.mode {
                TuningMode::FineTuning => {
                    let a = multi_head_graph(&mut g, h, h, h, &ap, n_heads, Some(&mask), None)?;
                    (h, a)
                }
                TuningMode::PrefixTuning => {
                    let kv = (prefix_vars[2 * l], prefix_vars[2 * l + 1]);
                    let kv = if j == 0 { None } else { Some(kv) };
                    let a = multi_head_graph(&mut g, h, h, h, &ap, n_heads, Some(&mask), kv)?;
                    (h, a)
                }
                TuningMode::PrefixPropagation | TuningMode::PropagationKernel => {
                    let mut d = compose_graph(&mut g, h, prefix_vars[l], l + 1, m)?;
                    if l == 0 {
                        d = self.dropout(&mut g, d, &mut dropout_rng)?;
                    }
                    let a = if self.mode == TuningMode::PrefixPropagation {
                        multi_head_graph(&mut g, d, d, d, &ap, n_heads, Some(&mask), None)?
                    } else {
                        kernel_decomposed_graph(&mut g, d, j, &ap, n_heads, Some(&mask), self.config.alpha)?
                    };
                    (d, a)
                }
            };
            let attn = self.dropout(&mut g, attn, &mut dropout_rng)?;
            let res = g.add(input, attn)?;
            let h1 = g.layer_norm(res, lv[8], lv[9], self.config.layer_norm_eps)?;
            let f = g.matmul(h1, lv[4])?;
            let f = g.add_bias(f, lv[5])?;
            let f = g.gelu(f);
            let f = g.matmul(f, lv[6])?;
            let f = g.add_bias(f, lv[7])?;
            let f = self.dropout(&mut g, f, &mut dropout_rng)?;
            let res = g.add(h1, f)?;
            h = g.layer_norm(res, lv[10], lv[11], self.config.layer_norm_eps)?;
        }

        let cls_state = g.slice_rows(h, self.readout_row(), 1)?;
        let logits = g.matmul(cls_state, head_w)?;
        let logits = g.add_bias(logits, head_b)?;
        Ok(ForwardPass { graph: g, logits, params })
    }

    /// Class logits for one sequence. `train_mode` enables dropout drawn
    /// from `seed`.
    pub fn forward(&self, tokens: &[usize], train_mode: bool, seed: u64) -> Result<Tensor> {
        let mut rng = SplitMix64::new(seed);
        let pass = self.forward_graph(tokens, train_mode.then_some(&mut rng))?;
        let v = pass.graph.value(pass.logits);
        Tensor::new(vec![self.config.n_classes], v.data().to_vec())
    }

    /// Evaluation-mode logits for each sequence.
    pub fn forward_batch(&self, batch: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        batch.iter().map(|t| self.forward(t, false, 0)).collect()
    }

    /// Summed cross-entropy over `batch` and its gradient for every parameter
    /// (zeros for frozen ones), in [`Self::parameters`] order.
    pub fn loss_and_gradients(
        &self,
        batch: &[(Vec<usize>, usize)],
        mut dropout_rng: Option<&mut SplitMix64>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let shapes: Vec<Vec<usize>> = self.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (tokens, label) in batch {
            let mut pass = self.forward_graph(tokens, dropout_rng.as_deref_mut())?;
            let loss = pass.graph.cross_entropy(pass.logits, *label)?;
            total += pass.graph.value(loss).data()[0];
            let mut gs = pass.graph.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(&pass.params) {
                if let Some(gt) = gs.take(v) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok((total, grads))
    }

    /// One forward/backward pass over `batch`. True iff every frozen
    /// parameter's gradient is exactly zero and some prefix gradient is not.
    pub fn freeze_check(&self, batch: &[(Vec<usize>, usize)]) -> Result<bool> {
        if !self.mode.is_prefix() {
            return Err(Error::Config("freeze_check applies to prefix modes only".into()));
        }
        let (_, grads) = self.loss_and_gradients(batch, None)?;
        let mut frozen_zero = true;
        let mut prefix_moves = false;
        for ((name, _), g) in self.parameters().iter().zip(&grads) {
            if !self.is_trainable(name) {
                frozen_zero &= g.data().iter().all(|&v| v == 0.0);
            } else if name.starts_with("prefix.") {
                prefix_moves |= g.data().iter().any(|&v| v != 0.0);
            }
        }
        Ok(frozen_zero && prefix_moves)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let model = ckpt.model;
        model.config.validate()?;
        let expected = EncoderModel::new(model.config.clone(), model.mode)?;
        for ((name, a), (_, b)) in model.parameters().iter().zip(expected.parameters()) {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!("checkpoint tensor {name} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        if model.parameters().len() != expected.parameters().len() {
            return Err(Error::Config("checkpoint parameter list does not match its mode".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a EncoderModel,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: EncoderModel,
}
