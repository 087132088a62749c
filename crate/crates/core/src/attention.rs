//! Multi-head attention in four flavours: standard, prefix-tuning (trained
//! key/value rows prepended per layer), prefix-propagation (trained rows
//! prepended to the hidden sequence so they also act as queries), and the
//! kernel-decomposed form of prefix-propagation.
//!
//! Every variant is dense: scores are computed for all pairs and the
//! sliding-window pattern is applied as a boolean allow matrix.
//!
//! Two layers of API live here. The `*_graph` functions build nodes on an
//! autograd [`Graph`] and are what the model uses. The plain functions take
//! and return [`Tensor`]s for direct inspection and verification; the kernel
//! ones ([`exp_kernel`], [`kernel_attention`], [`lambda_weights`],
//! [`kernel_decomposed_attention`]) evaluate kernel sums literally rather than
//! going through softmax, so they form an independent route to the same
//! numbers.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SharedMask, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub enum Window {
    Full,
    Size(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Size(usize),
    Name(String),
}

impl TryFrom<WindowRepr> for Window {
    type Error = String;
    fn try_from(r: WindowRepr) -> std::result::Result<Self, String> {
        match r {
            WindowRepr::Size(0) => Err("window must be >= 1 or \"full\"".into()),
            WindowRepr::Size(n) => Ok(Window::Size(n)),
            WindowRepr::Name(s) if s == "full" => Ok(Window::Full),
            WindowRepr::Name(s) => Err(format!("unknown window {s:?}")),
        }
    }
}

impl From<Window> for WindowRepr {
    fn from(w: Window) -> Self {
        match w {
            Window::Full => WindowRepr::Name("full".into()),
            Window::Size(n) => WindowRepr::Size(n),
        }
    }
}

/// Weight of the prefix kernel module in the decomposed form.
///
/// `Exact` uses the per-row softmax share, which reproduces full attention.
/// `Scale(a)` multiplies the prefix kernel scores by `a` before the two
/// modules are renormalized together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum Alpha {
    Exact,
    Scale(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Scale(f64),
    Name(String),
}

impl TryFrom<AlphaRepr> for Alpha {
    type Error = String;
    fn try_from(r: AlphaRepr) -> std::result::Result<Self, String> {
        match r {
            AlphaRepr::Scale(a) => Ok(Alpha::Scale(a)),
            AlphaRepr::Name(s) if s == "exact" => Ok(Alpha::Exact),
            AlphaRepr::Name(s) => Err(format!("unknown alpha {s:?}")),
        }
    }
}

impl From<Alpha> for AlphaRepr {
    fn from(a: Alpha) -> Self {
        match a {
            Alpha::Exact => AlphaRepr::Name("exact".into()),
            Alpha::Scale(v) => AlphaRepr::Scale(v),
        }
    }
}

impl Alpha {
    fn validate(self) -> Result<Self> {
        match self {
            Alpha::Scale(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Config(format!("alpha must be positive, got {a}")))
            }
            a => Ok(a),
        }
    }

    fn log_scale(self) -> f64 {
        match self {
            Alpha::Exact => 0.0,
            Alpha::Scale(a) => a.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub prefix_len: usize,
    pub window: Window,
    /// Token positions (0-based, before any prefix) that attend and are
    /// attended globally.
    pub global_positions: Vec<usize>,
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Boolean allow matrix, `q_len x k_len`, row-major.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    q_len: usize,
    k_len: usize,
    allow: SharedMask,
}

impl AttentionMask {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        Self {
            q_len,
            k_len,
            allow: vec![true; q_len * k_len].into(),
        }
    }

    pub fn from_fn(q_len: usize, k_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(q_len * k_len);
        for i in 0..q_len {
            for j in 0..k_len {
                allow.push(f(i, j));
            }
        }
        Self {
            q_len,
            k_len,
            allow: allow.into(),
        }
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.k_len + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    pub fn shared(&self) -> SharedMask {
        Rc::clone(&self.allow)
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Keeps query rows `start..`; used for prefix-tuning where prefix rows
    /// never act as queries.
    pub fn query_rows_from(&self, start: usize) -> Self {
        Self::from_fn(self.q_len - start, self.k_len, |i, j| self.allowed(i + start, j))
    }

    /// Keeps key columns `start..`.
    pub fn key_cols_from(&self, start: usize) -> Self {
        Self::from_fn(self.q_len, self.k_len - start, |i, j| self.allowed(i, j + start))
    }
}

/// Mask over `prefix_len + seq_len` positions: prefixes first, then tokens.
pub fn build_mask(cfg: &AttentionConfig, seq_len: usize) -> Result<AttentionMask> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be >= 1".into()));
    }
    if let Window::Size(0) = cfg.window {
        return Err(Error::Config("window must be >= 1 or \"full\"".into()));
    }
    let j = cfg.prefix_len;
    let n = j + seq_len;
    let mut global = vec![false; n];
    global[..j].iter_mut().for_each(|g| *g = true);
    for &p in &cfg.global_positions {
        if p >= seq_len {
            return Err(Error::Index { index: p, len: seq_len });
        }
        global[j + p] = true;
    }
    Ok(AttentionMask::from_fn(n, n, |a, b| {
        global[a]
            || global[b]
            || match cfg.window {
                Window::Full => true,
                Window::Size(w) => a.abs_diff(b) <= w,
            }
    }))
}

/// Frozen weights of one encoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl LayerWeights {
    /// Gaussian init with std `1/sqrt(fan_in)`, unit layer-norm gains.
    pub fn random(d_model: usize, d_ff: usize, rng: &mut SplitMix64) -> Self {
        let s = 1.0 / (d_model as f64).sqrt();
        let sf = 1.0 / (d_ff as f64).sqrt();
        Self {
            w_q: gaussian(d_model, d_model, s, rng),
            w_k: gaussian(d_model, d_model, s, rng),
            w_v: gaussian(d_model, d_model, s, rng),
            w_o: gaussian(d_model, d_model, s, rng),
            ffn_w1: gaussian(d_model, d_ff, s, rng),
            ffn_b1: Tensor::zeros(&[d_ff]),
            ffn_w2: gaussian(d_ff, d_model, sf, rng),
            ffn_b2: Tensor::zeros(&[d_model]),
            ln1_gamma: Tensor::filled(&[d_model], 1.0),
            ln1_beta: Tensor::zeros(&[d_model]),
            ln2_gamma: Tensor::filled(&[d_model], 1.0),
            ln2_beta: Tensor::zeros(&[d_model]),
        }
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixKind {
    Propagation,
    PrefixTuning,
}

/// Trainable prefixes for every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrefixBank {
    /// One `j x d` matrix per layer: concatenated at layer 1, summed after.
    Propagation { prefixes: Vec<Tensor> },
    /// Separate `j x d` key and value matrices per layer, split per head.
    PrefixTuning { keys: Vec<Tensor>, values: Vec<Tensor> },
}

impl PrefixBank {
    /// Gaussian init, mean 0, std 0.02.
    pub fn random(kind: PrefixKind, n_layers: usize, prefix_len: usize, d_model: usize, rng: &mut SplitMix64) -> Self {
        let mut draw = || gaussian(prefix_len, d_model, 0.02, rng);
        match kind {
            PrefixKind::Propagation => PrefixBank::Propagation {
                prefixes: (0..n_layers).map(|_| draw()).collect(),
            },
            PrefixKind::PrefixTuning => {
                let mut keys = Vec::with_capacity(n_layers);
                let mut values = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    keys.push(draw());
                    values.push(draw());
                }
                PrefixBank::PrefixTuning { keys, values }
            }
        }
    }

    pub fn kind(&self) -> PrefixKind {
        match self {
            PrefixBank::Propagation { .. } => PrefixKind::Propagation,
            PrefixBank::PrefixTuning { .. } => PrefixKind::PrefixTuning,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> Box<dyn Iterator<Item = (String, &Tensor)> + '_> {
        match self {
            PrefixBank::Propagation { prefixes } => Box::new(
                prefixes
                    .iter()
                    .enumerate()
                    .map(|(l, t)| (format!("prefix.{l}.p"), t)),
            ),
            PrefixBank::PrefixTuning { keys, values } => Box::new(
                keys.iter()
                    .zip(values)
                    .enumerate()
                    .flat_map(|(l, (k, v))| [(format!("prefix.{l}.k"), k), (format!("prefix.{l}.v"), v)]),
            ),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PrefixBank::Propagation { prefixes } => prefixes.iter_mut().collect(),
            PrefixBank::PrefixTuning { keys, values } => keys
                .iter_mut()
                .zip(values.iter_mut())
                .flat_map(|(k, v)| [k, v])
                .collect(),
        }
    }
}

/// Per-query share of softmax mass that falls on prefix keys.
#[derive(Clone, Debug)]
pub struct KernelWeighting {
    /// `n_heads x q_len`.
    pub lambda: Tensor,
    pub alpha: f64,
}

/// Graph handles for the four projection matrices of a layer.
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttnParams {
    pub fn constants(g: &mut Graph, w: &LayerWeights) -> Self {
        Self {
            w_q: g.constant(w.w_q.clone()),
            w_k: g.constant(w.w_k.clone()),
            w_v: g.constant(w.w_v.clone()),
            w_o: g.constant(w.w_o.clone()),
        }
    }
}

fn check_mask_shape(mask: Option<&AttentionMask>, q_len: usize, k_len: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.q_len != q_len || m.k_len != k_len {
            return Err(Error::shape("attention mask", &[m.q_len, m.k_len], &[q_len, k_len]));
        }
    }
    Ok(())
}

/// Multi-head attention on the graph.
///
/// `prefix_kv`, when given, holds `j x d` key and value rows that are
/// prepended to the projected keys and values of every head (prefix-tuning).
/// The mask then has `j + k_len` columns.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_graph(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttnParams,
    n_heads: usize,
    mask: Option<&AttentionMask>,
    prefix_kv: Option<(Var, Var)>,
) -> Result<Var> {
    let q_len = g.value(q_in).rows();
    let j = prefix_kv.map_or(0, |(k, _)| g.value(k).rows());
    let k_len = g.value(k_in).rows() + j;
    check_mask_shape(mask, q_len, k_len)?;
    let q = g.matmul(q_in, p.w_q)?;
    let k = g.matmul(k_in, p.w_k)?;
    let v = g.matmul(v_in, p.w_v)?;
    let d = g.value(q).cols();
    if d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let shared = mask.filter(|m| !m.is_full()).map(AttentionMask::shared);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let mut kh = g.slice_cols(k, h * dh, dh)?;
        let mut vh = g.slice_cols(v, h * dh, dh)?;
        if let Some((pk, pv)) = prefix_kv {
            let pkh = g.slice_cols(pk, h * dh, dh)?;
            let pvh = g.slice_cols(pv, h * dh, dh)?;
            kh = g.concat_rows(&[pkh, kh])?;
            vh = g.concat_rows(&[pvh, vh])?;
        }
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores, shared.clone())?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, p.w_o)
}

/// Builds `D` for layer `layer` (1-based): `cat(P, C)` at layer 1,
/// `cat(P + H[..j], H[j..])` afterwards. The length stays `j + m`.
pub fn compose_graph(g: &mut Graph, input: Var, prefix: Var, layer: usize, m: usize) -> Result<Var> {
    let j = g.value(prefix).rows();
    let rows = g.value(input).rows();
    match layer {
        0 => Err(Error::Config("layers are numbered from 1".into())),
        1 => {
            if rows != m {
                return Err(Error::shape("compose (layer 1)", &[rows], &[m]));
            }
            if j == 0 {
                return Ok(input);
            }
            g.concat_rows(&[prefix, input])
        }
        _ => {
            if rows != j + m {
                return Err(Error::shape("compose (layer > 1)", &[rows], &[j + m]));
            }
            if j == 0 {
                return Ok(input);
            }
            let head = g.slice_rows(input, 0, j)?;
            let tail = g.slice_rows(input, j, m)?;
            let summed = g.add(head, prefix)?;
            g.concat_rows(&[summed, tail])
        }
    }
}

/// Kernel-decomposed prefix-propagation attention on the graph.
///
/// `d_in` holds `j` prefix rows followed by the sequence rows. Each head is
/// the sum of a sequence kernel module and a prefix kernel module weighted
/// per query row by `1 - lambda` and `lambda`, where
/// `lambda = sigmoid(lse_prefix + ln(alpha) - lse_sequence)`. The mask (if
/// any) restricts sequence keys only; prefix keys are always visible.
pub fn kernel_decomposed_graph(
    g: &mut Graph,
    d_in: Var,
    j: usize,
    p: &AttnParams,
    n_heads: usize,
    mask: Option<&AttentionMask>,
    alpha: Alpha,
) -> Result<Var> {
    let alpha = alpha.validate()?;
    let n = g.value(d_in).rows();
    if j > n {
        return Err(Error::shape("kernel_decomposed", &[n], &[j]));
    }
    check_mask_shape(mask, n, n)?;
    if j == 0 {
        return multi_head_graph(g, d_in, d_in, d_in, p, n_heads, mask, None);
    }
    let m = n - j;
    let q = g.matmul(d_in, p.w_q)?;
    let k = g.matmul(d_in, p.w_k)?;
    let v = g.matmul(d_in, p.w_v)?;
    let d = g.value(q).cols();
    if d % n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let seq_mask = mask
        .map(|mk| mk.key_cols_from(j))
        .filter(|mk| !mk.is_full())
        .map(|mk| mk.shared());
    let (kp, kc) = (g.slice_rows(k, 0, j)?, g.slice_rows(k, j, m)?);
    let (vp, vc) = (g.slice_rows(v, 0, j)?, g.slice_rows(v, j, m)?);
    let log_alpha = alpha.log_scale();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kph = g.slice_cols(kp, h * dh, dh)?;
        let kch = g.slice_cols(kc, h * dh, dh)?;
        let vph = g.slice_cols(vp, h * dh, dh)?;
        let vch = g.slice_cols(vc, h * dh, dh)?;

        let sp = g.matmul_t(qh, kph)?;
        let sp = g.scale(sp, scale);
        let sc = g.matmul_t(qh, kch)?;
        let sc = g.scale(sc, scale);

        let ap = g.softmax_rows(sp, None)?;
        let ac = g.softmax_rows(sc, seq_mask.clone())?;
        let prefix_module = g.matmul(ap, vph)?;
        let seq_module = g.matmul(ac, vch)?;

        let lse_p = g.logsumexp_rows(sp, None)?;
        let lse_c = g.logsumexp_rows(sc, seq_mask.clone())?;
        let logit = g.sub(lse_p, lse_c)?;
        let logit = g.add_scalar(logit, log_alpha);
        let lambda = g.sigmoid(logit);
        let neg = g.scale(logit, -1.0);
        let one_minus = g.sigmoid(neg);

        let a = g.row_scale(seq_module, one_minus)?;
        let b = g.row_scale(prefix_module, lambda)?;
        heads.push(g.add(a, b)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, p.w_o)
}

fn with_graph(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

/// `softmax(Q K^T / sqrt(d_h), mask) V` per head, concatenated, then `W_o`.
pub fn standard_attention(
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    w: &LayerWeights,
    mask: &AttentionMask,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    with_graph(|g| {
        let p = AttnParams::constants(g, w);
        let (q, k, v) = (g.constant(q_in.clone()), g.constant(k_in.clone()), g.constant(v_in.clone()));
        multi_head_graph(g, q, k, v, &p, cfg.n_heads, Some(mask), None)
    })
}

/// Tensor form of [`compose_graph`]; `m` is the number of sequence rows.
pub fn compose_propagation_input(input: &Tensor, prefix: &Tensor, layer: usize, m: usize) -> Result<Tensor> {
    with_graph(|g| {
        let x = g.constant(input.clone());
        let p = g.constant(prefix.clone());
        compose_graph(g, x, p, layer, m)
    })
}

/// Attention with `D` supplying queries, keys and values, so prefix rows
/// produce output rows of their own.
pub fn prefix_propagation_attention(
    d_in: &Tensor,
    w: &LayerWeights,
    mask: &AttentionMask,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    standard_attention(d_in, d_in, d_in, w, mask, cfg)
}

/// Prefix-tuning attention for layer `layer` (0-based index into the bank).
///
/// Queries come from `C` only, so the output has `m` rows. `mask` is
/// `m x (j + m)`.
pub fn prefix_tuning_attention(
    c: &Tensor,
    bank: &PrefixBank,
    layer: usize,
    w: &LayerWeights,
    mask: &AttentionMask,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let PrefixBank::PrefixTuning { keys, values } = bank else {
        return Err(Error::Config("prefix_tuning_attention needs a prefix-tuning bank".into()));
    };
    let (pk, pv) = match (keys.get(layer), values.get(layer)) {
        (Some(k), Some(v)) => (k, v),
        _ => return Err(Error::Index { index: layer, len: keys.len() }),
    };
    with_graph(|g| {
        let p = AttnParams::constants(g, w);
        let x = g.constant(c.clone());
        let kv = (g.constant(pk.clone()), g.constant(pv.clone()));
        multi_head_graph(g, x, x, x, &p, cfg.n_heads, Some(mask), Some(kv))
    })
}

/// Per-head attention weight matrices (`q_len x k_len`) for inspection.
///
/// `prefix_kv` prepends prefix-tuning key rows, as in
/// [`prefix_tuning_attention`].
pub fn attention_weights(
    q_in: &Tensor,
    k_in: &Tensor,
    w: &LayerWeights,
    mask: &AttentionMask,
    cfg: &AttentionConfig,
    prefix_keys: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let q = q_in.matmul(&w.w_q)?;
    let mut k = k_in.matmul(&w.w_k)?;
    if let Some(pk) = prefix_keys {
        k = Tensor::concat_rows(&[pk, &k])?;
    }
    check_mask_shape(Some(mask), q.rows(), k.rows())?;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    (0..cfg.n_heads)
        .map(|h| {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let scores = crate::tensor::gemm(&qh, false, &kh, true)?.scale(scale);
            crate::tensor::softmax_rows(&scores, Some(mask.as_slice()))
        })
        .collect()
}

/// `exp(<x_q, x_k> / sqrt(d_k))`.
pub fn exp_kernel(x_q: &[f64], x_k: &[f64], d_k: usize) -> f64 {
    let dot: f64 = x_q.iter().zip(x_k).map(|(a, b)| a * b).sum();
    (dot / (d_k as f64).sqrt()).exp()
}

/// Kernel smoother with the exponential kernel: row `i` is the
/// `k(Q_i, K_j)`-weighted average of the rows of `V`.
pub fn kernel_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let n = k.rows();
    if n == 0 || k.is_empty() {
        return Err(Error::EmptyKeys);
    }
    if v.rows() != n || q.cols() != k.cols() {
        return Err(Error::shape("kernel_attention", k.shape(), v.shape()));
    }
    let d_k = k.cols();
    let dv = v.cols();
    let mut out = vec![0.0; q.rows() * dv];
    for i in 0..q.rows() {
        let weights: Vec<f64> = (0..n).map(|j| exp_kernel(q.row(i), k.row(j), d_k)).collect();
        let total: f64 = weights.iter().sum();
        for (j, wj) in weights.iter().enumerate() {
            for c in 0..dv {
                out[i * dv + c] += wj / total * v.get(j, c);
            }
        }
    }
    Tensor::matrix(q.rows(), dv, out)
}

fn kernel_mass(q_row: &[f64], keys: &Tensor) -> f64 {
    let d_k = keys.cols();
    (0..keys.rows()).map(|j| exp_kernel(q_row, keys.row(j), d_k)).sum()
}

struct HeadProjections {
    q: Tensor,
    kp: Tensor,
    vp: Tensor,
    kc: Tensor,
    vc: Tensor,
}

fn project_head(p: &Tensor, c: &Tensor, w: &LayerWeights, h: usize, dh: usize) -> Result<HeadProjections> {
    let d = Tensor::concat_rows(&[p, c])?;
    let wq = w.w_q.slice_cols(h * dh, dh)?;
    let wk = w.w_k.slice_cols(h * dh, dh)?;
    let wv = w.w_v.slice_cols(h * dh, dh)?;
    Ok(HeadProjections {
        q: d.matmul(&wq)?,
        kp: p.matmul(&wk)?,
        vp: p.matmul(&wv)?,
        kc: c.matmul(&wk)?,
        vc: c.matmul(&wv)?,
    })
}

fn check_decomposition_inputs(d_in: &Tensor, p: &Tensor, c: &Tensor) -> Result<()> {
    if d_in.rows() != p.rows() + c.rows() || d_in.cols() != c.cols() || p.cols() != c.cols() {
        return Err(Error::shape("kernel decomposition", d_in.shape(), c.shape()));
    }
    Ok(())
}

/// Prefix share of the kernel mass for each head and query row of `D`:
/// `sum_p k(q, k_p) / (sum_p k(q, k_p) + sum_c k(q, k_c))`.
pub fn lambda_weights(
    d_in: &Tensor,
    p: &Tensor,
    c: &Tensor,
    w: &LayerWeights,
    cfg: &AttentionConfig,
) -> Result<KernelWeighting> {
    cfg.validate()?;
    check_decomposition_inputs(d_in, p, c)?;
    let dh = cfg.d_head();
    let n = d_in.rows();
    let mut lambda = Vec::with_capacity(cfg.n_heads * n);
    for h in 0..cfg.n_heads {
        let hp = project_head(p, c, w, h, dh)?;
        for i in 0..n {
            let sp = kernel_mass(hp.q.row(i), &hp.kp);
            let sc = kernel_mass(hp.q.row(i), &hp.kc);
            lambda.push(sp / (sp + sc));
        }
    }
    Ok(KernelWeighting {
        lambda: Tensor::matrix(cfg.n_heads, n, lambda)?,
        alpha: 1.0,
    })
}

/// `(1 - lambda) Kern(D W_q, C W_k, C W_v) + lambda Kern(D W_q, P W_k, P W_v)`
/// per head, concatenated and projected by `W_o`. No mask: every query sees
/// every key.
///
/// With [`Alpha::Exact`] this reproduces full attention over `cat(P, C)`.
/// With [`Alpha::Scale`] the prefix kernel mass is multiplied by `alpha`
/// before the two modules are renormalized.
pub fn kernel_decomposed_attention(
    d_in: &Tensor,
    p: &Tensor,
    c: &Tensor,
    w: &LayerWeights,
    cfg: &AttentionConfig,
    alpha: Alpha,
) -> Result<Tensor> {
    cfg.validate()?;
    let alpha = alpha.validate()?;
    check_decomposition_inputs(d_in, p, c)?;
    let a = match alpha {
        Alpha::Exact => 1.0,
        Alpha::Scale(a) => a,
    };
    let dh = cfg.d_head();
    let n = d_in.rows();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let hp = project_head(p, c, w, h, dh)?;
        let seq = kernel_attention(&hp.q, &hp.kc, &hp.vc)?;
        if p.rows() == 0 {
            heads.push(seq);
            continue;
        }
        let pre = kernel_attention(&hp.q, &hp.kp, &hp.vp)?;
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            let sp = a * kernel_mass(hp.q.row(i), &hp.kp);
            let sc = kernel_mass(hp.q.row(i), &hp.kc);
            let lambda = sp / (sp + sc);
            for col in 0..dh {
                out[i * dh + col] = (1.0 - lambda) * seq.get(i, col) + lambda * pre.get(i, col);
            }
        }
        heads.push(Tensor::matrix(n, dh, out)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    Tensor::concat_cols(&refs)?.matmul(&w.w_o)
}

/// Tensor form of [`kernel_decomposed_graph`] with `cfg.prefix_len` prefix rows.
pub fn kernel_propagation_attention(
    d_in: &Tensor,
    w: &LayerWeights,
    mask: Option<&AttentionMask>,
    cfg: &AttentionConfig,
    alpha: Alpha,
) -> Result<Tensor> {
    cfg.validate()?;
    with_graph(|g| {
        let p = AttnParams::constants(g, w);
        let x = g.constant(d_in.clone());
        kernel_decomposed_graph(g, x, cfg.prefix_len, &p, cfg.n_heads, mask, alpha)
    })
}
