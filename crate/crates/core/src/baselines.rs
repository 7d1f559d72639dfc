//! Competing subject-injection mechanisms, built on the same host
//! cross-attention layers and encoder tokens as nested attention.

use std::fmt;
use std::str::FromStr;

use crate::attention::{
    attention_logits, init_linear, nested_cross_attention_graph, regularize_graph, AttentionSink, CrossAttentionLayer,
    GraphBinding, NestedAttentionLayer,
};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MechanismKind {
    Nested,
    DecoupledCA,
    SimpleAdapter,
    GlobalV,
    MultipleTokens,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 5] = [
        MechanismKind::Nested,
        MechanismKind::DecoupledCA,
        MechanismKind::SimpleAdapter,
        MechanismKind::GlobalV,
        MechanismKind::MultipleTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Nested => "nested",
            MechanismKind::DecoupledCA => "decoupled_ca",
            MechanismKind::SimpleAdapter => "simple_adapter",
            MechanismKind::GlobalV => "global_v",
            MechanismKind::MultipleTokens => "multiple_tokens",
        }
    }

    /// Inference-time λ grid. Decoupled CA uses its adapter scale; the
    /// simple adapter has no knob and evaluates at a single point.
    pub fn lambda_grid(self) -> Vec<f64> {
        match self {
            MechanismKind::DecoupledCA => vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            MechanismKind::SimpleAdapter => vec![1.0],
            _ => vec![1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
        }
    }

    pub fn has_lambda(self) -> bool {
        self != MechanismKind::SimpleAdapter
    }

    /// Whether λ is a decoupled-branch scale in `[0, 1]` rather than an
    /// attention factor `≥ 1`.
    pub fn lambda_is_scale(self) -> bool {
        self == MechanismKind::DecoupledCA
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MechanismKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism {s:?}")))
    }
}

/// Image-side key/value projections of one decoupled cross-attention layer.
/// Queries are shared with the host layer.
#[derive(Clone, Debug)]
pub struct DecoupledCAParams<T: Scalar = f64> {
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

impl<T: Scalar> DecoupledCAParams<T> {
    pub fn new(d_enc: usize, d: usize, rng: &mut RandomSource) -> Self {
        Self {
            w_k: init_linear(d_enc, d, rng).trainable(),
            w_v: init_linear(d_enc, d, rng).trainable(),
        }
    }
}

/// Trainable parameters of whichever mechanism a model uses.
#[derive(Clone, Debug)]
pub enum MechanismParams<T: Scalar = f64> {
    /// One nested layer per host cross-attention layer.
    Nested(Vec<NestedAttentionLayer<T>>),
    DecoupledCA(Vec<DecoupledCAParams<T>>),
    /// Single map from encoder tokens to the text-embedding space.
    SimpleAdapter(Tensor<T>),
    /// Per-layer projection of the mean encoder token to a value.
    GlobalV(Vec<Tensor<T>>),
    /// Per-layer projection of each encoder token to a value.
    MultipleTokens(Vec<Tensor<T>>),
}

impl<T: Scalar> MechanismParams<T> {
    pub fn new(kind: MechanismKind, layers: usize, d_enc: usize, d: usize, text_dim: usize, rng: &mut RandomSource) -> Self {
        match kind {
            MechanismKind::Nested => {
                MechanismParams::Nested((0..layers).map(|l| NestedAttentionLayer::new(l, d_enc, d, rng)).collect())
            }
            MechanismKind::DecoupledCA => {
                MechanismParams::DecoupledCA((0..layers).map(|_| DecoupledCAParams::new(d_enc, d, rng)).collect())
            }
            MechanismKind::SimpleAdapter => MechanismParams::SimpleAdapter(init_linear(d_enc, text_dim, rng).trainable()),
            MechanismKind::GlobalV => {
                MechanismParams::GlobalV((0..layers).map(|_| init_linear(d_enc, d, rng).trainable()).collect())
            }
            MechanismKind::MultipleTokens => {
                MechanismParams::MultipleTokens((0..layers).map(|_| init_linear(d_enc, d, rng).trainable()).collect())
            }
        }
    }

    pub fn kind(&self) -> MechanismKind {
        match self {
            MechanismParams::Nested(_) => MechanismKind::Nested,
            MechanismParams::DecoupledCA(_) => MechanismKind::DecoupledCA,
            MechanismParams::SimpleAdapter(_) => MechanismKind::SimpleAdapter,
            MechanismParams::GlobalV(_) => MechanismKind::GlobalV,
            MechanismParams::MultipleTokens(_) => MechanismKind::MultipleTokens,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            MechanismParams::Nested(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    out.extend(l.params().into_iter().map(|(n, t)| (format!("nested{i}.{n}"), t)));
                }
            }
            MechanismParams::DecoupledCA(ls) => {
                for (i, l) in ls.iter().enumerate() {
                    out.push((format!("decoupled{i}.w_k"), &l.w_k));
                    out.push((format!("decoupled{i}.w_v"), &l.w_v));
                }
            }
            MechanismParams::SimpleAdapter(p) => out.push(("adapter.proj".into(), p)),
            MechanismParams::GlobalV(ps) => {
                out.extend(ps.iter().enumerate().map(|(i, p)| (format!("global_v{i}.proj"), p)));
            }
            MechanismParams::MultipleTokens(ps) => {
                out.extend(ps.iter().enumerate().map(|(i, p)| (format!("multi{i}.proj"), p)));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            MechanismParams::Nested(ls) => {
                for (i, l) in ls.iter_mut().enumerate() {
                    out.extend(l.params_mut().into_iter().map(|(n, t)| (format!("nested{i}.{n}"), t)));
                }
            }
            MechanismParams::DecoupledCA(ls) => {
                for (i, l) in ls.iter_mut().enumerate() {
                    out.push((format!("decoupled{i}.w_k"), &mut l.w_k));
                    out.push((format!("decoupled{i}.w_v"), &mut l.w_v));
                }
            }
            MechanismParams::SimpleAdapter(p) => out.push(("adapter.proj".into(), p)),
            MechanismParams::GlobalV(ps) => {
                out.extend(ps.iter_mut().enumerate().map(|(i, p)| (format!("global_v{i}.proj"), p)));
            }
            MechanismParams::MultipleTokens(ps) => {
                out.extend(ps.iter_mut().enumerate().map(|(i, p)| (format!("multi{i}.proj"), p)));
            }
        }
        out
    }

    /// Host cross-attention of layer `layer` with the mechanism's
    /// injection for every binding. For the decoupled mechanism a binding's
    /// `lambda` is the branch scale.
    pub fn cross_attention_graph(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        features: Var,
        text: Var,
        bindings: &[GraphBinding<T>],
        ca: &CrossAttentionLayer<T>,
        sink: Option<&mut dyn AttentionSink<T>>,
    ) -> Result<Var> {
        if bindings.is_empty() {
            return nested_cross_attention_graph(g, features, text, &[], ca, sink);
        }
        match self {
            MechanismParams::Nested(ls) => {
                let nested = layer_of(ls, layer)?;
                let pairs: Vec<_> = bindings.iter().map(|b| (*b, nested)).collect();
                nested_cross_attention_graph(g, features, text, &pairs, ca, sink)
            }
            MechanismParams::DecoupledCA(ls) => {
                let p = layer_of(ls, layer)?;
                let branches: Vec<_> = bindings.iter().map(|b| (b.tokens, b.lambda)).collect();
                decoupled_ca_graph(g, features, text, &branches, ca, p)
            }
            MechanismParams::SimpleAdapter(proj) => {
                let pw = g.param(proj);
                let mut projected = Vec::with_capacity(bindings.len());
                for b in bindings {
                    projected.push(g.matmul(b.tokens, pw)?);
                }
                simple_adapter_graph(g, features, text, &projected, ca)
            }
            MechanismParams::GlobalV(ps) => {
                let p = layer_of(ps, layer)?;
                let pairs: Vec<_> = bindings.iter().map(|b| (*b, p)).collect();
                global_v_graph(g, features, text, &pairs, ca)
            }
            MechanismParams::MultipleTokens(ps) => {
                let pw = g.param(layer_of(ps, layer)?);
                let mut groups = Vec::with_capacity(bindings.len());
                for b in bindings {
                    let values = g.matmul(b.tokens, pw)?;
                    groups.push((b.subject_token_index, values, b.lambda));
                }
                multiple_tokens_graph(g, features, text, &groups, ca)
            }
        }
    }
}

fn layer_of<X>(items: &[X], layer: usize) -> Result<&X> {
    items
        .get(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("no injection parameters for layer {layer}")))
}

/// Text attention plus `scale ·` image attention with shared queries.
/// A zero scale skips its branch.
pub fn decoupled_ca_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    text: Var,
    branches: &[(Var, T)],
    ca: &CrossAttentionLayer<T>,
    params: &DecoupledCAParams<T>,
) -> Result<Var> {
    let q = ca.queries(g, features)?;
    let (k, v) = ca.keys_values(g, text)?;
    let logits = attention_logits(g, q, k)?;
    let w = g.softmax_rows(logits)?;
    let mut out = g.matmul(w, v)?;
    let wk = g.param(&params.w_k);
    let wv = g.param(&params.w_v);
    for &(tokens, scale) in branches {
        if scale < T::zero() {
            return invalid(format!("decoupled scale {scale} < 0"));
        }
        if scale == T::zero() {
            continue;
        }
        let ki = g.matmul(tokens, wk)?;
        let vi = g.matmul(tokens, wv)?;
        let li = attention_logits(g, q, ki)?;
        let wi = g.softmax_rows(li)?;
        let oi = g.matmul(wi, vi)?;
        let oi = g.scale(oi, scale);
        out = g.add(out, oi)?;
    }
    Ok(out)
}

/// Plain cross-attention over text tokens followed by projected image tokens.
pub fn simple_adapter_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    text: Var,
    image_tokens: &[Var],
    ca: &CrossAttentionLayer<T>,
) -> Result<Var> {
    let all = if image_tokens.is_empty() {
        text
    } else {
        let mut parts = vec![text];
        parts.extend_from_slice(image_tokens);
        g.concat_rows(&parts)?
    };
    nested_cross_attention_graph(g, features, all, &[], ca, None)
}

/// Replaces `V[s*]` with `mean(tokens)·proj` for every query; keys unchanged.
/// The binding's `alpha` rescales the value as in nested attention.
pub fn global_v_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    text: Var,
    bindings: &[(GraphBinding<T>, &Tensor<T>)],
    ca: &CrossAttentionLayer<T>,
) -> Result<Var> {
    let tokens = g.shape(text)[0];
    let cols = distinct_subjects(bindings.iter().map(|(b, _)| b.subject_token_index), tokens)?;
    let q = ca.queries(g, features)?;
    let (k, v) = ca.keys_values(g, text)?;
    let n = g.shape(q)[0];
    let mut logits = attention_logits(g, q, k)?;
    let factors = attention_factors(bindings.iter().map(|(b, _)| b))?;
    if !factors.is_empty() {
        logits = g.attention_factor(logits, &factors)?;
    }
    let w = g.softmax_rows(logits)?;
    let masked = g.mask_columns(w, &cols)?;
    let mut out = g.matmul(masked, v)?;
    for (b, proj) in bindings {
        if g.shape(b.tokens)[0] == 0 {
            return invalid("global V needs at least one encoder token");
        }
        let mean = g.mean_rows(b.tokens)?;
        let pw = g.param(proj);
        let mut u = g.matmul(mean, pw)?;
        if let Some(alpha) = b.alpha {
            let v_star = g.select_rows(v, &[b.subject_token_index])?;
            u = regularize_graph(g, u, v_star, alpha, ca.layer_id)?;
        }
        let rows = g.select_rows(u, &vec![0; n])?;
        let col = g.column(w, b.subject_token_index)?;
        let contrib = g.mul_col(rows, col)?;
        out = g.add(out, contrib)?;
    }
    Ok(out)
}

/// Replaces each subject token by `M` tokens whose keys all equal the
/// subject's key and whose values are the given rows. The softmax runs over
/// the remaining `T − k` text logits plus every copy; the attention factor
/// applies to each copy.
pub fn multiple_tokens_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    text: Var,
    groups: &[(usize, Var, T)],
    ca: &CrossAttentionLayer<T>,
) -> Result<Var> {
    let tokens = g.shape(text)[0];
    let cols = distinct_subjects(groups.iter().map(|(s, _, _)| *s), tokens)?;
    let q = ca.queries(g, features)?;
    let (k, v) = ca.keys_values(g, text)?;
    let logits = attention_logits(g, q, k)?;
    let keep: Vec<usize> = (0..tokens).filter(|c| !cols.contains(c)).collect();
    let mut parts = vec![g.select_cols(logits, &keep)?];
    let mut spans = Vec::with_capacity(groups.len());
    let mut offset = keep.len();
    for &(s, values, lambda) in groups {
        let m = g.shape(values)[0];
        if m == 0 {
            return invalid("multiple tokens needs at least one encoder value");
        }
        if lambda < T::one() {
            return invalid(format!("attention factor {lambda} < 1"));
        }
        let mut copies = g.select_cols(logits, &vec![s; m])?;
        if lambda != T::one() {
            let all: Vec<(usize, T)> = (0..m).map(|c| (c, lambda)).collect();
            copies = g.attention_factor(copies, &all)?;
        }
        parts.push(copies);
        spans.push((offset, m, values));
        offset += m;
    }
    let ext = g.concat_cols(&parts)?;
    let w = g.softmax_rows(ext)?;
    let w_keep = g.select_cols(w, &(0..keep.len()).collect::<Vec<_>>())?;
    let v_keep = g.select_rows(v, &keep)?;
    let mut out = g.matmul(w_keep, v_keep)?;
    for (start, m, values) in spans {
        let wb = g.select_cols(w, &(start..start + m).collect::<Vec<_>>())?;
        let contrib = g.matmul(wb, values)?;
        out = g.add(out, contrib)?;
    }
    Ok(out)
}

fn distinct_subjects(indices: impl Iterator<Item = usize>, tokens: usize) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for s in indices {
        if s >= tokens {
            return invalid(format!("subject index {s} out of range for {tokens} prompt tokens"));
        }
        if out.contains(&s) {
            return invalid(format!("duplicate subject index {s}"));
        }
        out.push(s);
    }
    Ok(out)
}

fn attention_factors<'a, T: Scalar>(bindings: impl Iterator<Item = &'a GraphBinding<T>>) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for b in bindings {
        if b.lambda < T::one() {
            return invalid(format!("attention factor {} < 1", b.lambda));
        }
        if b.lambda != T::one() {
            out.push((b.subject_token_index, b.lambda));
        }
    }
    Ok(out)
}

fn eager<T: Scalar>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.take_value(out))
}

pub fn decoupled_ca_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    enc_tokens: &Tensor<T>,
    layer: &CrossAttentionLayer<T>,
    params: &DecoupledCAParams<T>,
    scale: T,
) -> Result<Tensor<T>> {
    eager(|g| {
        let f = g.constant(features.clone());
        let t = g.constant(text_emb.clone());
        let e = g.constant(enc_tokens.clone());
        decoupled_ca_graph(g, f, t, &[(e, scale)], layer, params)
    })
}

pub fn simple_adapter_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    enc_tokens_projected: &Tensor<T>,
    layer: &CrossAttentionLayer<T>,
) -> Result<Tensor<T>> {
    eager(|g| {
        let f = g.constant(features.clone());
        let t = g.constant(text_emb.clone());
        let extra = if enc_tokens_projected.rows() == 0 {
            vec![]
        } else {
            vec![g.constant(enc_tokens_projected.clone())]
        };
        simple_adapter_graph(g, f, t, &extra, layer)
    })
}

pub fn global_v_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    binding: &crate::attention::SubjectBinding<T>,
    layer: &CrossAttentionLayer<T>,
    projection: &Tensor<T>,
) -> Result<Tensor<T>> {
    eager(|g| {
        let f = g.constant(features.clone());
        let t = g.constant(text_emb.clone());
        let b = GraphBinding::from_binding(g, binding);
        global_v_graph(g, f, t, &[(b, projection)], layer)
    })
}

pub fn multiple_tokens_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    enc_values: &Tensor<T>,
    layer: &CrossAttentionLayer<T>,
    subject_index: usize,
    lambda: T,
) -> Result<Tensor<T>> {
    eager(|g| {
        let f = g.constant(features.clone());
        let t = g.constant(text_emb.clone());
        let vals = g.constant(enc_values.clone());
        multiple_tokens_graph(g, f, t, &[(subject_index, vals, lambda)], layer)
    })
}
