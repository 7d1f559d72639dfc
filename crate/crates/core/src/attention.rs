//! Cross-attention, nested attention and the subject-token controls.
//!
//! The external layer computes `softmax(QKᵀ/√d)·V`. For a bound subject
//! token `s*`, nested attention replaces the single value `V[s*]` with one
//! value per query, `softmax(q·K̆ᵀ/√d)·V̆`, where `K̆` and `V̆` are
//! projections of encoder tokens. Keys and queries of the external layer
//! are never modified, so with `λ = 1` the external attention weights are
//! exactly those of the unbound model.
//!
//! Every computation is expressed on the autodiff [`Graph`]; the free
//! functions at the bottom are eager conveniences that run the same graph
//! code on constants.

use std::collections::HashSet;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Host cross-attention projections of one layer (single head).
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer<T: Scalar = f64> {
    pub layer_id: usize,
    /// feature channels → d
    pub w_q: Tensor<T>,
    /// text channels → d
    pub w_k: Tensor<T>,
    /// text channels → d
    pub w_v: Tensor<T>,
}

impl<T: Scalar> CrossAttentionLayer<T> {
    pub fn new(layer_id: usize, feature_dim: usize, text_dim: usize, d: usize, rng: &mut RandomSource) -> Self {
        Self {
            layer_id,
            w_q: init_linear(feature_dim, d, rng),
            w_k: init_linear(text_dim, d, rng),
            w_v: init_linear(text_dim, d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn queries(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let w = g.param(&self.w_q);
        g.matmul(features, w)
    }

    pub fn keys_values(&self, g: &mut Graph<T>, text: Var) -> Result<(Var, Var)> {
        let wk = g.param(&self.w_k);
        let wv = g.param(&self.w_v);
        Ok((g.matmul(text, wk)?, g.matmul(text, wv)?))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)]
    }
}

/// Nested key/value projections attached to one host cross-attention layer.
#[derive(Clone, Debug)]
pub struct NestedAttentionLayer<T: Scalar = f64> {
    pub layer_id: usize,
    /// encoder-token channels → d
    pub w_k: Tensor<T>,
    /// encoder-token channels → d
    pub w_v: Tensor<T>,
}

impl<T: Scalar> NestedAttentionLayer<T> {
    pub fn new(layer_id: usize, token_dim: usize, d: usize, rng: &mut RandomSource) -> Self {
        Self {
            layer_id,
            w_k: init_linear(token_dim, d, rng).trainable(),
            w_v: init_linear(token_dim, d, rng).trainable(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_k.cols()
    }

    /// `(K̆, V̆) = (tokens·W_K̆, tokens·W_V̆)`.
    pub fn project(&self, g: &mut Graph<T>, tokens: Var) -> Result<(Var, Var)> {
        let wk = g.param(&self.w_k);
        let wv = g.param(&self.w_v);
        Ok((g.matmul(tokens, wk)?, g.matmul(tokens, wv)?))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w_k", &self.w_k), ("w_v", &self.w_v)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("w_k", &mut self.w_k), ("w_v", &mut self.w_v)]
    }
}

/// Gaussian init with standard deviation `1/√fan_in`.
pub fn init_linear<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut RandomSource) -> Tensor<T> {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Personalizes one prompt token with encoder tokens.
#[derive(Clone, Debug)]
pub struct SubjectBinding<T: Scalar = f64> {
    pub subject_token_index: usize,
    /// `M × d_enc`
    pub encoder_tokens: Tensor<T>,
    /// Attention factor λ ≥ 1.
    pub lambda: T,
    /// Norm regularization constant α; `None` disables regularization.
    pub alpha: Option<T>,
}

impl<T: Scalar> SubjectBinding<T> {
    pub fn new(subject_token_index: usize, encoder_tokens: Tensor<T>) -> Self {
        Self {
            subject_token_index,
            encoder_tokens,
            lambda: T::one(),
            alpha: Some(T::lit(2.0)),
        }
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alpha(mut self, alpha: Option<T>) -> Self {
        self.alpha = alpha;
        self
    }
}

/// A binding whose encoder tokens already live on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphBinding<T: Scalar = f64> {
    pub subject_token_index: usize,
    pub tokens: Var,
    pub lambda: T,
    pub alpha: Option<T>,
}

impl<T: Scalar> GraphBinding<T> {
    pub fn from_binding(g: &mut Graph<T>, b: &SubjectBinding<T>) -> Self {
        Self {
            subject_token_index: b.subject_token_index,
            tokens: g.constant(b.encoder_tokens.clone()),
            lambda: b.lambda,
            alpha: b.alpha,
        }
    }
}

/// One value vector per external query for a subject token.
#[derive(Clone, Debug, PartialEq)]
pub struct PerQueryValues<T: Scalar = f64> {
    pub layer_id: usize,
    /// `num_queries × d`
    pub values: Tensor<T>,
}

/// Per-layer, per-step attention internals delivered to an [`AttentionSink`].
#[derive(Clone, Debug)]
pub struct AttentionRecord<T: Scalar = f64> {
    pub layer_id: usize,
    /// External attention weights, `n × T`.
    pub external: Tensor<T>,
    pub nested: Vec<NestedRecord<T>>,
}

/// One binding's nested attention internals.
#[derive(Clone, Debug)]
pub struct NestedRecord<T: Scalar = f64> {
    pub token_index: usize,
    /// Nested weights, `n × M`.
    pub weights: Tensor<T>,
    /// Values used for the subject column, `n × d`.
    pub values: Tensor<T>,
    /// `‖V[s*]‖`, the norm of the token's own text value.
    pub text_value_norm: f64,
}

/// Receives attention internals during forward passes.
pub trait AttentionSink<T: Scalar = f64> {
    fn record(&mut self, record: AttentionRecord<T>);
}

/// `QKᵀ/√d` as a graph node.
pub fn attention_logits<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
    let d = g.shape(q)[1];
    let s = g.matmul_t(q, k)?;
    Ok(g.scale(s, T::one() / T::lit(d as f64).sqrt()))
}

/// Raw (unregularized) nested values and the nested attention weights.
pub fn nested_values_graph<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    tokens: Var,
    nested: &NestedAttentionLayer<T>,
) -> Result<(Var, Var)> {
    if g.shape(tokens)[0] == 0 {
        return invalid("nested attention needs at least one encoder token");
    }
    let (k, v) = nested.project(g, tokens)?;
    let logits = attention_logits(g, queries, k)?;
    let w = g.softmax_rows(logits)?;
    Ok((g.matmul(w, v)?, w))
}

/// Rescales every row of `raw` to norm `alpha · ‖v_star‖` (`v_star: 1×d`).
pub fn regularize_graph<T: Scalar>(
    g: &mut Graph<T>,
    raw: Var,
    v_star: Var,
    alpha: T,
    layer_id: usize,
) -> Result<Var> {
    let unit = g.normalize_rows(raw).map_err(|e| match e {
        Error::ZeroNormValue { row, .. } => Error::ZeroNormValue { layer: layer_id, row },
        other => other,
    })?;
    let n = g.norm(v_star);
    let target = g.scale(n, alpha);
    g.mul_scalar(unit, target)
}

fn check_bindings(indices: impl Iterator<Item = usize>, tokens: usize) -> Result<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in indices {
        if s >= tokens {
            return invalid(format!("subject index {s} out of range for {tokens} prompt tokens"));
        }
        if !seen.insert(s) {
            return invalid(format!("duplicate subject index {s}"));
        }
        out.push(s);
    }
    Ok(out)
}

/// External cross-attention with nested subject values, on a graph.
///
/// With no bindings this is plain cross-attention, computed by exactly the
/// same sequence of operations.
pub fn nested_cross_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    text: Var,
    bindings: &[(GraphBinding<T>, &NestedAttentionLayer<T>)],
    ca: &CrossAttentionLayer<T>,
    sink: Option<&mut dyn AttentionSink<T>>,
) -> Result<Var> {
    let tokens = g.shape(text)[0];
    if tokens == 0 {
        return invalid("cross-attention over zero text tokens");
    }
    let cols = check_bindings(bindings.iter().map(|(b, _)| b.subject_token_index), tokens)?;
    let q = ca.queries(g, features)?;
    let (k, v) = ca.keys_values(g, text)?;
    let mut logits = attention_logits(g, q, k)?;
    if bindings.is_empty() {
        let w = g.softmax_rows(logits)?;
        if let Some(sink) = sink {
            sink.record(AttentionRecord {
                layer_id: ca.layer_id,
                external: g.take_value(w),
                nested: Vec::new(),
            });
        }
        return g.matmul(w, v);
    }
    let factors: Vec<(usize, T)> = bindings
        .iter()
        .filter(|(b, _)| b.lambda != T::one())
        .map(|(b, _)| (b.subject_token_index, b.lambda))
        .collect();
    for (b, _) in bindings {
        if b.lambda < T::one() {
            return invalid(format!("attention factor {} < 1", b.lambda));
        }
    }
    if !factors.is_empty() {
        logits = g.attention_factor(logits, &factors)?;
    }
    let w = g.softmax_rows(logits)?;
    let masked = g.mask_columns(w, &cols)?;
    let mut out = g.matmul(masked, v)?;
    let mut captured = Vec::new();
    for (b, nested) in bindings {
        let (raw, nw) = nested_values_graph(g, q, b.tokens, nested)?;
        let vq = match b.alpha {
            Some(alpha) => {
                let v_star = g.select_rows(v, &[b.subject_token_index])?;
                regularize_graph(g, raw, v_star, alpha, ca.layer_id)?
            }
            None => raw,
        };
        let col = g.column(w, b.subject_token_index)?;
        let contrib = g.mul_col(vq, col)?;
        out = g.add(out, contrib)?;
        if sink.is_some() {
            let v_star = g.value(v).row(b.subject_token_index).iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            captured.push(NestedRecord {
                token_index: b.subject_token_index,
                weights: g.take_value(nw),
                values: g.take_value(vq),
                text_value_norm: v_star,
            });
        }
    }
    if let Some(sink) = sink {
        sink.record(AttentionRecord {
            layer_id: ca.layer_id,
            external: g.take_value(w),
            nested: captured,
        });
    }
    Ok(out)
}

/// Plain cross-attention `softmax(QKᵀ/√d)·V`.
pub fn cross_attention_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    layer: &CrossAttentionLayer<T>,
) -> Result<Tensor<T>> {
    nested_cross_attention_forward(features, text_emb, &[], layer)
}

/// Post-softmax external attention weights (`n × T`) with the bindings'
/// attention factors applied.
pub fn external_attention_weights<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    bindings: &[&SubjectBinding<T>],
    layer: &CrossAttentionLayer<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let t = g.constant(text_emb.clone());
    let q = layer.queries(&mut g, f)?;
    let (k, _) = layer.keys_values(&mut g, t)?;
    let mut logits = attention_logits(&mut g, q, k)?;
    let factors: Vec<(usize, T)> = bindings
        .iter()
        .filter(|b| b.lambda != T::one())
        .map(|b| (b.subject_token_index, b.lambda))
        .collect();
    if !factors.is_empty() {
        logits = g.attention_factor(logits, &factors)?;
    }
    let w = g.softmax_rows(logits)?;
    Ok(g.take_value(w))
}

/// Query-dependent values `softmax(q·K̆ᵀ/√d)·V̆` before regularization.
pub fn nested_values<T: Scalar>(
    queries: &Tensor<T>,
    binding: &SubjectBinding<T>,
    nested: &NestedAttentionLayer<T>,
) -> Result<PerQueryValues<T>> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let tokens = g.constant(binding.encoder_tokens.clone());
    let (raw, _) = nested_values_graph(&mut g, q, tokens, nested)?;
    Ok(PerQueryValues {
        layer_id: nested.layer_id,
        values: g.take_value(raw),
    })
}

/// Hard-rescales every row to norm `alpha · v_star_norm`.
pub fn regularize_values<T: Scalar>(raw: &PerQueryValues<T>, v_star_norm: T, alpha: T) -> Result<PerQueryValues<T>> {
    if !(alpha > T::zero()) {
        return invalid("alpha must be positive");
    }
    let mut g = Graph::new();
    let r = g.constant(raw.values.clone());
    let unit = g.normalize_rows(r).map_err(|e| match e {
        Error::ZeroNormValue { row, .. } => Error::ZeroNormValue {
            layer: raw.layer_id,
            row,
        },
        other => other,
    })?;
    let target = g.constant(Tensor::filled(&[1, 1], v_star_norm * alpha));
    let out = g.mul_scalar(unit, target)?;
    Ok(PerQueryValues {
        layer_id: raw.layer_id,
        values: g.take_value(out),
    })
}

/// `max(x, λx)` on column `subject_index` of pre-softmax logits.
pub fn apply_attention_factor<T: Scalar>(logits: &Tensor<T>, subject_index: usize, lambda: T) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.attention_factor(x, &[(subject_index, lambda)])?;
    Ok(g.take_value(y))
}

/// The per-query value bank: `V_q[s] = vq[q]` for bound tokens, `V[s]` otherwise.
#[derive(Clone, Debug)]
pub struct ValueBank<T: Scalar = f64> {
    base: Tensor<T>,
    overrides: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> ValueBank<T> {
    pub fn new(base: Tensor<T>) -> Self {
        Self {
            base,
            overrides: Vec::new(),
        }
    }

    pub fn with_override(mut self, subject_index: usize, vq: &PerQueryValues<T>) -> Result<Self> {
        if subject_index >= self.base.rows() {
            return invalid(format!(
                "subject index {subject_index} out of range for {} tokens",
                self.base.rows()
            ));
        }
        if vq.values.cols() != self.base.cols() {
            return Err(Error::ShapeMismatch {
                op: "assemble_per_query_values",
                lhs: self.base.shape().to_vec(),
                rhs: vq.values.shape().to_vec(),
            });
        }
        if let Some((_, first)) = self.overrides.first() {
            if first.rows() != vq.values.rows() {
                return invalid("per-query value banks disagree on query count");
            }
        }
        if self.overrides.iter().any(|(s, _)| *s == subject_index) {
            return invalid(format!("duplicate subject index {subject_index}"));
        }
        self.overrides.push((subject_index, vq.values.clone()));
        Ok(self)
    }

    pub fn tokens(&self) -> usize {
        self.base.rows()
    }

    /// Value of token `s` as seen by query `q`.
    pub fn value(&self, q: usize, s: usize) -> &[T] {
        match self.overrides.iter().find(|(idx, _)| *idx == s) {
            Some((_, vq)) => vq.row(q),
            None => self.base.row(s),
        }
    }

    /// `out[q] = Σ_s weights[q][s] · V_q[s]`, one query at a time.
    pub fn attend(&self, weights: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, t) = (weights.rows(), weights.cols());
        if t != self.tokens() {
            return Err(Error::ShapeMismatch {
                op: "attend",
                lhs: weights.shape().to_vec(),
                rhs: self.base.shape().to_vec(),
            });
        }
        let d = self.base.cols();
        let mut out = vec![T::zero(); n * d];
        for q in 0..n {
            for s in 0..t {
                let w = weights.at(q, s);
                for (o, &v) in out[q * d..(q + 1) * d].iter_mut().zip(self.value(q, s)) {
                    *o += w * v;
                }
            }
        }
        Tensor::from_vec(&[n, d], out)
    }
}

/// Builds the per-query value bank for a single bound token.
pub fn assemble_per_query_values<T: Scalar>(
    base_v: &Tensor<T>,
    subject_index: usize,
    vq: &PerQueryValues<T>,
) -> Result<ValueBank<T>> {
    ValueBank::new(base_v.clone()).with_override(subject_index, vq)
}

/// Nested cross-attention on constants; see [`nested_cross_attention_graph`].
pub fn nested_cross_attention_forward<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    bindings: &[(&SubjectBinding<T>, &NestedAttentionLayer<T>)],
    ca: &CrossAttentionLayer<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let t = g.constant(text_emb.clone());
    let gb: Vec<_> = bindings
        .iter()
        .map(|(b, n)| (GraphBinding::from_binding(&mut g, b), *n))
        .collect();
    let out = nested_cross_attention_graph(&mut g, f, t, &gb, ca, None)?;
    Ok(g.take_value(out))
}

/// The value bank actually used by [`nested_cross_attention_forward`]:
/// regularized nested values for every binding over the layer's base values.
pub fn nested_value_bank<T: Scalar>(
    features: &Tensor<T>,
    text_emb: &Tensor<T>,
    bindings: &[(&SubjectBinding<T>, &NestedAttentionLayer<T>)],
    ca: &CrossAttentionLayer<T>,
) -> Result<ValueBank<T>> {
    let queries = matmul_const(features, &ca.w_q)?;
    let base = matmul_const(text_emb, &ca.w_v)?;
    check_bindings(bindings.iter().map(|(b, _)| b.subject_token_index), base.rows())?;
    let mut bank = ValueBank::new(base.clone());
    for (b, nested) in bindings {
        let raw = nested_values(&queries, b, nested)?;
        let vq = match b.alpha {
            Some(alpha) => {
                let v_star = base.select_rows(&[b.subject_token_index])?;
                regularize_values(&raw, crate::tensor::l2_norm(&v_star), alpha)?
            }
            None => raw,
        };
        bank = bank.with_override(b.subject_token_index, &vq)?;
    }
    Ok(bank)
}

fn matmul_const<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::matmul(a, b)
}
