//! Subject encoder: a frozen patch feature extractor followed by a
//! Q-Former whose learned queries attend over the patch features.

use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::attention::{attention_logits, init_linear, NestedAttentionLayer};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::image_io::RgbImage;
use crate::rng::{streams, RandomSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Image as an `H × W × 3` tensor with channels mapped to `[-1, 1]`.
pub fn image_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let data = img.to_signed_unit().into_iter().map(T::lit).collect();
    Tensor::from_vec(&[img.height, img.width, 3], data).expect("pixel count matches shape")
}

/// `H × W × C` → `(H/p · W/p) × (p·p·C)`, patches in row-major order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return invalid(format!("expected an H×W×C image, got shape {s:?}"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return invalid(format!("{h}×{w} image is not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(h * w * c);
    let d = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * w + px * patch) * c;
                out.extend_from_slice(&d[start..start + patch * c]);
            }
        }
    }
    Tensor::from_vec(&[gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor<T>> {
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![gh * gw, patch * patch * c],
        });
    }
    let mut out = vec![T::zero(); h * w * c];
    for (i, row) in patches.data().chunks(patch * patch * c).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for y in 0..patch {
            let start = ((py * patch + y) * w + px * patch) * c;
            out[start..start + patch * c].copy_from_slice(&row[y * patch * c..(y + 1) * patch * c]);
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Frozen linear patch embedding plus positional table.
///
/// Parameters are drawn once from a seeded stream and never receive
/// gradient.
#[derive(Clone, Debug)]
pub struct PatchFeatureExtractor<T: Scalar = f64> {
    pub image_size: usize,
    pub patch_size: usize,
    /// `(patch² · 3) × d_enc`
    pub embed: Tensor<T>,
    /// `num_patches × d_enc`
    pub positional: Tensor<T>,
}

impl<T: Scalar> PatchFeatureExtractor<T> {
    pub fn new(image_size: usize, patch_size: usize, d_enc: usize, seed: u64, positional_std: f64) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return invalid(format!("image size {image_size} not divisible by patch {patch_size}"));
        }
        let mut rng = RandomSource::new(seed, streams::EXTRACTOR);
        let grid = image_size / patch_size;
        Ok(Self {
            image_size,
            patch_size,
            embed: init_linear(patch_size * patch_size * 3, d_enc, &mut rng),
            positional: Tensor::randn(&[grid * grid, d_enc], positional_std, &mut rng),
        })
    }

    pub fn d_enc(&self) -> usize {
        self.embed.cols()
    }

    pub fn num_patches(&self) -> usize {
        self.positional.rows()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `patches(image) · E + positional` for an `H × W × 3` tensor.
    pub fn extract_tensor(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.image_size || s[1] != self.image_size || s[2] != 3 {
            return invalid(format!(
                "extractor expects a {0}×{0}×3 image, got {s:?}",
                self.image_size
            ));
        }
        let mut f = patchify(image, self.patch_size)?.matmul(&self.embed)?;
        f.data_mut()
            .iter_mut()
            .zip(self.positional.data())
            .for_each(|(a, &b)| *a += b);
        Ok(f)
    }

    pub fn extract_features(&self, img: &RgbImage) -> Result<Tensor<T>> {
        if img.width % self.patch_size != 0 || img.height % self.patch_size != 0 {
            return invalid(format!(
                "{}×{} image is not divisible into {}-pixel patches",
                img.width, img.height, self.patch_size
            ));
        }
        self.extract_tensor(&image_tensor(img))
    }

    /// SHA-256 of the parameters' little-endian f64 bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.embed, &self.positional] {
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Cross-attention from query states to features, then a two-layer MLP,
/// both residual.
#[derive(Clone, Debug)]
pub struct QFormerBlock<T: Scalar = f64> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> QFormerBlock<T> {
    fn new(d_enc: usize, hidden: usize, rng: &mut RandomSource) -> Self {
        Self {
            w_q: init_linear(d_enc, d_enc, rng).trainable(),
            w_k: init_linear(d_enc, d_enc, rng).trainable(),
            w_v: init_linear(d_enc, d_enc, rng).trainable(),
            w_o: init_linear(d_enc, d_enc, rng).trainable(),
            w1: init_linear(d_enc, hidden, rng).trainable(),
            b1: Tensor::zeros(&[1, hidden]).trainable(),
            w2: init_linear(hidden, d_enc, rng).trainable(),
            b2: Tensor::zeros(&[1, d_enc]).trainable(),
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// Returns the new query states and the attention weights `M × P`.
    pub fn forward(&self, g: &mut Graph<T>, h: Var, features: Var) -> Result<(Var, Var)> {
        let hn = g.layer_norm(h)?;
        let wq = g.param(&self.w_q);
        let wk = g.param(&self.w_k);
        let wv = g.param(&self.w_v);
        let wo = g.param(&self.w_o);
        let q = g.matmul(hn, wq)?;
        let k = g.matmul(features, wk)?;
        let v = g.matmul(features, wv)?;
        let logits = attention_logits(g, q, k)?;
        let w = g.softmax_rows(logits)?;
        let a = g.matmul(w, v)?;
        let a = g.matmul(a, wo)?;
        let h = g.add(h, a)?;
        let hn = g.layer_norm(h)?;
        let w1 = g.param(&self.w1);
        let b1 = g.param(&self.b1);
        let w2 = g.param(&self.w2);
        let b2 = g.param(&self.b2);
        let z = g.matmul(hn, w1)?;
        let z = g.add_row(z, b1)?;
        let z = g.silu(z);
        let z = g.matmul(z, w2)?;
        let z = g.add_row(z, b2)?;
        Ok((g.add(h, z)?, w))
    }
}

/// Learned queries refined by `L` blocks over input features.
#[derive(Clone, Debug)]
pub struct QFormer<T: Scalar = f64> {
    /// `M × d_enc`
    pub learned_queries: Tensor<T>,
    pub blocks: Vec<QFormerBlock<T>>,
}

impl<T: Scalar> QFormer<T> {
    pub fn new(m: usize, d_enc: usize, layers: usize, hidden: usize, rng: &mut RandomSource) -> Self {
        Self {
            learned_queries: Tensor::randn(&[m, d_enc], 0.02, rng).trainable(),
            blocks: (0..layers).map(|_| QFormerBlock::new(d_enc, hidden, rng)).collect(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.learned_queries.rows()
    }

    pub fn d_enc(&self) -> usize {
        self.learned_queries.cols()
    }

    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("learned_queries".to_string(), &self.learned_queries)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("learned_queries".to_string(), &mut self.learned_queries)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out
    }

    /// Output tokens (`M × d_enc`) and the last block's attention weights,
    /// if there is a block.
    pub fn forward_graph(&self, g: &mut Graph<T>, features: Var) -> Result<(Var, Option<Var>)> {
        let s = g.shape(features);
        if s[0] == 0 {
            return invalid("Q-Former needs at least one feature token");
        }
        if s[1] != self.d_enc() {
            return Err(Error::ShapeMismatch {
                op: "qformer_forward",
                lhs: s.to_vec(),
                rhs: vec![s[0], self.d_enc()],
            });
        }
        let mut h = g.param(&self.learned_queries);
        let mut last = None;
        for b in &self.blocks {
            let (next, w) = b.forward(g, h, features)?;
            h = next;
            last = Some(w);
        }
        Ok((h, last))
    }
}

/// Encoder tokens with the source each row range came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T: Scalar = f64> {
    /// `M_total × d_enc`
    pub tokens: Tensor<T>,
    pub provenance: Vec<(String, Range<usize>)>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

pub fn qformer_forward<T: Scalar>(features: &Tensor<T>, qf: &QFormer<T>, source: &str) -> Result<EncoderOutput<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let (h, _) = qf.forward_graph(&mut g, f)?;
    let tokens = g.take_value(h);
    let m = tokens.rows();
    Ok(EncoderOutput {
        tokens,
        provenance: vec![(source.to_string(), 0..m)],
    })
}

/// `(K̆, V̆) = (tokens·W_K̆, tokens·W_V̆)`.
pub fn project_nested_kv<T: Scalar>(
    enc: &EncoderOutput<T>,
    nested: &NestedAttentionLayer<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((enc.tokens.matmul(&nested.w_k)?, enc.tokens.matmul(&nested.w_v)?))
}

/// Stacks encoder outputs in argument order.
pub fn concat_subject_tokens<T: Scalar>(parts: &[EncoderOutput<T>]) -> Result<EncoderOutput<T>> {
    if parts.is_empty() {
        return invalid("nothing to concatenate");
    }
    let tokens = Tensor::concat_rows(&parts.iter().map(|p| &p.tokens).collect::<Vec<_>>())?;
    let mut provenance = Vec::new();
    let mut offset = 0;
    for p in parts {
        for (src, r) in &p.provenance {
            provenance.push((src.clone(), r.start + offset..r.end + offset));
        }
        offset += p.num_tokens();
    }
    Ok(EncoderOutput { tokens, provenance })
}

/// Final-block attention of each learned query, reshaped to the patch grid.
pub fn qformer_attention_maps<T: Scalar>(features: &Tensor<T>, qf: &QFormer<T>, grid: (usize, usize)) -> Result<Vec<Tensor<T>>> {
    if grid.0 * grid.1 != features.rows() {
        return invalid(format!("grid {grid:?} does not cover {} features", features.rows()));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let (_, w) = qf.forward_graph(&mut g, f)?;
    let Some(w) = w else {
        return invalid("a Q-Former without blocks has no attention maps");
    };
    let w = g.value(w);
    (0..w.rows())
        .map(|i| Tensor::from_vec(&[grid.0, grid.1], w.row(i).to_vec()))
        .collect()
}

/// Frozen extractor plus Q-Former: image → encoder tokens.
#[derive(Clone, Debug)]
pub struct SubjectEncoder<T: Scalar = f64> {
    pub extractor: PatchFeatureExtractor<T>,
    pub qformer: QFormer<T>,
}

impl<T: Scalar> SubjectEncoder<T> {
    pub fn encode(&self, img: &RgbImage, source: &str) -> Result<EncoderOutput<T>> {
        qformer_forward(&self.extractor.extract_features(img)?, &self.qformer, source)
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, features: &Tensor<T>) -> Result<Var> {
        let f = g.constant(features.clone());
        Ok(self.qformer.forward_graph(g, f)?.0)
    }
}
