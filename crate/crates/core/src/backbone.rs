//! A tiny frozen dual encoder: an image-like stream and a text-like stream,
//! each a stack of frozen attention blocks with residual skips, mean pooling
//! and L2 normalization. Classification is by cosine similarity between an
//! image feature and the text features of the candidate class templates.

use serde::{Deserialize, Serialize};

use crate::attention::{
    layer_backward, layer_forward, Adapter, FrozenAttention, LayerInsert, LayerTape, ParamGrads, PromptBaseline,
};
use crate::error::{Error, Result};
use crate::numkernel::{dot, norm, Mat, Rng};

/// Token ids of one input sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("token sequence must be non-empty"));
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Text prompt for one class: a fixed three-token prefix followed by the
/// class token, the analog of "a photo of {c}".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub prefix: [usize; 3],
    pub class_token: usize,
}

impl ClassTemplate {
    pub fn tokens(&self) -> TokenSeq {
        let mut ids = self.prefix.to_vec();
        ids.push(self.class_token);
        TokenSeq(ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub depth: usize,
    pub vocab: usize,
    /// Std multiplier of query/key projections (entries are `scale/√d`).
    pub qk_scale: f64,
    /// Std multiplier of value projections.
    pub value_scale: f64,
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { dim: 32, depth: 2, vocab: 256, qk_scale: 1.0, value_scale: 0.5, bias_scale: 0.05, seed: 0 }
    }
}

/// Frozen embedding table plus attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    embed: Mat,
    layers: Vec<FrozenAttention>,
}

impl EncoderStack {
    pub fn new(embed: Mat, layers: Vec<FrozenAttention>) -> Result<Self> {
        if let Some(bad) = layers.iter().find(|l| l.dim() != embed.cols()) {
            return Err(Error::shape(format!(
                "layer dimension {} does not match embedding dimension {}",
                bad.dim(),
                embed.cols()
            )));
        }
        Ok(EncoderStack { embed, layers })
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[FrozenAttention] {
        &self.layers
    }

    pub fn embed(&self) -> &Mat {
        &self.embed
    }

    fn embed_tokens(&self, seq: &TokenSeq) -> Result<Mat> {
        let d = self.dim();
        let mut x = Mat::zeros(seq.len(), d);
        for (i, &t) in seq.ids().iter().enumerate() {
            if t >= self.vocab() {
                return Err(Error::Index { index: t, len: self.vocab() });
            }
            x.row_mut(i).copy_from_slice(self.embed.row(t));
        }
        Ok(x)
    }
}

/// Image-side and text-side encoders sharing one token embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub image: EncoderStack,
    pub text: EncoderStack,
}

impl DualEncoder {
    /// Seeded random construction. The shared embedding table is what makes
    /// an image sequence and a text template mentioning the same class token
    /// similar before any adaptation.
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.vocab == 0 {
            return Err(Error::Config("backbone needs positive dim and vocab".into()));
        }
        let mut rng = Rng::seed(cfg.seed);
        let sd = 1.0 / (cfg.dim as f64).sqrt();
        let embed = Mat::from_fn(cfg.vocab, cfg.dim, |_, _| sd * rng.normal());
        let layers = |rng: &mut Rng| {
            (0..cfg.depth)
                .map(|_| FrozenAttention::random(cfg.dim, cfg.qk_scale, cfg.value_scale, cfg.bias_scale, rng))
                .collect::<Vec<_>>()
        };
        let image = EncoderStack::new(embed.clone(), layers(&mut rng))?;
        let text = EncoderStack::new(embed, layers(&mut rng))?;
        Ok(DualEncoder { image, text })
    }

    pub fn dim(&self) -> usize {
        self.image.dim()
    }

    pub fn depth(&self) -> usize {
        self.image.depth()
    }

    pub fn vocab(&self) -> usize {
        self.image.vocab()
    }
}

/// Parameters attached to the first layers of one encoder.
#[derive(Clone, Copy, Debug)]
pub enum StackInsert<'a> {
    None,
    Residual { adapters: &'a [Adapter], weight: f64 },
    Prepend(&'a [PromptBaseline]),
}

impl<'a> StackInsert<'a> {
    fn count(&self) -> usize {
        match self {
            StackInsert::None => 0,
            StackInsert::Residual { adapters, .. } => adapters.len(),
            StackInsert::Prepend(prompts) => prompts.len(),
        }
    }

    fn layer(&self, h: usize) -> LayerInsert<'a> {
        match *self {
            StackInsert::Residual { adapters, weight } if h < adapters.len() => {
                LayerInsert::Residual { adapter: &adapters[h], weight }
            }
            StackInsert::Prepend(prompts) if h < prompts.len() => LayerInsert::Prepend(&prompts[h]),
            _ => LayerInsert::None,
        }
    }
}

/// Unit-norm feature of `seq`. Layers `0..adapters.len()` use the residual
/// branch at weight `w`; the rest run frozen.
pub fn encode(seq: &TokenSeq, stack: &EncoderStack, adapters: Option<&[Adapter]>, w: f64) -> Result<Vec<f64>> {
    let insert = match adapters {
        Some(adapters) => StackInsert::Residual { adapters, weight: w },
        None => StackInsert::None,
    };
    encode_with(seq, stack, &insert)
}

pub fn encode_with(seq: &TokenSeq, stack: &EncoderStack, insert: &StackInsert<'_>) -> Result<Vec<f64>> {
    Ok(encode_tape(seq, stack, insert)?.0)
}

/// Intermediates of one encoder pass, for backpropagating into the inserted
/// parameters.
pub struct EncodeTape {
    layers: Vec<LayerTape>,
    seq_len: usize,
    pooled_norm: f64,
    feature: Vec<f64>,
}

pub fn encode_tape(seq: &TokenSeq, stack: &EncoderStack, insert: &StackInsert<'_>) -> Result<(Vec<f64>, EncodeTape)> {
    if insert.count() > stack.depth() {
        return Err(Error::shape(format!("{} inserted layers for an encoder of depth {}", insert.count(), stack.depth())));
    }
    let mut x = stack.embed_tokens(seq)?;
    let mut tapes = Vec::with_capacity(stack.depth());
    for (h, layer) in stack.layers.iter().enumerate() {
        let (attn_out, tape) = layer_forward(&x, layer, &insert.layer(h))?;
        x.axpy(1.0, &attn_out)?;
        tapes.push(tape);
    }
    let pooled = x.column_means();
    let pooled_norm = norm(&pooled);
    if !(pooled_norm > 0.0) || !pooled_norm.is_finite() {
        return Err(Error::contract("pooled feature has zero or non-finite norm"));
    }
    let feature: Vec<f64> = pooled.iter().map(|v| v / pooled_norm).collect();
    let tape = EncodeTape { layers: tapes, seq_len: seq.len(), pooled_norm, feature: feature.clone() };
    Ok((feature, tape))
}

impl EncodeTape {
    /// Gradients of `⟨d_feature, feature⟩` for every inserted layer, in layer
    /// order.
    pub fn backward(&self, stack: &EncoderStack, insert: &StackInsert<'_>, d_feature: &[f64]) -> Result<Vec<ParamGrads>> {
        let f = &self.feature;
        let radial = dot(f, d_feature);
        let d_pooled: Vec<f64> =
            f.iter().zip(d_feature).map(|(fi, gi)| (gi - fi * radial) / self.pooled_norm / self.seq_len as f64).collect();
        let mut dx = Mat::zeros(self.seq_len, stack.dim());
        for i in 0..self.seq_len {
            dx.row_mut(i).copy_from_slice(&d_pooled);
        }
        if insert.count() == 0 {
            return Ok(Vec::new());
        }
        let mut params = Vec::with_capacity(insert.count());
        for h in (0..stack.depth()).rev() {
            let grads = layer_backward(&self.layers[h], &stack.layers[h], &insert.layer(h), &dx)?;
            if h < insert.count() {
                params.push(grads.params);
            }
            if h == 0 {
                break;
            }
            dx.axpy(1.0, &grads.d_input)?;
        }
        params.reverse();
        Ok(params)
    }
}

/// Row `j` is the text feature of `classes[j]`.
pub fn class_embeddings(classes: &[ClassTemplate], stack: &EncoderStack, insert: &StackInsert<'_>) -> Result<Mat> {
    if classes.is_empty() {
        return Err(Error::contract("class list must be non-empty"));
    }
    let rows = classes.iter().map(|c| encode_with(&c.tokens(), stack, insert)).collect::<Result<Vec<_>>>()?;
    Mat::from_rows(&rows)
}

/// `logit_scale · ⟨feature, text_j⟩` for every class row.
pub fn logits(feature: &[f64], text_embs: &Mat, logit_scale: f64) -> Result<Vec<f64>> {
    if feature.len() != text_embs.cols() {
        return Err(Error::shape(format!("feature of length {} against {} text columns", feature.len(), text_embs.cols())));
    }
    check_unit(feature, "feature")?;
    for (j, row) in text_embs.row_iter().enumerate() {
        check_unit(row, &format!("text embedding {j}"))?;
    }
    Ok(text_embs.row_iter().map(|row| logit_scale * dot(feature, row)).collect())
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
