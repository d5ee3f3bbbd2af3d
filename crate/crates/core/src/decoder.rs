//! Single-layer cross-attention decoder over the concatenated modality
//! tokens: a question embedding attends over all tokens and a linear head
//! produces class logits.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MoirError, Result};
use crate::linalg::Matrix;
use crate::tokens::{Modality, TokenSequence};

/// Where each modality sits inside the concatenated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpans {
    pub span_a: Range<usize>,
    pub span_b: Range<usize>,
}

impl ModalitySpans {
    pub fn new(len_a: usize, len_b: usize) -> Self {
        Self {
            span_a: 0..len_a,
            span_b: len_a..len_a + len_b,
        }
    }

    pub fn total(&self) -> usize {
        self.span_b.end
    }

    pub fn span(&self, m: Modality) -> &Range<usize> {
        match m {
            Modality::A => &self.span_a,
            Modality::B => &self.span_b,
        }
    }
}

/// Concatenates A's tokens followed by B's along the token axis.
pub fn concat_modalities(
    a: &TokenSequence,
    b: &TokenSequence,
) -> Result<(TokenSequence, ModalitySpans)> {
    if a.batch() != b.batch() || a.dims() != b.dims() {
        return Err(MoirError::input(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (batch, la, dims) = a.shape();
    let lb = b.tokens();
    let mut values = Vec::with_capacity(batch * (la + lb) * dims);
    for i in 0..batch {
        values.extend_from_slice(a.instance(i));
        values.extend_from_slice(b.instance(i));
    }
    let tokens = TokenSequence::new(batch, la + lb, dims, values, a.modality())?;
    Ok((tokens, ModalitySpans::new(la, lb)))
}

/// Learned decoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub dims: usize,
    pub key_dims: usize,
    pub classes: usize,
    pub heads: usize,
    /// `D x d_k`, maps the question embedding to the attention query.
    pub query_proj: Vec<f64>,
    /// `D x d_k`
    pub key_proj: Vec<f64>,
    /// `D x d_k`
    pub value_proj: Vec<f64>,
    /// `d_k x C`
    pub out_proj: Vec<f64>,
    /// `C`
    pub bias: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(dims: usize, key_dims: usize, classes: usize, heads: usize) -> Result<Self> {
        if dims == 0 || key_dims == 0 || classes == 0 {
            return Err(MoirError::config("decoder sizes must be positive"));
        }
        if heads == 0 || !key_dims.is_multiple_of(heads) {
            return Err(MoirError::config(format!(
                "heads ({heads}) must be positive and divide d_k ({key_dims})"
            )));
        }
        Ok(Self {
            dims,
            key_dims,
            classes,
            heads,
            query_proj: vec![0.0; dims * key_dims],
            key_proj: vec![0.0; dims * key_dims],
            value_proj: vec![0.0; dims * key_dims],
            out_proj: vec![0.0; key_dims * classes],
            bias: vec![0.0; classes],
        })
    }

    /// Gaussian initialisation scaled by fan-in; bias starts at zero.
    pub fn init<R: Rng>(
        dims: usize,
        key_dims: usize,
        classes: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(dims, key_dims, classes, heads)?;
        let in_scale = 1.0 / (dims as f64).sqrt();
        let out_scale = 1.0 / (key_dims as f64).sqrt();
        for w in p
            .query_proj
            .iter_mut()
            .chain(p.key_proj.iter_mut())
            .chain(p.value_proj.iter_mut())
        {
            *w = in_scale * rng.sample::<f64, _>(StandardNormal);
        }
        for w in p.out_proj.iter_mut() {
            *w = out_scale * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(p)
    }

    pub fn head_dims(&self) -> usize {
        self.key_dims / self.heads
    }

    /// Parameter tensors in a fixed order: query, key, value, out, bias.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.query_proj,
            &self.key_proj,
            &self.value_proj,
            &self.out_proj,
            &self.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.query_proj,
            &mut self.key_proj,
            &mut self.value_proj,
            &mut self.out_proj,
            &mut self.bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let expect = [
            self.dims * self.key_dims,
            self.dims * self.key_dims,
            self.dims * self.key_dims,
            self.key_dims * self.classes,
            self.classes,
        ];
        if self.heads == 0 || self.key_dims == 0 || !self.key_dims.is_multiple_of(self.heads) {
            return Err(MoirError::input("heads must divide d_k"));
        }
        for (t, n) in self.tensors().iter().zip(expect) {
            if t.len() != n {
                return Err(MoirError::input("decoder tensor has the wrong size"));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(MoirError::input("decoder parameter is not finite"));
            }
        }
        Ok(())
    }

    pub fn key_matrix(&self) -> Matrix {
        Matrix::new(self.dims, self.key_dims, self.key_proj.clone()).expect("validated")
    }
}

/// Attention weights of every head over the concatenated tokens for one
/// instance, `heads x len` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub heads: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

impl AttentionProfile {
    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.len..(h + 1) * self.len]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    len: usize,
    tokens: Vec<f64>,
    questions: Vec<f64>,
    query: Vec<f64>,
    keys: Vec<f64>,
    values: Vec<f64>,
    context: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// One logit vector per batch entry.
    pub logits: Vec<Vec<f64>>,
    pub profiles: Vec<AttentionProfile>,
    pub cache: ForwardCache,
}

fn project(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// Runs the decoder on a batch of concatenated tokens with one question
/// embedding per batch entry.
pub fn decoder_forward(
    tokens: &TokenSequence,
    questions: &[Vec<f64>],
    params: &DecoderParams,
) -> Result<DecoderOutput> {
    let (batch, len, dims) = tokens.shape();
    if dims != params.dims {
        return Err(MoirError::input(format!(
            "tokens have width {dims}, decoder expects {}",
            params.dims
        )));
    }
    if questions.len() != batch || questions.iter().any(|q| q.len() != dims) {
        return Err(MoirError::input("need one question of width D per batch entry"));
    }
    let (dk, heads, classes) = (params.key_dims, params.heads, params.classes);
    let hd = params.head_dims();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut cache = ForwardCache {
        batch,
        len,
        tokens: tokens.values().to_vec(),
        questions: questions.concat(),
        query: vec![0.0; batch * dk],
        keys: vec![0.0; batch * len * dk],
        values: vec![0.0; batch * len * dk],
        context: vec![0.0; batch * dk],
    };
    let mut logits = Vec::with_capacity(batch);
    let mut profiles = Vec::with_capacity(batch);

    for b in 0..batch {
        let q = &mut cache.query[b * dk..(b + 1) * dk];
        project(&questions[b], &params.query_proj, dk, q);
        for l in 0..len {
            let x = tokens.token(b, l);
            let off = (b * len + l) * dk;
            project(x, &params.key_proj, dk, &mut cache.keys[off..off + dk]);
            project(x, &params.value_proj, dk, &mut cache.values[off..off + dk]);
        }
        let q = &cache.query[b * dk..(b + 1) * dk];
        let mut weights = vec![0.0; heads * len];
        let ctx = &mut cache.context[b * dk..(b + 1) * dk];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let row = &mut weights[h * len..(h + 1) * len];
            for (l, w) in row.iter_mut().enumerate() {
                let k = &cache.keys[(b * len + l) * dk..(b * len + l + 1) * dk];
                *w = scale * cols.clone().map(|c| q[c] * k[c]).sum::<f64>();
            }
            softmax_in_place(row);
            for (l, w) in row.iter().enumerate() {
                let v = &cache.values[(b * len + l) * dk..(b * len + l + 1) * dk];
                for c in cols.clone() {
                    ctx[c] += w * v[c];
                }
            }
        }
        let mut out = params.bias.clone();
        for (c, x) in ctx.iter().enumerate() {
            let row = &params.out_proj[c * classes..(c + 1) * classes];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        if out.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(MoirError::NumericalFailure(
                "non-finite value in decoder forward pass".into(),
            ));
        }
        logits.push(out);
        profiles.push(AttentionProfile {
            heads,
            len,
            weights,
        });
    }
    Ok(DecoderOutput {
        logits,
        profiles,
        cache,
    })
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(MoirError::input("need one label per logit row"));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &y) in logits.iter().zip(labels) {
        if y >= row.len() {
            return Err(MoirError::input(format!("label {y} out of range")));
        }
        let mut p = row.clone();
        softmax_in_place(&mut p);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        p[y] -= 1.0;
        p.iter_mut().for_each(|g| *g /= n);
        grads.push(p);
    }
    Ok((loss / n, grads))
}

/// Gradients of a scalar loss with respect to decoder parameters and the
/// concatenated input tokens.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub tokens: Vec<f64>,
}

/// Reverse-mode pass of [`decoder_forward`] given `d loss / d logits`.
pub fn decoder_backward(
    params: &DecoderParams,
    cache: &ForwardCache,
    profiles: &[AttentionProfile],
    dlogits: &[Vec<f64>],
) -> Result<DecoderGrads> {
    let (batch, len) = (cache.batch, cache.len);
    if dlogits.len() != batch || profiles.len() != batch {
        return Err(MoirError::input("upstream gradient batch does not match cache"));
    }
    if dlogits.iter().any(|g| g.len() != params.classes) {
        return Err(MoirError::input("upstream gradient has the wrong class count"));
    }
    let (dims, dk, heads, classes) = (params.dims, params.key_dims, params.heads, params.classes);
    let hd = params.head_dims();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut g = DecoderParams::zeros(dims, dk, classes, heads)?;
    let mut grad_tokens = vec![0.0; batch * len * dims];

    for b in 0..batch {
        let dl = &dlogits[b];
        let ctx = &cache.context[b * dk..(b + 1) * dk];
        for (o, d) in g.bias.iter_mut().zip(dl) {
            *o += d;
        }
        let mut dctx = vec![0.0; dk];
        for c in 0..dk {
            let row = &params.out_proj[c * classes..(c + 1) * classes];
            let grow = &mut g.out_proj[c * classes..(c + 1) * classes];
            for k in 0..classes {
                grow[k] += ctx[c] * dl[k];
                dctx[c] += row[k] * dl[k];
            }
        }

        let q = &cache.query[b * dk..(b + 1) * dk];
        let mut dq = vec![0.0; dk];
        let mut dkeys = vec![0.0; len * dk];
        let mut dvals = vec![0.0; len * dk];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let attn = &profiles[b].head(h);
            let mut dattn = vec![0.0; len];
            for l in 0..len {
                let v = &cache.values[(b * len + l) * dk..(b * len + l + 1) * dk];
                for c in cols.clone() {
                    dvals[l * dk + c] += attn[l] * dctx[c];
                    dattn[l] += dctx[c] * v[c];
                }
            }
            let inner: f64 = attn.iter().zip(&dattn).map(|(a, d)| a * d).sum();
            for l in 0..len {
                let ds = attn[l] * (dattn[l] - inner) * scale;
                let k = &cache.keys[(b * len + l) * dk..(b * len + l + 1) * dk];
                for c in cols.clone() {
                    dq[c] += ds * k[c];
                    dkeys[l * dk + c] += ds * q[c];
                }
            }
        }

        let question = &cache.questions[b * dims..(b + 1) * dims];
        for (i, qi) in question.iter().enumerate() {
            for c in 0..dk {
                g.query_proj[i * dk + c] += qi * dq[c];
            }
        }
        for l in 0..len {
            let x = &cache.tokens[(b * len + l) * dims..(b * len + l + 1) * dims];
            let dkl = &dkeys[l * dk..(l + 1) * dk];
            let dvl = &dvals[l * dk..(l + 1) * dk];
            let gx = &mut grad_tokens[(b * len + l) * dims..(b * len + l + 1) * dims];
            for i in 0..dims {
                let krow = &params.key_proj[i * dk..(i + 1) * dk];
                let vrow = &params.value_proj[i * dk..(i + 1) * dk];
                let mut acc = 0.0;
                for c in 0..dk {
                    g.key_proj[i * dk + c] += x[i] * dkl[c];
                    g.value_proj[i * dk + c] += x[i] * dvl[c];
                    acc += krow[c] * dkl[c] + vrow[c] * dvl[c];
                }
                gx[i] += acc;
            }
        }
    }
    Ok(DecoderGrads {
        params: g,
        tokens: grad_tokens,
    })
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}
