use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    AttentionRecord, ModelOracle, OracleCapabilities, PromptKind, StepOutput, VisualInput,
};
use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, SparseLogits};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
    /// Scale of the sinusoidal position signal added to every input row.
    pub positional_scale: f64,
    pub article_ids: BTreeSet<u32>,
    pub repeat_for_single_input: bool,
    pub uses_image_newline: bool,
    /// Rows written over the first embedding rows after sampling, so that
    /// known directions map to known token ids.
    pub planted_rows: Vec<Vec<f64>>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 32,
            vocab: 64,
            seed: 0,
            positional_scale: 0.1,
            article_ids: BTreeSet::new(),
            repeat_for_single_input: false,
            uses_image_newline: false,
            planted_rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

/// Tiny seeded causal transformer with tied input/output embeddings.
///
/// The sequence is `visual rows (+ newline rows) ++ prompt ids ++ generated
/// ids`; the logits are those of the last position. All weights are drawn
/// from ChaCha8 seeded with `seed`, as standard normals scaled by
/// `1/sqrt(fan_in)`, in the order: embeddings, newline row, then per layer
/// `Wq, Wk, Wv, Wo, W1, W2`.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    cfg: ToyConfig,
    caps: OracleCapabilities,
    model_id: String,
    embeddings: Vec<f64>,
    newline: Vec<f64>,
    layers: Vec<Layer>,
    pad: EmbeddingVector,
}

const MLP_RATIO: usize = 4;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// `(n x a) * (a x b)`, row-major.
fn matmul(x: &[f64], w: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        let xi = &x[i * a..(i + 1) * a];
        let oi = &mut out[i * b..(i + 1) * b];
        for (k, &xv) in xi.iter().enumerate() {
            let wk = &w[k * b..(k + 1) * b];
            oi.iter_mut().zip(wk).for_each(|(o, wv)| *o += xv * wv);
        }
    }
    out
}

fn rms_norm(x: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(dim) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

impl ToyTransformer {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 || cfg.dim == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidInput(format!(
                "toy transformer needs layers, heads >= 1 and heads dividing dim ({} / {})",
                cfg.dim, cfg.heads
            )));
        }
        if cfg.vocab < 16 {
            return Err(Error::InvalidInput(
                "toy vocabulary must hold at least 16 ids".into(),
            ));
        }
        if cfg.planted_rows.len() > cfg.vocab - 8 {
            return Err(Error::InvalidInput("too many planted rows".into()));
        }
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut embeddings = gaussian(&mut rng, cfg.vocab * d, d);
        let newline = gaussian(&mut rng, d, d);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: gaussian(&mut rng, d * d, d),
                wk: gaussian(&mut rng, d * d, d),
                wv: gaussian(&mut rng, d * d, d),
                wo: gaussian(&mut rng, d * d, d),
                w1: gaussian(&mut rng, d * d * MLP_RATIO, d),
                w2: gaussian(&mut rng, d * MLP_RATIO * d, d * MLP_RATIO),
            })
            .collect();
        for (i, row) in cfg.planted_rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Shape(format!(
                    "planted row {i} has dim {}, model dim is {d}",
                    row.len()
                )));
            }
            embeddings[i * d..(i + 1) * d].copy_from_slice(row);
        }
        let caps = OracleCapabilities {
            repeat_for_single_input: cfg.repeat_for_single_input,
            uses_image_newline: cfg.uses_image_newline,
            article_ids: cfg.article_ids.clone(),
            vocab_size: cfg.vocab,
            embed_dim: d,
        };
        caps.validate()?;
        let pad_id = cfg.vocab - 1;
        let pad = EmbeddingVector::new(embeddings[pad_id * d..(pad_id + 1) * d].to_vec())?;
        Ok(Self {
            model_id: format!(
                "toy-l{}-h{}-d{}-v{}-s{}",
                cfg.layers, cfg.heads, cfg.dim, cfg.vocab, cfg.seed
            ),
            cfg,
            caps,
            embeddings,
            newline,
            layers,
            pad,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Fixed prompt token ids, taken from the top of the vocabulary.
    pub fn prompt_ids(&self, prompt: PromptKind) -> [u32; 3] {
        let base = (self.cfg.vocab - 8) as u32;
        match prompt {
            PromptKind::DescribeSingleToken => [base, base + 1, base + 2],
            PromptKind::DescribeRegion => [base, base + 3, base + 4],
            PromptKind::DescribeImage => [base, base + 5, base + 6],
        }
    }

    fn embedding(&self, id: u32) -> &[f64] {
        let d = self.cfg.dim;
        &self.embeddings[id as usize * d..(id as usize + 1) * d]
    }

    fn add_position(&self, row: &mut [f64], pos: usize) {
        let d = self.cfg.dim;
        for (i, v) in row.iter_mut().enumerate() {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            let s = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            *v += self.cfg.positional_scale * s;
        }
    }

    /// Forward pass; also returns the final position's attention over every
    /// key position, per layer and head.
    fn forward(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<(StepOutput, Vec<Vec<f64>>)> {
        let d = self.cfg.dim;
        let tokens = input.tokens();
        if tokens.dim() != d {
            return Err(Error::Shape(format!(
                "input dim {} does not match model dim {d}",
                tokens.dim()
            )));
        }
        if let Some(&bad) = generated.iter().find(|&&g| g as usize >= self.cfg.vocab) {
            return Err(Error::InvalidInput(format!(
                "generated id {bad} outside vocabulary"
            )));
        }

        let mut x: Vec<f64> = Vec::new();
        let mut visual_positions = Vec::with_capacity(tokens.rows());
        let mut newlines = input.newline_after().iter().peekable();
        for (i, row) in tokens.iter_rows().enumerate() {
            visual_positions.push(x.len() / d);
            x.extend_from_slice(row);
            if newlines.peek() == Some(&&i) {
                newlines.next();
                x.extend_from_slice(&self.newline);
            }
        }
        for id in self
            .prompt_ids(prompt)
            .into_iter()
            .chain(generated.iter().copied())
        {
            x.extend_from_slice(self.embedding(id));
        }
        let n = x.len() / d;
        for (pos, row) in x.chunks_exact_mut(d).enumerate() {
            self.add_position(row, pos);
        }

        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.layers.len() * heads * visual_positions.len());
        let mut full_rows = Vec::with_capacity(self.layers.len() * heads);
        for layer in &self.layers {
            let h = rms_norm(&x, d);
            let q = matmul(&h, &layer.wq, n, d, d);
            let k = matmul(&h, &layer.wk, n, d, d);
            let v = matmul(&h, &layer.wv, n, d, d);
            let mut mixed = vec![0.0; n * d];
            for head in 0..heads {
                let off = head * dh;
                for i in 0..n {
                    let qi = &q[i * d + off..i * d + off + dh];
                    let mut w: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = &k[j * d + off..j * d + off + dh];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    w.iter_mut().for_each(|s| *s = (*s - max).exp());
                    let total: f64 = w.iter().sum();
                    w.iter_mut().for_each(|s| *s /= total);
                    let out = &mut mixed[i * d + off..i * d + off + dh];
                    for (j, wj) in w.iter().enumerate() {
                        let vj = &v[j * d + off..j * d + off + dh];
                        out.iter_mut().zip(vj).for_each(|(o, vv)| *o += wj * vv);
                    }
                    if i == n - 1 {
                        attention.extend(visual_positions.iter().map(|&p| w[p]));
                        full_rows.push(w.clone());
                    }
                }
            }
            let proj = matmul(&mixed, &layer.wo, n, d, d);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            let h2 = rms_norm(&x, d);
            let mut hidden = matmul(&h2, &layer.w1, n, d, d * MLP_RATIO);
            hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            let out = matmul(&hidden, &layer.w2, n, d * MLP_RATIO, d);
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        }

        let last = rms_norm(&x[(n - 1) * d..], d);
        let logits: Vec<f64> = self
            .embeddings
            .chunks_exact(d)
            .map(|e| e.iter().zip(&last).map(|(a, b)| a * b).sum())
            .collect();
        let step = StepOutput {
            logits: SparseLogits::dense(logits)?,
            attention: Some(AttentionRecord::new(
                self.layers.len(),
                heads,
                visual_positions.len(),
                attention,
            )?),
        };
        Ok((step, full_rows))
    }
}

impl ModelOracle for ToyTransformer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn capabilities(&self) -> &OracleCapabilities {
        &self.caps
    }

    fn pad_embedding(&self) -> &EmbeddingVector {
        &self.pad
    }

    fn next_token(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<StepOutput> {
        self.forward(input, prompt, generated).map(|(step, _)| step)
    }

    fn class_token(&self, class: usize) -> Option<u32> {
        (class < self.cfg.planted_rows.len()).then_some(class as u32)
    }
}
