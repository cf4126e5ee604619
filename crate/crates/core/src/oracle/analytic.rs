use std::collections::BTreeSet;

use super::{
    AttentionRecord, ModelOracle, OracleCapabilities, PromptKind, StepOutput, VisualInput,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, l2_normalize_rows, EmbeddingVector, SparseLogits, TokenMatrix};
use crate::synthcorpus;

/// Closed-form stand-in for a model.
///
/// Logits are `beta * A^T * meanpool(tokens)` where the columns of `A` are
/// the unit class directions plus an "other" column fixed at zero, so the
/// vocabulary is `0..C` for the classes and `C` for "other". Newline markers
/// are ignored and the prompt kind does not matter.
///
/// The attention record is synthetic: the cosine of each token with the
/// normalized sum of the class directions, clamped at zero and renormalized
/// into a distribution (uniform when every cosine is non-positive), reported
/// as one layer with one head.
#[derive(Debug, Clone)]
pub struct AnalyticOracle {
    model_id: String,
    caps: OracleCapabilities,
    class_dirs: TokenMatrix,
    query: Vec<f64>,
    beta: f64,
    pad: EmbeddingVector,
}

impl AnalyticOracle {
    pub const DEFAULT_BETA: f64 = 5.0;

    pub fn new(class_dirs: &TokenMatrix, beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let class_dirs = l2_normalize_rows(class_dirs);
        let dim = class_dirs.dim();
        let mut query = vec![0.0; dim];
        for row in class_dirs.iter_rows() {
            query.iter_mut().zip(row).for_each(|(q, r)| *q += r);
        }
        let norm = dot(&query, &query).sqrt();
        if norm > 0.0 {
            query.iter_mut().for_each(|q| *q /= norm);
        }
        let caps = OracleCapabilities {
            repeat_for_single_input: false,
            uses_image_newline: false,
            article_ids: BTreeSet::new(),
            vocab_size: class_dirs.rows() + 1,
            embed_dim: dim,
        };
        Ok(Self {
            model_id: format!("analytic-c{}-d{dim}", class_dirs.rows()),
            caps,
            class_dirs,
            query,
            beta,
            pad: EmbeddingVector::zeros(dim),
        })
    }

    /// Oracle whose class directions match a synthetic corpus.
    pub fn for_synthetic(n_classes: usize, dim: usize, beta: f64) -> Result<Self> {
        let dirs: Vec<Vec<f64>> = (0..n_classes)
            .map(|c| synthcorpus::class_direction(c, dim))
            .collect();
        Self::new(&TokenMatrix::from_rows(&dirs)?, beta)
    }

    pub fn n_classes(&self) -> usize {
        self.class_dirs.rows()
    }

    /// Normalized mean of the class directions; stands in for a `[cls]`
    /// embedding in the similarity baseline.
    pub fn cls_embedding(&self) -> EmbeddingVector {
        EmbeddingVector::new(self.query.clone()).expect("finite query direction")
    }

    fn logits(&self, tokens: &TokenMatrix) -> Result<SparseLogits> {
        let mut pooled = vec![0.0; tokens.dim()];
        for row in tokens.iter_rows() {
            pooled.iter_mut().zip(row).for_each(|(p, r)| *p += r);
        }
        let n = tokens.rows() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let mut logits: Vec<f64> = self
            .class_dirs
            .iter_rows()
            .map(|dir| self.beta * dot(dir, &pooled))
            .collect();
        logits.push(0.0);
        SparseLogits::dense(logits)
    }

    fn attention(&self, tokens: &TokenMatrix) -> Result<AttentionRecord> {
        let mut scores: Vec<f64> = tokens
            .iter_rows()
            .map(|row| cosine(row, &self.query).max(0.0))
            .collect();
        let total: f64 = scores.iter().sum();
        if total > 0.0 {
            scores.iter_mut().for_each(|s| *s /= total);
        } else {
            let uniform = 1.0 / scores.len() as f64;
            scores.iter_mut().for_each(|s| *s = uniform);
        }
        AttentionRecord::new(1, 1, tokens.rows(), scores)
    }
}

impl ModelOracle for AnalyticOracle {
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
        _prompt: PromptKind,
        _generated: &[u32],
    ) -> Result<StepOutput> {
        let tokens = input.tokens();
        if tokens.dim() != self.caps.embed_dim {
            return Err(Error::Shape(format!(
                "input dim {} does not match class directions of dim {}",
                tokens.dim(),
                self.caps.embed_dim
            )));
        }
        Ok(StepOutput {
            logits: self.logits(tokens)?,
            attention: Some(self.attention(tokens)?),
        })
    }

    fn class_token(&self, class: usize) -> Option<u32> {
        (class < self.n_classes()).then_some(class as u32)
    }
}
