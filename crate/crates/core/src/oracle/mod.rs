//! Model query surface.
//!
//! The analysis pipeline only ever sees logits, a pad embedding and an
//! optional attention record. Three implementations are provided: a
//! closed-form [`AnalyticOracle`], a seeded [`ToyTransformer`] and a
//! [`ReplayOracle`] serving recorded responses from disk.

mod analytic;
mod counting;
pub mod replay;
mod toy;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, SparseLogits, TokenMatrix};

pub use analytic::AnalyticOracle;
pub use counting::CountingOracle;
pub use replay::ReplayOracle;
pub use toy::{ToyConfig, ToyTransformer};

/// Input-format behaviors of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleCapabilities {
    /// Repeat a lone token `ceil(sqrt(L))` times to form a synthesized line.
    pub repeat_for_single_input: bool,
    /// Insert an image-newline marker after each row of tokens.
    pub uses_image_newline: bool,
    /// Token ids that are skipped (once) when they are the first decoded token.
    pub article_ids: BTreeSet<u32>,
    pub vocab_size: usize,
    pub embed_dim: usize,
}

impl OracleCapabilities {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidInput("vocab_size must be >= 2".into()));
        }
        if let Some(bad) = self
            .article_ids
            .iter()
            .find(|&&a| a as usize >= self.vocab_size)
        {
            return Err(Error::InvalidInput(format!(
                "article id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// A sequence of visual tokens as presented to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    tokens: TokenMatrix,
    newline_after: Vec<usize>,
    grid: Option<(usize, usize)>,
}

impl VisualInput {
    pub fn new(
        tokens: TokenMatrix,
        newline_after: Vec<usize>,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        let len = tokens.rows();
        if newline_after.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "newline positions must be strictly increasing".into(),
            ));
        }
        if newline_after.last().is_some_and(|&p| p >= len) {
            return Err(Error::InvalidInput(format!(
                "newline position beyond the {len} tokens"
            )));
        }
        if let Some((rows, cols)) = grid {
            if rows * cols != len {
                return Err(Error::Shape(format!(
                    "grid {rows}x{cols} does not cover {len} tokens"
                )));
            }
        }
        Ok(Self {
            tokens,
            newline_after,
            grid,
        })
    }

    /// Tokens laid out on a `rows x cols` grid, with a newline marker after
    /// every grid row when the model uses them.
    pub fn grid_layout(
        tokens: TokenMatrix,
        rows: usize,
        cols: usize,
        caps: &OracleCapabilities,
    ) -> Result<Self> {
        let newlines = if caps.uses_image_newline {
            (1..=rows).map(|r| r * cols - 1).collect()
        } else {
            Vec::new()
        };
        Self::new(tokens, newlines, Some((rows, cols)))
    }

    /// Input for the single-token experiment. Models that refuse a lone token
    /// get it repeated `ceil(sqrt(reference_len))` times, followed by one
    /// newline marker when they use them.
    pub fn single_token(
        v: &EmbeddingVector,
        caps: &OracleCapabilities,
        reference_len: usize,
    ) -> Result<Self> {
        if !caps.repeat_for_single_input {
            let tokens = TokenMatrix::new(1, v.dim(), v.as_slice().to_vec())?;
            return Self::new(tokens, Vec::new(), None);
        }
        let repeats = ceil_sqrt(reference_len).max(1);
        let rows = vec![v.as_slice(); repeats];
        let tokens = TokenMatrix::from_rows(&rows)?;
        let newlines = if caps.uses_image_newline {
            vec![repeats - 1]
        } else {
            Vec::new()
        };
        Self::new(tokens, newlines, Some((1, repeats)))
    }

    pub fn tokens(&self) -> &TokenMatrix {
        &self.tokens
    }

    pub fn newline_after(&self) -> &[usize] {
        &self.newline_after
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Smallest `r` with `r * r >= n`.
pub fn ceil_sqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r < n {
        r += 1;
    }
    while r > 0 && (r - 1) * (r - 1) >= n {
        r -= 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptKind {
    DescribeSingleToken,
    DescribeRegion,
    DescribeImage,
}

/// Which experiment a query belongs to. The first five are the request
/// kinds of the replay wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Single,
    RegionSrc,
    RegionAblate,
    GlobalSrc,
    GlobalAblate,
    /// Evaluation of a pruned token set; never recorded.
    PrunedImage,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Single => "single",
            RequestKind::RegionSrc => "region_src",
            RequestKind::RegionAblate => "region_ablate",
            RequestKind::GlobalSrc => "global_src",
            RequestKind::GlobalAblate => "global_ablate",
            RequestKind::PrunedImage => "pruned_image",
        }
    }

    pub fn is_ablation(self) -> bool {
        matches!(self, RequestKind::RegionAblate | RequestKind::GlobalAblate)
    }
}

/// Identity of a query, independent of the embeddings it carries.
///
/// Conventions: `single`, `region_src` and `region_ablate` carry
/// `target_idx`; region kinds also carry the sorted `region`; `global_src`
/// carries neither; `global_ablate` carries only the sorted `region`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestKey {
    pub image_id: String,
    pub kind: RequestKind,
    pub target_idx: Option<usize>,
    pub region: Option<Vec<usize>>,
}

impl RequestKey {
    pub fn single(image_id: &str, target: usize) -> Self {
        Self {
            image_id: image_id.to_owned(),
            kind: RequestKind::Single,
            target_idx: Some(target),
            region: None,
        }
    }

    pub fn region(image_id: &str, kind: RequestKind, target: usize, region: &[usize]) -> Self {
        Self {
            image_id: image_id.to_owned(),
            kind,
            target_idx: Some(target),
            region: Some(region.to_vec()),
        }
    }

    pub fn global_src(image_id: &str) -> Self {
        Self {
            image_id: image_id.to_owned(),
            kind: RequestKind::GlobalSrc,
            target_idx: None,
            region: None,
        }
    }

    pub fn global_ablate(image_id: &str, region: &[usize]) -> Self {
        Self {
            image_id: image_id.to_owned(),
            kind: RequestKind::GlobalAblate,
            target_idx: None,
            region: Some(region.to_vec()),
        }
    }

    pub fn pruned(image_id: &str) -> Self {
        Self {
            image_id: image_id.to_owned(),
            kind: RequestKind::PrunedImage,
            target_idx: None,
            region: None,
        }
    }
}

impl fmt::Display for RequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.image_id, self.kind.as_str())?;
        if let Some(t) = self.target_idx {
            write!(f, "/target={t}")?;
        }
        if let Some(r) = &self.region {
            write!(f, "/region={r:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    pub key: RequestKey,
    pub input: VisualInput,
    pub prompt: PromptKind,
}

/// Softmaxed attention of the final query position over the visual
/// positions, for every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    layers: usize,
    heads: usize,
    len: usize,
    scores: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(layers: usize, heads: usize, len: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != layers * heads * len || layers == 0 || heads == 0 {
            return Err(Error::Shape(format!(
                "{} attention scores for {layers} layers x {heads} heads x {len} positions",
                scores.len()
            )));
        }
        for (i, row) in scores.chunks_exact(len.max(1)).enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "attention row {i} has a negative or non-finite entry"
                )));
            }
            if row.iter().sum::<f64>() > 1.0 + 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "attention row {i} sums above 1"
                )));
            }
        }
        Ok(Self {
            layers,
            heads,
            len,
            scores,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.heads + head) * self.len;
        &self.scores[start..start + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub logits: SparseLogits,
    /// Decoding step the logits belong to: 1, or 2 after an article skip.
    pub step: u8,
    pub article_skipped: bool,
    pub attention: Option<AttentionRecord>,
}

/// Output of one decoding step of a live model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: SparseLogits,
    pub attention: Option<AttentionRecord>,
}

pub trait ModelOracle: Send + Sync {
    fn model_id(&self) -> &str;

    fn capabilities(&self) -> &OracleCapabilities;

    /// Embedding used to replace ablated visual tokens.
    fn pad_embedding(&self) -> &EmbeddingVector;

    /// Logits for the token following `generated` (empty for the first step).
    fn next_token(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<StepOutput>;

    /// Vocabulary id that stands for planted class `class`, if any.
    fn class_token(&self, _class: usize) -> Option<u32> {
        None
    }

    /// First effective decoding step. When the step-1 argmax is an article,
    /// it is appended once and the step-2 logits are returned instead.
    fn first_step_logits(&self, request: &OracleRequest) -> Result<OracleResponse> {
        let dim = self.capabilities().embed_dim;
        if request.input.tokens().dim() != dim {
            return Err(Error::Shape(format!(
                "input tokens have dim {}, model expects {dim}",
                request.input.tokens().dim()
            )));
        }
        let first = self.next_token(&request.input, request.prompt, &[])?;
        let top = first.logits.argmax();
        if !self.capabilities().article_ids.contains(&top) {
            return Ok(OracleResponse {
                logits: first.logits,
                step: 1,
                article_skipped: false,
                attention: first.attention,
            });
        }
        let second = self.next_token(&request.input, request.prompt, &[top])?;
        Ok(OracleResponse {
            logits: second.logits,
            step: 2,
            article_skipped: true,
            attention: second.attention,
        })
    }
}

impl<O: ModelOracle + ?Sized> ModelOracle for &O {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn capabilities(&self) -> &OracleCapabilities {
        (**self).capabilities()
    }
    fn pad_embedding(&self) -> &EmbeddingVector {
        (**self).pad_embedding()
    }
    fn next_token(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<StepOutput> {
        (**self).next_token(input, prompt, generated)
    }
    fn class_token(&self, class: usize) -> Option<u32> {
        (**self).class_token(class)
    }
    fn first_step_logits(&self, request: &OracleRequest) -> Result<OracleResponse> {
        (**self).first_step_logits(request)
    }
}

impl<O: ModelOracle + ?Sized> ModelOracle for Box<O> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn capabilities(&self) -> &OracleCapabilities {
        (**self).capabilities()
    }
    fn pad_embedding(&self) -> &EmbeddingVector {
        (**self).pad_embedding()
    }
    fn next_token(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<StepOutput> {
        (**self).next_token(input, prompt, generated)
    }
    fn class_token(&self, class: usize) -> Option<u32> {
        (**self).class_token(class)
    }
    fn first_step_logits(&self, request: &OracleRequest) -> Result<OracleResponse> {
        (**self).first_step_logits(request)
    }
}
