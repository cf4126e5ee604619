use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    ModelOracle, OracleCapabilities, OracleRequest, OracleResponse, PromptKind, RequestKind,
    StepOutput, VisualInput,
};
use crate::error::Result;
use crate::numerics::EmbeddingVector;

const KINDS: [RequestKind; 6] = [
    RequestKind::Single,
    RequestKind::RegionSrc,
    RequestKind::RegionAblate,
    RequestKind::GlobalSrc,
    RequestKind::GlobalAblate,
    RequestKind::PrunedImage,
];

/// Wraps an oracle and counts first-step queries per request kind.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    counts: [AtomicUsize; 6],
}

impl<O: ModelOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            counts: Default::default(),
        }
    }

    pub fn count(&self, kind: RequestKind) -> usize {
        let pos = KINDS.iter().position(|&k| k == kind).expect("known kind");
        self.counts[pos].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: ModelOracle> ModelOracle for CountingOracle<O> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn capabilities(&self) -> &OracleCapabilities {
        self.inner.capabilities()
    }

    fn pad_embedding(&self) -> &EmbeddingVector {
        self.inner.pad_embedding()
    }

    fn next_token(
        &self,
        input: &VisualInput,
        prompt: PromptKind,
        generated: &[u32],
    ) -> Result<StepOutput> {
        self.inner.next_token(input, prompt, generated)
    }

    fn class_token(&self, class: usize) -> Option<u32> {
        self.inner.class_token(class)
    }

    fn first_step_logits(&self, request: &OracleRequest) -> Result<OracleResponse> {
        let pos = KINDS
            .iter()
            .position(|&k| k == request.key.kind)
            .expect("known kind");
        self.counts[pos].fetch_add(1, Ordering::Relaxed);
        self.inner.first_step_logits(request)
    }
}
