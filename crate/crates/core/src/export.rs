//! Self-hosting export: run the analysis against a live oracle, record every
//! first-step response, and write a replay store.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use crate::analysis::{analyze_image, AnalysisConfig, AnalysisRecord};
use crate::corpus::{write_corpus_with, Corpus, Manifest};
use crate::error::{Error, Result};
use crate::numerics::EmbeddingVector;
use crate::oracle::replay::{write_requests, RequestRecord, MIN_SINGLE_CANDIDATES, PAIRING_HEAD};
use crate::oracle::{
    ModelOracle, OracleCapabilities, OracleRequest, OracleResponse, PromptKind, RequestKey,
    RequestKind, StepOutput, VisualInput,
};

/// Wraps an oracle and keeps every first-step response it serves.
#[derive(Debug)]
pub struct RecordingOracle<O> {
    inner: O,
    log: Mutex<BTreeMap<RequestKey, OracleResponse>>,
}

impl<O: ModelOracle> RecordingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn into_log(self) -> BTreeMap<RequestKey, OracleResponse> {
        self.log.into_inner().expect("recording lock")
    }
}

impl<O: ModelOracle> ModelOracle for RecordingOracle<O> {
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
        let response = self.inner.first_step_logits(request)?;
        self.log
            .lock()
            .expect("recording lock")
            .insert(request.key.clone(), response.clone());
        Ok(response)
    }
}

fn source_key(key: &RequestKey) -> Option<RequestKey> {
    match key.kind {
        RequestKind::RegionAblate => Some(RequestKey {
            kind: RequestKind::RegionSrc,
            ..key.clone()
        }),
        RequestKind::GlobalAblate => Some(RequestKey::global_src(&key.image_id)),
        _ => None,
    }
}

/// Wire records for one image: the top-`k` ids of every response, and for
/// ablation records also the top ids of the paired source.
pub fn records_from_log(
    log: &BTreeMap<RequestKey, OracleResponse>,
    top_k: usize,
) -> Result<Vec<RequestRecord>> {
    let mut out = Vec::with_capacity(log.len());
    for (key, response) in log {
        if key.kind == RequestKind::PrunedImage {
            continue;
        }
        let mut ids = response.logits.top_ids(top_k.min(response.logits.len()));
        if let Some(src_key) = source_key(key) {
            let src = log.get(&src_key).ok_or_else(|| {
                Error::Consistency(format!("{key} has no recorded source {src_key}"))
            })?;
            for id in src.logits.top_ids(PAIRING_HEAD.min(src.logits.len())) {
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
        }
        out.push(RequestRecord::from_response(key, response, &ids)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub manifest: Manifest,
    pub requests: usize,
    /// Records of the live analysis that produced the store.
    pub records: Vec<AnalysisRecord>,
}

/// Analyze `corpus` with a live `oracle` and write everything a
/// [`ReplayOracle`](crate::oracle::ReplayOracle) needs to reproduce the
/// analysis into `dir`. The manifest is written last.
pub fn export_store<O: ModelOracle>(
    oracle: &O,
    corpus: &Corpus,
    cfg: &AnalysisConfig,
    top_k: usize,
    dir: &Path,
) -> Result<ExportSummary> {
    let caps = oracle.capabilities();
    let min_k = MIN_SINGLE_CANDIDATES.min(caps.vocab_size);
    if top_k < min_k {
        return Err(Error::InvalidInput(format!(
            "top-K of {top_k} is below the required {min_k}"
        )));
    }
    if top_k < cfg.m_top1.min(caps.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "top-K of {top_k} cannot serve p1 over {} candidates",
            cfg.m_top1
        )));
    }
    let per_image = corpus
        .images
        .par_iter()
        .map(|img| -> Result<(Vec<AnalysisRecord>, Vec<RequestRecord>)> {
            let rec = RecordingOracle::new(oracle);
            let analysis = analyze_image(&rec, img, cfg)?;
            let requests = records_from_log(&rec.into_log(), top_k)?;
            Ok((analysis, requests))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_image: BTreeMap<&str, &Vec<RequestRecord>> = BTreeMap::new();
    for (img, (_, requests)) in corpus.images.iter().zip(&per_image) {
        by_image.insert(&img.image_id, requests);
    }
    let header = Manifest::for_model(oracle.model_id(), caps);
    let manifest = write_corpus_with(dir, corpus, &header, oracle.pad_embedding(), |idir, img| {
        write_requests(idir, by_image[img.image_id.as_str()])
    })?;
    let requests = per_image.iter().map(|(_, r)| r.len()).sum();
    let mut records: Vec<AnalysisRecord> = per_image.into_iter().flat_map(|(a, _)| a).collect();
    records.sort_by(|a, b| (&a.image_id, a.token_idx).cmp(&(&b.image_id, b.token_idx)));
    Ok(ExportSummary {
        manifest,
        requests,
        records,
    })
}
