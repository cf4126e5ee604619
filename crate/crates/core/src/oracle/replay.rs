//! Replay oracle: serves first-step responses recorded in a store directory.
//!
//! Each image directory of the store carries a `requests.jsonl` with one
//! [`RequestRecord`] per query. Logits are truncated to the top-K ids plus
//! whatever ids are needed to pair an ablation record with its source.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ModelOracle, OracleCapabilities, OracleRequest, OracleResponse, PromptKind, RequestKey,
    RequestKind, StepOutput, VisualInput,
};
use crate::corpus::{self, load_corpus, load_pad, Manifest, REQUESTS_FILE};
use crate::error::{Error, Result};
use crate::numerics::{EmbeddingVector, SparseLogits};

/// Minimum number of candidates a `single` record must carry.
pub const MIN_SINGLE_CANDIDATES: usize = 50;
/// Number of source top ids every ablation record must cover.
pub const PAIRING_HEAD: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub image_id: String,
    pub kind: RequestKind,
    pub target_idx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<usize>>,
    pub step: u8,
    pub article_skipped: bool,
    pub candidate_ids: Vec<u32>,
    pub logits: Vec<f64>,
}

impl RequestRecord {
    pub fn key(&self) -> RequestKey {
        RequestKey {
            image_id: self.image_id.clone(),
            kind: self.kind,
            target_idx: self.target_idx,
            region: self.region.clone(),
        }
    }

    pub fn from_response(key: &RequestKey, response: &OracleResponse, ids: &[u32]) -> Result<Self> {
        let logits = ids
            .iter()
            .map(|&id| {
                response
                    .logits
                    .get(id)
                    .map(|l| l as f32 as f64)
                    .ok_or(Error::MissingCandidate(id))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            image_id: key.image_id.clone(),
            kind: key.kind,
            target_idx: key.target_idx,
            region: key.region.clone(),
            step: response.step,
            article_skipped: response.article_skipped,
            candidate_ids: ids.to_vec(),
            logits,
        })
    }

    fn response(&self) -> Result<OracleResponse> {
        if (self.step == 2) != self.article_skipped || !(1..=2).contains(&self.step) {
            return Err(Error::CorruptStore(format!(
                "record {} has step {} with article_skipped={}",
                self.key(),
                self.step,
                self.article_skipped
            )));
        }
        let logits = SparseLogits::new(self.candidate_ids.clone(), self.logits.clone())
            .map_err(|e| Error::CorruptStore(format!("record {}: {e}", self.key())))?;
        Ok(OracleResponse {
            logits,
            step: self.step,
            article_skipped: self.article_skipped,
            attention: None,
        })
    }
}

pub fn write_requests(image_dir: &Path, records: &[RequestRecord]) -> Result<()> {
    corpus::write_jsonl(&image_dir.join(REQUESTS_FILE), records)
}

pub fn read_requests(image_dir: &Path) -> Result<Vec<RequestRecord>> {
    let path = image_dir.join(REQUESTS_FILE);
    if !path.exists() {
        return Err(Error::CorruptStore(format!(
            "{} is missing",
            path.display()
        )));
    }
    corpus::read_jsonl(&path)
}

#[derive(Debug)]
pub struct ReplayOracle {
    manifest: Manifest,
    caps: OracleCapabilities,
    pad: EmbeddingVector,
    records: HashMap<RequestKey, OracleResponse>,
}

impl ReplayOracle {
    /// Load a store. Loading is single-threaded; lookups afterwards are
    /// read-only.
    pub fn open(dir: &Path) -> Result<Self> {
        let (manifest, _) = load_corpus(dir)?;
        let pad = load_pad(dir, &manifest)?;
        let caps = manifest.oracle_capabilities();
        caps.validate()
            .map_err(|e| Error::CorruptStore(e.to_string()))?;
        let mut records = HashMap::new();
        for entry in &manifest.images {
            for rec in read_requests(&corpus::image_dir(dir, &entry.image_id))? {
                if rec.image_id != entry.image_id {
                    return Err(Error::CorruptStore(format!(
                        "record for {} stored under {}",
                        rec.image_id, entry.image_id
                    )));
                }
                let key = rec.key();
                if records.insert(key.clone(), rec.response()?).is_some() {
                    return Err(Error::CorruptStore(format!("duplicate record {key}")));
                }
            }
        }
        Ok(Self {
            manifest,
            caps,
            pad,
            records,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, key: &RequestKey) -> Result<OracleResponse> {
        self.records
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingRecord(key.to_string()))
    }
}

impl ModelOracle for ReplayOracle {
    fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    fn capabilities(&self) -> &OracleCapabilities {
        &self.caps
    }

    fn pad_embedding(&self) -> &EmbeddingVector {
        &self.pad
    }

    fn next_token(
        &self,
        _input: &VisualInput,
        _prompt: PromptKind,
        _generated: &[u32],
    ) -> Result<StepOutput> {
        Err(Error::InvalidInput(
            "the replay oracle only serves recorded first-step responses".into(),
        ))
    }

    fn first_step_logits(&self, request: &OracleRequest) -> Result<OracleResponse> {
        self.lookup(&request.key)
    }
}

/// Findings of a store lint pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LintReport {
    pub images: usize,
    pub records: usize,
    pub issues: Vec<String>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Check a store against the wire-format contract: manifest present, blob
/// sizes and checksums, record well-formedness, `single` records with at
/// least `min(50, vocab)` candidates, and every ablation record covering
/// the top-20 ids of its source partner.
pub fn lint_store(dir: &Path) -> Result<LintReport> {
    let (manifest, _) = load_corpus(dir)?;
    load_pad(dir, &manifest)?;
    let mut report = LintReport {
        images: manifest.images.len(),
        ..LintReport::default()
    };
    let min_single = MIN_SINGLE_CANDIDATES.min(manifest.vocab_size);
    for entry in &manifest.images {
        let records = match read_requests(&corpus::image_dir(dir, &entry.image_id)) {
            Ok(r) => r,
            Err(e) => {
                report.issues.push(e.to_string());
                continue;
            }
        };
        report.records += records.len();
        let mut by_key: BTreeMap<RequestKey, &RequestRecord> = BTreeMap::new();
        for rec in &records {
            if let Err(e) = rec.response() {
                report.issues.push(e.to_string());
            }
            if rec.kind == RequestKind::PrunedImage {
                report.issues.push(format!(
                    "{}: kind is not part of the wire format",
                    rec.key()
                ));
            }
            if rec.kind == RequestKind::Single && rec.candidate_ids.len() < min_single {
                report.issues.push(format!(
                    "{}: {} candidates, need at least {min_single}",
                    rec.key(),
                    rec.candidate_ids.len()
                ));
            }
            if let Some(t) = rec.target_idx {
                if t >= entry.len {
                    report
                        .issues
                        .push(format!("{}: target outside the image", rec.key()));
                }
            }
            by_key.insert(rec.key(), rec);
        }
        for rec in &records {
            let partner = match rec.kind {
                RequestKind::RegionAblate => RequestKey {
                    kind: RequestKind::RegionSrc,
                    ..rec.key()
                },
                RequestKind::GlobalAblate => RequestKey::global_src(&rec.image_id),
                _ => continue,
            };
            let Some(src) = by_key.get(&partner) else {
                report
                    .issues
                    .push(format!("{}: no source record {partner}", rec.key()));
                continue;
            };
            let Ok(src_logits) = SparseLogits::new(src.candidate_ids.clone(), src.logits.clone())
            else {
                continue;
            };
            for id in src_logits.top_ids(PAIRING_HEAD) {
                if !rec.candidate_ids.contains(&id) {
                    report
                        .issues
                        .push(format!("{}: missing source head id {id}", rec.key()));
                }
            }
        }
    }
    Ok(report)
}
