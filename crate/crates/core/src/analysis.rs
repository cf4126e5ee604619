//! Per-token probing: the single-token experiment and the cascaded
//! leave-one-out experiment.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::attention_scores;
use crate::clustering::{default_cluster_count, dpc_cluster};
use crate::corpus::{self, Corpus, CorpusImage};
use crate::error::{Error, Result};
use crate::numerics::{cosine, head_jsd, top1_probability, EmbeddingVector, TokenMatrix};
use crate::oracle::{
    ModelOracle, OracleRequest, OracleResponse, PromptKind, RequestKey, RequestKind, VisualInput,
};

/// What replaces an ablated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// The oracle's pad embedding.
    #[default]
    Pad,
    /// The token itself; every divergence is zero by construction.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub m_top1: usize,
    pub m_jsd: usize,
    pub k_region: f64,
    pub k_global: f64,
    pub k_dpc_image: usize,
    /// Side of the square neighborhood used by the region experiment.
    pub neighborhood: usize,
    pub ablation: AblationMode,
    /// When set, each record gets the token's cosine to this embedding.
    pub cls_embedding: Option<EmbeddingVector>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            m_top1: 50,
            m_jsd: 20,
            k_region: 1.0,
            k_global: 16.0,
            k_dpc_image: 16,
            neighborhood: 3,
            ablation: AblationMode::Pad,
            cls_embedding: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_top1 == 0 || self.m_jsd == 0 || self.k_dpc_image == 0 {
            return Err(Error::InvalidInput(
                "m_top1, m_jsd and k_dpc_image must be positive".into(),
            ));
        }
        if !(self.k_region >= 0.0 && self.k_global >= 0.0)
            || !self.k_region.is_finite()
            || !self.k_global.is_finite()
        {
            return Err(Error::InvalidInput(
                "JSD weights must be finite and non-negative".into(),
            ));
        }
        if self.neighborhood == 0 || self.neighborhood.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "neighborhood side must be odd, got {}",
                self.neighborhood
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub image_id: String,
    pub token_idx: usize,
    pub p1: f64,
    pub cluster_size_img: usize,
    pub jsd_region: f64,
    pub jsd_global: f64,
    pub jsd_final: f64,
    #[serde(default)]
    pub clssim: Option<f64>,
    #[serde(default)]
    pub attn_score: Option<f64>,
}

pub fn cascaded_jsd(jsd_region: f64, jsd_global: f64, cfg: &AnalysisConfig) -> f64 {
    cfg.k_region * jsd_region + cfg.k_global * jsd_global
}

/// Row-major indices of the `side x side` window centered on `token_idx`,
/// clipped at the grid border, together with the window's shape.
pub fn window_of(
    token_idx: usize,
    grid: (usize, usize),
    side: usize,
) -> Result<(Vec<usize>, (usize, usize))> {
    let (rows, cols) = grid;
    if token_idx >= rows * cols {
        return Err(Error::InvalidInput(format!(
            "token {token_idx} outside a {rows}x{cols} grid"
        )));
    }
    let half = side / 2;
    let (r, c) = (token_idx / cols, token_idx % cols);
    let r_range = r.saturating_sub(half)..(r + half + 1).min(rows);
    let c_range = c.saturating_sub(half)..(c + half + 1).min(cols);
    let shape = (r_range.len(), c_range.len());
    let idx = r_range
        .flat_map(|rr| c_range.clone().map(move |cc| rr * cols + cc))
        .collect();
    Ok((idx, shape))
}

/// The clipped 3x3 neighborhood of a token.
pub fn neighborhood_of(token_idx: usize, grid: (usize, usize)) -> Result<Vec<usize>> {
    window_of(token_idx, grid, 3).map(|(idx, _)| idx)
}

/// p1 of a single token presented on its own.
pub fn single_token_probe<O: ModelOracle + ?Sized>(
    oracle: &O,
    key: RequestKey,
    v: &EmbeddingVector,
    reference_len: usize,
    m_top1: usize,
) -> Result<f64> {
    let input = VisualInput::single_token(v, oracle.capabilities(), reference_len)?;
    let response = oracle.first_step_logits(&OracleRequest {
        key,
        input,
        prompt: PromptKind::DescribeSingleToken,
    })?;
    top1_probability(&response.logits, m_top1)
}

/// Analysis state for one image: the full-image source response is fetched
/// once and global-ablation divergences are memoized by region.
pub struct ImageAnalyzer<'a, O: ModelOracle + ?Sized> {
    oracle: &'a O,
    image: &'a CorpusImage,
    cfg: &'a AnalysisConfig,
    input: VisualInput,
    global_src: OnceLock<OracleResponse>,
    global_memo: Mutex<HashMap<Vec<usize>, f64>>,
}

impl<'a, O: ModelOracle + ?Sized> ImageAnalyzer<'a, O> {
    pub fn new(oracle: &'a O, image: &'a CorpusImage, cfg: &'a AnalysisConfig) -> Result<Self> {
        cfg.validate()?;
        let (rows, cols) = image.grid;
        let input =
            VisualInput::grid_layout(image.tokens.clone(), rows, cols, oracle.capabilities())?;
        Ok(Self {
            oracle,
            image,
            cfg,
            input,
            global_src: OnceLock::new(),
            global_memo: Mutex::new(HashMap::new()),
        })
    }

    fn ablated(&self, tokens: &TokenMatrix, rows: &[usize]) -> Result<TokenMatrix> {
        match self.cfg.ablation {
            AblationMode::Pad => {
                tokens.with_rows_replaced(rows, self.oracle.pad_embedding().as_slice())
            }
            AblationMode::Identity => Ok(tokens.clone()),
        }
    }

    pub fn single_token_probe(&self, token_idx: usize) -> Result<f64> {
        let v = EmbeddingVector::new(self.image.tokens.row(token_idx).to_vec())?;
        single_token_probe(
            self.oracle,
            RequestKey::single(&self.image.image_id, token_idx),
            &v,
            self.image.len(),
            self.cfg.m_top1,
        )
    }

    /// JSD between the token's neighborhood as is and with the token ablated.
    pub fn region_leave_one_out(&self, token_idx: usize) -> Result<f64> {
        let (region, (rows, cols)) = window_of(token_idx, self.image.grid, self.cfg.neighborhood)?;
        let caps = self.oracle.capabilities();
        let tokens = self.image.tokens.select_rows(&region)?;
        let pos = region
            .iter()
            .position(|&i| i == token_idx)
            .expect("window contains its center");
        let ablated = self.ablated(&tokens, &[pos])?;
        let id = &self.image.image_id;
        let src = self.oracle.first_step_logits(&OracleRequest {
            key: RequestKey::region(id, RequestKind::RegionSrc, token_idx, &region),
            input: VisualInput::grid_layout(tokens, rows, cols, caps)?,
            prompt: PromptKind::DescribeRegion,
        })?;
        let abl = self.oracle.first_step_logits(&OracleRequest {
            key: RequestKey::region(id, RequestKind::RegionAblate, token_idx, &region),
            input: VisualInput::grid_layout(ablated, rows, cols, caps)?,
            prompt: PromptKind::DescribeRegion,
        })?;
        head_jsd(&src.logits, &abl.logits, self.cfg.m_jsd)
    }

    pub fn global_source(&self) -> Result<&OracleResponse> {
        if let Some(r) = self.global_src.get() {
            return Ok(r);
        }
        let response = self.oracle.first_step_logits(&OracleRequest {
            key: RequestKey::global_src(&self.image.image_id),
            input: self.input.clone(),
            prompt: PromptKind::DescribeImage,
        })?;
        Ok(self.global_src.get_or_init(|| response))
    }

    /// JSD between the full image and the image with `region` ablated.
    pub fn global_leave_one_out(&self, region: &[usize]) -> Result<f64> {
        if region.is_empty() {
            return Ok(0.0);
        }
        let mut key: Vec<usize> = region.to_vec();
        key.sort_unstable();
        key.dedup();
        let mut memo = self.global_memo.lock().expect("memo lock");
        if let Some(&v) = memo.get(&key) {
            return Ok(v);
        }
        let src = self.global_source()?;
        let ablated = self.ablated(self.input.tokens(), &key)?;
        let abl = self.oracle.first_step_logits(&OracleRequest {
            key: RequestKey::global_ablate(&self.image.image_id, &key),
            input: VisualInput::new(
                ablated,
                self.input.newline_after().to_vec(),
                self.input.grid(),
            )?,
            prompt: PromptKind::DescribeImage,
        })?;
        let value = head_jsd(&src.logits, &abl.logits, self.cfg.m_jsd)?;
        memo.insert(key, value);
        Ok(value)
    }

    fn record(
        &self,
        token_idx: usize,
        cluster_size_img: usize,
        attn: Option<&[f64]>,
    ) -> Result<AnalysisRecord> {
        let p1 = self.single_token_probe(token_idx)?;
        let jsd_region = self.region_leave_one_out(token_idx)?;
        let region = window_of(token_idx, self.image.grid, self.cfg.neighborhood)?.0;
        let jsd_global = self.global_leave_one_out(&region)?;
        Ok(AnalysisRecord {
            image_id: self.image.image_id.clone(),
            token_idx,
            p1,
            cluster_size_img,
            jsd_region,
            jsd_global,
            jsd_final: cascaded_jsd(jsd_region, jsd_global, self.cfg),
            clssim: self
                .cfg
                .cls_embedding
                .as_ref()
                .map(|cls| cosine(self.image.tokens.row(token_idx), cls.as_slice())),
            attn_score: attn.map(|a| a[token_idx]),
        })
    }

    /// One record per token, in token order.
    pub fn analyze(&self) -> Result<Vec<AnalysisRecord>> {
        let len = self.image.len();
        let sizes: Vec<usize> = if len == 1 {
            vec![1]
        } else {
            let k = self.cfg.k_dpc_image.min(len - 1);
            let clusters = dpc_cluster(&self.image.tokens, k, default_cluster_count(len, k))?;
            (0..len).map(|i| clusters.size_of(i)).collect()
        };
        let attn = match &self.global_source()?.attention {
            Some(rec) if rec.len() == len => {
                let layers: Vec<usize> = (0..rec.layers()).collect();
                Some(attention_scores(rec, &layers)?)
            }
            _ => None,
        };
        (0..len)
            .map(|i| {
                self.record(i, sizes[i], attn.as_deref())
                    .map_err(|e| Error::Analysis {
                        image_id: self.image.image_id.clone(),
                        token_idx: i,
                        source: Box::new(e),
                    })
            })
            .collect()
    }
}

pub fn analyze_image<O: ModelOracle + ?Sized>(
    oracle: &O,
    image: &CorpusImage,
    cfg: &AnalysisConfig,
) -> Result<Vec<AnalysisRecord>> {
    ImageAnalyzer::new(oracle, image, cfg)?.analyze()
}

/// Analyze every image in parallel; records come back ordered by
/// `(image_id, token_idx)`.
pub fn analyze_corpus<O: ModelOracle + ?Sized>(
    oracle: &O,
    corpus: &Corpus,
    cfg: &AnalysisConfig,
) -> Result<Vec<AnalysisRecord>> {
    cfg.validate()?;
    let mut per_image = corpus
        .images
        .par_iter()
        .map(|img| {
            log::debug!("analyzing {}", img.image_id);
            analyze_image(oracle, img, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    per_image.sort_by(|a, b| {
        a.first()
            .map(|r| &r.image_id)
            .cmp(&b.first().map(|r| &r.image_id))
    });
    Ok(per_image.into_iter().flatten().collect())
}

pub fn write_records(path: &Path, records: &[AnalysisRecord]) -> Result<()> {
    corpus::write_jsonl(path, records)
}

pub fn read_records(path: &Path) -> Result<Vec<AnalysisRecord>> {
    corpus::read_jsonl(path)
}
