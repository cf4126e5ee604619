//! Redundancy codebook: candidate selection from analysis records, the
//! pooled inlier filter, persistence and test-time pruning.

mod format;
mod prune;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_corpus, AnalysisConfig, AnalysisRecord};
use crate::clustering::{default_cluster_count, dpc_cluster};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::numerics::TokenMatrix;
use crate::oracle::ModelOracle;

pub use format::{
    decode_codebook, encode_codebook, load_codebook, save_codebook, CODEBOOK_MAGIC,
    CODEBOOK_VERSION,
};
pub use prune::{
    calibrate_threshold, keep_at_most, keep_lowest, probing_flops, prune_budget, prune_threshold,
    redundancy_scores, Calibration, PruneMode, PruneResult,
};

/// The four selection thresholds. Comparisons are strict: a token is a
/// candidate iff `p1 < tau_prob`, `cluster_size_img < tau_out` and
/// `jsd_final < tau_jsd`; a candidate becomes a prototype iff its pooled
/// cluster has more than `tau_in` members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_prob: f64,
    pub tau_out: usize,
    pub tau_jsd: f64,
    pub tau_in: usize,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_prob > 0.0 && self.tau_prob < 1.0) {
            return Err(Error::InvalidInput(format!(
                "tau_prob must lie in (0, 1), got {}",
                self.tau_prob
            )));
        }
        if !(self.tau_jsd >= 0.0 && self.tau_jsd.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tau_jsd must be finite and >= 0, got {}",
                self.tau_jsd
            )));
        }
        if self.tau_out == 0 || self.tau_in == 0 {
            return Err(Error::InvalidInput(
                "tau_out and tau_in must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn selects(&self, r: &AnalysisRecord) -> bool {
        r.p1 < self.tau_prob && r.cluster_size_img < self.tau_out && r.jsd_final < self.tau_jsd
    }
}

/// Named threshold presets with their pooled-clustering `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Published settings for the 576-token model.
    Reference,
    /// Published settings for the third model.
    ReferenceAlt,
    /// Tuned for the synthetic corpus, where background tokens are the
    /// majority of every image instead of sparse outliers.
    Synthetic,
}

impl Profile {
    pub const ALL: [Profile; 3] = [
        Profile::Reference,
        Profile::ReferenceAlt,
        Profile::Synthetic,
    ];

    pub fn thresholds(self) -> Thresholds {
        match self {
            Profile::Reference => Thresholds {
                tau_prob: 0.1,
                tau_out: 8,
                tau_jsd: 2e-3,
                tau_in: 64,
            },
            Profile::ReferenceAlt => Thresholds {
                tau_prob: 0.08,
                tau_out: 3,
                tau_jsd: 1.5e-3,
                tau_in: 16,
            },
            Profile::Synthetic => Thresholds {
                tau_prob: 0.3,
                tau_out: 4096,
                tau_jsd: 2e-3,
                tau_in: 64,
            },
        }
    }

    pub fn k_pool(self) -> usize {
        match self {
            Profile::Reference | Profile::Synthetic => 64,
            Profile::ReferenceAlt => 24,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Reference => "reference",
            Profile::ReferenceAlt => "reference-alt",
            Profile::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown profile {s:?}")))
    }
}

/// `N x d` prototype matrix plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyCodebook {
    pub prototypes: TokenMatrix,
    pub model_id: String,
    pub thresholds: Thresholds,
    pub k_pool: usize,
    pub format_version: u32,
}

impl RedundancyCodebook {
    /// Prototypes are stored as `f32`, so they are rounded on the way in and
    /// a save/load round trip is exact.
    pub fn new(
        prototypes: TokenMatrix,
        model_id: impl Into<String>,
        thresholds: Thresholds,
        k_pool: usize,
    ) -> Self {
        Self {
            prototypes: prototypes.rounded_to_f32(),
            model_id: model_id.into(),
            thresholds,
            k_pool,
            format_version: CODEBOOK_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }
}

/// A token that passed the per-image filters.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image_id: String,
    pub token_idx: usize,
    pub embedding: Vec<f64>,
}

/// Tokens whose records pass the per-image thresholds, in
/// `(image_id, token_idx)` order.
pub fn select_candidates(
    records: &[AnalysisRecord],
    corpus: &Corpus,
    th: &Thresholds,
) -> Result<Vec<Candidate>> {
    th.validate()?;
    let images: HashMap<&str, usize> = corpus
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.as_str(), i))
        .collect();
    let mut out = Vec::new();
    for r in records {
        let img = images
            .get(r.image_id.as_str())
            .map(|&i| &corpus.images[i])
            .ok_or_else(|| {
                Error::Consistency(format!("record for unknown image {}", r.image_id))
            })?;
        if r.token_idx >= img.len() {
            return Err(Error::Consistency(format!(
                "record for token {} of {} which has {} tokens",
                r.token_idx,
                r.image_id,
                img.len()
            )));
        }
        if th.selects(r) {
            out.push(Candidate {
                image_id: r.image_id.clone(),
                token_idx: r.token_idx,
                embedding: img.tokens.row(r.token_idx).to_vec(),
            });
        }
    }
    out.sort_by(|a, b| (&a.image_id, a.token_idx).cmp(&(&b.image_id, b.token_idx)));
    Ok(out)
}

/// Cluster the pooled candidates with DPC-kNN and keep those whose cluster
/// has more than `tau_in` members. May return an empty set.
pub fn context_independent_filter(
    candidates: &[Candidate],
    k_pool: usize,
    tau_in: usize,
) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    if k_pool == 0 {
        return Err(Error::InvalidInput("k_pool must be >= 1".into()));
    }
    let n = candidates.len();
    let sizes: Vec<usize> = if n == 1 {
        vec![1]
    } else {
        let rows: Vec<&[f64]> = candidates.iter().map(|c| c.embedding.as_slice()).collect();
        let x = TokenMatrix::from_rows(&rows)?;
        let k = k_pool.min(n - 1);
        let clusters = dpc_cluster(&x, k, default_cluster_count(n, k))?;
        (0..n).map(|i| clusters.size_of(i)).collect()
    };
    Ok(candidates
        .iter()
        .zip(sizes)
        .filter(|(_, size)| *size > tau_in)
        .map(|(c, _)| c.clone())
        .collect())
}

/// A codebook together with the provenance of its prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookBuild {
    pub codebook: RedundancyCodebook,
    pub n_candidates: usize,
    /// `(image_id, token_idx)` of each prototype row.
    pub provenance: Vec<(String, usize)>,
}

pub fn codebook_from_records(
    records: &[AnalysisRecord],
    corpus: &Corpus,
    model_id: &str,
    th: &Thresholds,
    k_pool: usize,
) -> Result<CodebookBuild> {
    let candidates = select_candidates(records, corpus, th)?;
    log::info!("{} redundant candidates", candidates.len());
    let prototypes = context_independent_filter(&candidates, k_pool, th.tau_in)?;
    if prototypes.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let rows: Vec<&[f64]> = prototypes.iter().map(|c| c.embedding.as_slice()).collect();
    Ok(CodebookBuild {
        codebook: RedundancyCodebook::new(TokenMatrix::from_rows(&rows)?, model_id, *th, k_pool),
        n_candidates: candidates.len(),
        provenance: prototypes
            .into_iter()
            .map(|c| (c.image_id, c.token_idx))
            .collect(),
    })
}

pub fn build_codebook<O: ModelOracle + ?Sized>(
    corpus: &Corpus,
    oracle: &O,
    cfg: &AnalysisConfig,
    th: &Thresholds,
    k_pool: usize,
) -> Result<CodebookBuild> {
    th.validate()?;
    let records = analyze_corpus(oracle, corpus, cfg)?;
    codebook_from_records(&records, corpus, oracle.model_id(), th, k_pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusImage;

    fn record(p1: f64, size: usize, jsd: f64) -> AnalysisRecord {
        AnalysisRecord {
            image_id: "a".into(),
            token_idx: 0,
            p1,
            cluster_size_img: size,
            jsd_region: jsd,
            jsd_global: 0.0,
            jsd_final: jsd,
            clssim: None,
            attn_score: None,
        }
    }

    #[test]
    fn strict_thresholds() {
        let th = Profile::Reference.thresholds();
        assert!(th.selects(&record(0.05, 2, 1e-4)));
        assert!(!th.selects(&record(0.1, 2, 1e-4)));
        assert!(!th.selects(&record(0.05, 8, 1e-4)));
        assert!(th.selects(&record(0.05, 7, 1e-4)));
        assert!(!th.selects(&record(0.05, 2, 2e-3)));
    }

    #[test]
    fn profiles() {
        let alt = Profile::ReferenceAlt.thresholds();
        assert_eq!(
            (alt.tau_prob, alt.tau_out, alt.tau_in, alt.tau_jsd),
            (0.08, 3, 16, 1.5e-3)
        );
        assert_eq!(Profile::ReferenceAlt.k_pool(), 24);
        for p in Profile::ALL {
            assert_eq!(p.as_str().parse::<Profile>().unwrap(), p);
            p.thresholds().validate().unwrap();
        }
        assert!("nope".parse::<Profile>().is_err());
    }

    #[test]
    fn missing_embedding_is_inconsistent() {
        let corpus = Corpus::new(vec![CorpusImage {
            image_id: "a".into(),
            grid: (1, 1),
            tokens: TokenMatrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            labels: None,
        }])
        .unwrap();
        let th = Profile::Reference.thresholds();
        let mut r = record(0.05, 2, 1e-4);
        assert_eq!(
            select_candidates(&[r.clone()], &corpus, &th).unwrap().len(),
            1
        );
        r.token_idx = 3;
        assert!(matches!(
            select_candidates(&[r.clone()], &corpus, &th),
            Err(Error::Consistency(_))
        ));
        r.image_id = "zz".into();
        r.token_idx = 0;
        assert!(matches!(
            select_candidates(&[r], &corpus, &th),
            Err(Error::Consistency(_))
        ));
    }

    fn candidates(points: &[Vec<f64>]) -> Vec<Candidate> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| Candidate {
                image_id: "img".into(),
                token_idx: i,
                embedding: p.clone(),
            })
            .collect()
    }

    #[test]
    fn inlier_filter_edge_cases() {
        assert!(matches!(
            context_independent_filter(&[], 4, 1),
            Err(Error::EmptyCandidateSet)
        ));
        let same = candidates(&vec![vec![1.0, 2.0]; 70]);
        assert_eq!(context_independent_filter(&same, 64, 64).unwrap().len(), 70);
        let few = candidates(&vec![vec![1.0, 2.0]; 64]);
        assert!(context_independent_filter(&few, 64, 64).unwrap().is_empty());
        let one = candidates(&[vec![1.0]]);
        assert!(context_independent_filter(&one, 64, 1).unwrap().is_empty());
    }

    #[test]
    fn inlier_filter_keeps_the_big_blob() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut points = Vec::new();
        for i in 0..105 {
            let base = if i < 100 { 0.0 } else { 5.0 };
            points.push(vec![base + noise.sample(&mut rng), noise.sample(&mut rng)]);
        }
        let kept = context_independent_filter(&candidates(&points), 64, 64).unwrap();
        let idx: Vec<usize> = kept.iter().map(|c| c.token_idx).collect();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
    }
}
