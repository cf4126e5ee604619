//! Ranking baselines and the strategy comparison harness.
//!
//! `clssim-rank` and `attn-rank` are ranking simplifications: they keep the
//! `R` tokens with the highest score and nothing more (no adaptive budget, no
//! token merging, no in-model pruning).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{keep_lowest, probing_flops, redundancy_scores, RedundancyCodebook};
use crate::corpus::{Corpus, CorpusImage};
use crate::error::{Error, Result};
use crate::numerics::{cosine, head_jsd, EmbeddingVector, TokenMatrix};
use crate::oracle::{
    AttentionRecord, ModelOracle, OracleRequest, OracleResponse, PromptKind, RequestKey,
    VisualInput,
};

/// Cosine of every token to the `[cls]` stand-in.
pub fn clssim_scores(tokens: &TokenMatrix, cls: &EmbeddingVector) -> Result<Vec<f64>> {
    if tokens.dim() != cls.dim() {
        return Err(Error::Shape(format!(
            "token dim {} vs cls dim {}",
            tokens.dim(),
            cls.dim()
        )));
    }
    Ok(tokens
        .iter_rows()
        .map(|r| cosine(r, cls.as_slice()))
        .collect())
}

/// Per-token attention averaged over heads and summed over `layer_set`.
pub fn attention_scores(rec: &AttentionRecord, layer_set: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rec.len()];
    for &layer in layer_set {
        if layer >= rec.layers() {
            return Err(Error::InvalidInput(format!(
                "layer {layer} outside the {} recorded layers",
                rec.layers()
            )));
        }
        let mut mean = vec![0.0; rec.len()];
        for head in 0..rec.heads() {
            mean.iter_mut()
                .zip(rec.row(layer, head))
                .for_each(|(m, a)| *m += a);
        }
        let heads = rec.heads() as f64;
        out.iter_mut().zip(mean).for_each(|(o, m)| *o += m / heads);
    }
    Ok(out)
}

/// The `budget` indices with the highest scores (ties to the lower index),
/// ascending.
pub fn keep_highest(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(budget);
    order.sort_unstable();
    order
}

/// `budget` of `len` indices drawn uniformly without replacement, ascending.
pub fn random_prune(len: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    random_prune_stream(len, budget, seed, 0)
}

fn random_prune_stream(len: usize, budget: usize, seed: u64, stream: u64) -> Result<Vec<usize>> {
    if budget > len {
        return Err(Error::InvalidInput(format!(
            "cannot keep {budget} of {len} tokens"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut kept = sample(&mut rng, len, budget).into_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "codebook")]
    Codebook,
    #[serde(rename = "clssim-rank")]
    ClsSim,
    #[serde(rename = "attn-rank")]
    Attention,
    #[serde(rename = "random")]
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Codebook,
        Strategy::ClsSim,
        Strategy::Attention,
        Strategy::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Codebook => "codebook",
            Strategy::ClsSim => "clssim-rank",
            Strategy::Attention => "attn-rank",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "codebook" => Ok(Strategy::Codebook),
            "clssim" | "clssim-rank" => Ok(Strategy::ClsSim),
            "attn" | "attn-rank" => Ok(Strategy::Attention),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::InvalidInput(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub budget: usize,
    pub strategies: Vec<Strategy>,
    /// Seeds of the random baseline.
    pub seeds: Vec<u64>,
    pub m_jsd: usize,
    /// Reference embedding for `clssim-rank`.
    pub cls_embedding: Option<EmbeddingVector>,
    /// Layers summed by `attn-rank`; empty means all recorded layers.
    pub layer_set: Vec<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            budget: 13,
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            m_jsd: 20,
            cls_embedding: None,
            layer_set: Vec::new(),
        }
    }
}

/// Outcome of one strategy run (one seed for `random`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub seed: Option<u64>,
    pub budget: usize,
    /// Kept indices per image, in corpus order.
    pub kept: Vec<(String, Vec<usize>)>,
    /// Mean over images of the head-vocabulary JSD between the full and the
    /// pruned image.
    pub faithfulness_jsd: f64,
    /// Fraction of labelled images whose pruned argmax is the planted
    /// majority class.
    pub toy_accuracy: f64,
    /// Scoring cost summed over the corpus.
    pub flops_probe: u64,
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: String,
    /// `seed` for a single run, `aggregate` for the mean over runs.
    pub row: String,
    pub seed: Option<u64>,
    pub budget: usize,
    pub n_images: usize,
    pub faithfulness_jsd: f64,
    pub faithfulness_jsd_std: f64,
    pub toy_accuracy: f64,
    pub toy_accuracy_std: f64,
    pub flops_probe: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub oracle: String,
    pub runs: Vec<StrategyReport>,
    pub rows: Vec<ReportRow>,
}

impl Comparison {
    pub fn aggregate(&self, strategy: Strategy) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy.label() && r.row == "aggregate")
    }
}

struct ImageEval {
    full: OracleResponse,
    full_input: VisualInput,
    class_token: Option<u32>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn pruned_input(
    img: &CorpusImage,
    eval: &ImageEval,
    kept: &[usize],
    pad: &EmbeddingVector,
) -> Result<VisualInput> {
    if kept.len() == img.len() {
        return Ok(eval.full_input.clone());
    }
    let tokens = if kept.is_empty() {
        TokenMatrix::new(1, pad.dim(), pad.as_slice().to_vec())?
    } else {
        img.tokens.select_rows(kept)?
    };
    VisualInput::new(tokens, Vec::new(), None)
}

fn run_strategy<O: ModelOracle + ?Sized>(
    oracle: &O,
    corpus: &Corpus,
    evals: &[ImageEval],
    cb: &RedundancyCodebook,
    cfg: &CompareConfig,
    strategy: Strategy,
    seed: Option<u64>,
) -> Result<StrategyReport> {
    let budget = cfg.budget;
    let per_image = corpus
        .images
        .par_iter()
        .zip(evals)
        .enumerate()
        .map(
            |(i, (img, eval))| -> Result<(Vec<usize>, f64, Option<bool>, u64)> {
                let len = img.len();
                let (kept, flops) = match strategy {
                    Strategy::Codebook => {
                        let scores = redundancy_scores(&img.tokens, cb)?;
                        let flops = probing_flops(len as u64, cb.len() as u64, cb.dim() as u64)?;
                        (keep_lowest(&scores, budget), flops)
                    }
                    Strategy::ClsSim => {
                        let cls = cfg.cls_embedding.as_ref().ok_or_else(|| {
                            Error::InvalidInput("clssim-rank needs a cls embedding".into())
                        })?;
                        let flops = probing_flops(len as u64, 1, img.tokens.dim() as u64)?;
                        (
                            keep_highest(&clssim_scores(&img.tokens, cls)?, budget),
                            flops,
                        )
                    }
                    Strategy::Attention => {
                        let rec = eval
                            .full
                            .attention
                            .as_ref()
                            .filter(|r| r.len() == len)
                            .ok_or_else(|| {
                                Error::InvalidInput(format!(
                                    "oracle returned no attention over the visual tokens of {}",
                                    img.image_id
                                ))
                            })?;
                        let layers: Vec<usize> = if cfg.layer_set.is_empty() {
                            (0..rec.layers()).collect()
                        } else {
                            cfg.layer_set.clone()
                        };
                        (keep_highest(&attention_scores(rec, &layers)?, budget), 0)
                    }
                    Strategy::Random => {
                        let seed = seed.expect("random runs carry a seed");
                        (
                            random_prune_stream(len, budget.min(len), seed, i as u64)?,
                            0,
                        )
                    }
                };
                let input = pruned_input(img, eval, &kept, oracle.pad_embedding())?;
                let pruned = oracle.first_step_logits(&OracleRequest {
                    key: RequestKey::pruned(&img.image_id),
                    input,
                    prompt: PromptKind::DescribeImage,
                })?;
                let faithfulness = head_jsd(&eval.full.logits, &pruned.logits, cfg.m_jsd)?;
                let correct = eval.class_token.map(|tok| {
                    let top = pruned.logits.ranked_positions(2);
                    let unique = top.len() < 2
                        || pruned.logits.logits()[top[0]] > pruned.logits.logits()[top[1]];
                    unique && pruned.logits.candidate_ids()[top[0]] == tok
                });
                Ok((kept, faithfulness, correct, flops))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let n = per_image.len() as f64;
    let scored: Vec<bool> = per_image.iter().filter_map(|p| p.2).collect();
    let toy_accuracy = if scored.is_empty() {
        0.0
    } else {
        scored.iter().filter(|&&c| c).count() as f64 / scored.len() as f64
    };
    Ok(StrategyReport {
        strategy,
        seed,
        budget,
        faithfulness_jsd: per_image.iter().map(|p| p.1).sum::<f64>() / n,
        toy_accuracy,
        flops_probe: per_image.iter().map(|p| p.3).sum(),
        kept: corpus
            .images
            .iter()
            .zip(per_image)
            .map(|(img, p)| (img.image_id.clone(), p.0))
            .collect(),
    })
}

/// Run every configured strategy at budget `R` and score it against the
/// unpruned image.
pub fn compare_strategies<O: ModelOracle + ?Sized>(
    corpus: &Corpus,
    oracle: &O,
    cb: &RedundancyCodebook,
    cfg: &CompareConfig,
) -> Result<Comparison> {
    if cb.dim() != corpus.dim() {
        return Err(Error::Shape(format!(
            "codebook dim {} vs corpus dim {}",
            cb.dim(),
            corpus.dim()
        )));
    }
    if cfg.strategies.contains(&Strategy::Random) && cfg.seeds.is_empty() {
        return Err(Error::InvalidInput(
            "the random baseline needs at least one seed".into(),
        ));
    }
    let evals = corpus
        .images
        .par_iter()
        .map(|img| -> Result<ImageEval> {
            let (rows, cols) = img.grid;
            let full_input =
                VisualInput::grid_layout(img.tokens.clone(), rows, cols, oracle.capabilities())?;
            let full = oracle.first_step_logits(&OracleRequest {
                key: RequestKey::global_src(&img.image_id),
                input: full_input.clone(),
                prompt: PromptKind::DescribeImage,
            })?;
            Ok(ImageEval {
                full,
                full_input,
                class_token: img.majority_class().and_then(|c| oracle.class_token(c)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let n_images = corpus.images.len();
    for &strategy in &cfg.strategies {
        let seeds: Vec<Option<u64>> = match strategy {
            Strategy::Random => cfg.seeds.iter().copied().map(Some).collect(),
            _ => vec![None],
        };
        let mut batch = Vec::new();
        for seed in seeds {
            let report = run_strategy(oracle, corpus, &evals, cb, cfg, strategy, seed)?;
            if seed.is_some() {
                rows.push(ReportRow {
                    strategy: strategy.label().into(),
                    row: "seed".into(),
                    seed,
                    budget: cfg.budget,
                    n_images,
                    faithfulness_jsd: report.faithfulness_jsd,
                    faithfulness_jsd_std: 0.0,
                    toy_accuracy: report.toy_accuracy,
                    toy_accuracy_std: 0.0,
                    flops_probe: report.flops_probe,
                });
            }
            batch.push(report);
        }
        let (fj, fj_std) = mean_std(&batch.iter().map(|r| r.faithfulness_jsd).collect::<Vec<_>>());
        let (acc, acc_std) = mean_std(&batch.iter().map(|r| r.toy_accuracy).collect::<Vec<_>>());
        rows.push(ReportRow {
            strategy: strategy.label().into(),
            row: "aggregate".into(),
            seed: None,
            budget: cfg.budget,
            n_images,
            faithfulness_jsd: fj,
            faithfulness_jsd_std: fj_std,
            toy_accuracy: acc,
            toy_accuracy_std: acc_std,
            flops_probe: batch[0].flops_probe,
        });
        runs.extend(batch);
    }
    Ok(Comparison {
        oracle: oracle.model_id().to_string(),
        runs,
        rows,
    })
}

/// Write `report.json` (full runs, including kept indices) and `report.csv`
/// (one row per strategy and seed plus aggregate rows) into `dir`.
pub fn write_reports(dir: &Path, cmp: &Comparison) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_vec_pretty(cmp).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, e.into()))?;
    for row in &cmp.rows {
        w.serialize(row)
            .map_err(|e| Error::io(&csv_path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Profile;
    use crate::oracle::AnalyticOracle;
    use crate::synthcorpus::{self, background_direction, SynthParams};

    #[test]
    fn clssim_values() {
        let cls = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let t = TokenMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let s = clssim_scores(&t, &cls).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        let scaled = EmbeddingVector::new(vec![7.0, 0.0]).unwrap();
        assert_eq!(
            keep_highest(&s, 2),
            keep_highest(&clssim_scores(&t, &scaled).unwrap(), 2)
        );
        let bad = EmbeddingVector::new(vec![1.0]).unwrap();
        assert!(matches!(clssim_scores(&t, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_aggregation() {
        let one = AttentionRecord::new(1, 1, 3, vec![0.2, 0.3, 0.1]).unwrap();
        assert_eq!(attention_scores(&one, &[0]).unwrap(), vec![0.2, 0.3, 0.1]);
        let two = AttentionRecord::new(
            2,
            2,
            3,
            [[0.2, 0.3, 0.1], [0.4, 0.1, 0.3]].concat().repeat(2),
        )
        .unwrap();
        let single = attention_scores(&two, &[0]).unwrap();
        let both = attention_scores(&two, &[0, 1]).unwrap();
        for (s, b) in single.iter().zip(&both) {
            assert!((2.0 * s - b).abs() < 1e-15);
        }
        assert!(attention_scores(&two, &[2]).is_err());
        let uniform = AttentionRecord::new(1, 1, 5, vec![0.2; 5]).unwrap();
        assert_eq!(
            keep_highest(&attention_scores(&uniform, &[0]).unwrap(), 3),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn random_baseline() {
        assert_eq!(
            random_prune(64, 64, 9).unwrap(),
            (0..64).collect::<Vec<_>>()
        );
        assert_eq!(
            random_prune(64, 16, 9).unwrap(),
            random_prune(64, 16, 9).unwrap()
        );
        let runs: Vec<Vec<usize>> = (0..3).map(|s| random_prune(64, 16, s).unwrap()).collect();
        assert_ne!(runs[0], runs[1]);
        assert_ne!(runs[1], runs[2]);
        assert_ne!(runs[0], runs[2]);
        assert!(runs
            .iter()
            .all(|r| r.len() == 16 && r.windows(2).all(|w| w[0] < w[1])));
        assert!(random_prune(4, 5, 0).is_err());
    }

    fn fixture() -> (Corpus, AnalyticOracle, RedundancyCodebook) {
        let corpus = synthcorpus::generate(&SynthParams {
            n_images: 6,
            ..SynthParams::default()
        })
        .unwrap();
        let oracle = AnalyticOracle::for_synthetic(4, 32, AnalyticOracle::DEFAULT_BETA).unwrap();
        let cb = RedundancyCodebook::new(
            TokenMatrix::from_rows(&[background_direction(32)]).unwrap(),
            "analytic",
            Profile::Synthetic.thresholds(),
            64,
        );
        (corpus, oracle, cb)
    }

    #[test]
    fn full_budget_is_lossless() {
        let (corpus, oracle, cb) = fixture();
        let cfg = CompareConfig {
            budget: 64,
            cls_embedding: Some(oracle.cls_embedding()),
            ..CompareConfig::default()
        };
        let cmp = compare_strategies(&corpus, &oracle, &cb, &cfg).unwrap();
        assert_eq!(cmp.rows.len(), 4 + 3);
        for run in &cmp.runs {
            assert!(run.faithfulness_jsd.abs() < 1e-12);
            assert!(run.kept.iter().all(|(_, k)| k.len() == 64));
        }
        let first = &cmp.runs[0].kept;
        assert!(cmp.runs.iter().all(|r| &r.kept == first));
    }

    #[test]
    fn report_shape_and_files() {
        let (corpus, oracle, cb) = fixture();
        let cfg = CompareConfig {
            budget: 13,
            strategies: vec![Strategy::Codebook, Strategy::Random],
            ..CompareConfig::default()
        };
        let cmp = compare_strategies(&corpus, &oracle, &cb, &cfg).unwrap();
        let aggregates = cmp.rows.iter().filter(|r| r.row == "aggregate").count();
        assert_eq!(aggregates, 2);
        assert_eq!(cmp.rows.iter().filter(|r| r.row == "seed").count(), 3);
        for run in &cmp.runs {
            assert!((0.0..=std::f64::consts::LN_2).contains(&run.faithfulness_jsd));
            assert!((0.0..=1.0).contains(&run.toy_accuracy));
            assert!(run
                .kept
                .iter()
                .all(|(_, k)| k.len() == 13 && k.windows(2).all(|w| w[0] < w[1])));
        }
        let codebook = cmp.aggregate(Strategy::Codebook).unwrap();
        let random = cmp.aggregate(Strategy::Random).unwrap();
        assert!(codebook.toy_accuracy >= random.toy_accuracy);
        assert!(random.toy_accuracy_std >= 0.0);
        assert_eq!(codebook.flops_probe, 6 * 64 * 63);

        let dir = tempfile::tempdir().unwrap();
        write_reports(dir.path(), &cmp).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + cmp.rows.len());
        assert!(csv.starts_with("strategy,row,seed,budget,n_images,faithfulness_jsd"));
        let back: Comparison =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, cmp);
    }

    #[test]
    fn strategy_names() {
        for s in Strategy::ALL {
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("fastv".parse::<Strategy>().is_err());
    }
}
