//! Small dense-matrix helpers, probability distributions and divergences.
//!
//! Everything here accumulates in `f64`. Logarithms are natural, so JSD
//! values live on the nat scale with an upper bound of `ln 2`.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// A single embedding row (a visual token or the pad embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("embedding must have d >= 1".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding entry {pos} is not finite"
            )));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// `L x d` row-major matrix of token embeddings. Row order is the spatial
/// order of the tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "token matrix must be non-empty, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{dim} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "entry ({}, {}) is not finite",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidInput(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dim, data)
    }

    /// Copy with each listed row overwritten by `replacement`.
    pub fn with_rows_replaced(&self, indices: &[usize], replacement: &[f64]) -> Result<Self> {
        if replacement.len() != self.dim {
            return Err(Error::Shape(format!(
                "replacement has dim {}, matrix has dim {}",
                replacement.len(),
                self.dim
            )));
        }
        let mut out = self.clone();
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidInput(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            out.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(replacement);
        }
        Ok(out)
    }

    /// Round every entry to the nearest `f32`. Matrices that have been
    /// through this survive a float32 file round trip bit-exactly.
    pub fn rounded_to_f32(&self) -> Self {
        Self {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Confidence scores for a set of candidate token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLogits {
    candidate_ids: Vec<u32>,
    logits: Vec<f64>,
}

impl SparseLogits {
    pub fn new(candidate_ids: Vec<u32>, logits: Vec<f64>) -> Result<Self> {
        if candidate_ids.is_empty() {
            return Err(Error::InvalidInput("logits must be non-empty".into()));
        }
        if candidate_ids.len() != logits.len() {
            return Err(Error::Shape(format!(
                "{} candidate ids but {} logits",
                candidate_ids.len(),
                logits.len()
            )));
        }
        if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit for candidate {} is not finite",
                candidate_ids[pos]
            )));
        }
        let mut seen = candidate_ids.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "candidate id {} appears twice",
                w[0]
            )));
        }
        Ok(Self {
            candidate_ids,
            logits,
        })
    }

    /// Dense logits over ids `0..logits.len()`.
    pub fn dense(logits: Vec<f64>) -> Result<Self> {
        let ids = (0..logits.len() as u32).collect();
        Self::new(ids, logits)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn candidate_ids(&self) -> &[u32] {
        &self.candidate_ids
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn get(&self, id: u32) -> Option<f64> {
        if self.candidate_ids.get(id as usize) == Some(&id) {
            return Some(self.logits[id as usize]);
        }
        self.candidate_ids
            .iter()
            .position(|&c| c == id)
            .map(|pos| self.logits[pos])
    }

    /// Positions of the `m` highest logits, best first. Ties go to the lower
    /// candidate id. `m` is clipped to the number of candidates.
    pub fn ranked_positions(&self, m: usize) -> Vec<usize> {
        let m = m.min(self.len());
        let rank = |&a: &usize, &b: &usize| {
            self.logits[b]
                .partial_cmp(&self.logits[a])
                .unwrap_or(Ordering::Equal)
                .then(self.candidate_ids[a].cmp(&self.candidate_ids[b]))
        };
        if m == 0 {
            return Vec::new();
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if m < order.len() {
            order.select_nth_unstable_by(m - 1, rank);
            order.truncate(m);
        }
        order.sort_by(rank);
        order
    }

    /// The `m` top-ranked candidate ids, best first.
    pub fn top_ids(&self, m: usize) -> Vec<u32> {
        self.ranked_positions(m)
            .into_iter()
            .map(|p| self.candidate_ids[p])
            .collect()
    }

    /// Id of the highest logit (ties to the lower id).
    pub fn argmax(&self) -> u32 {
        self.top_ids(1)[0]
    }
}

/// A discrete distribution over candidate ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    candidate_ids: Vec<u32>,
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(candidate_ids: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if candidate_ids.len() != probs.len() || probs.is_empty() {
            return Err(Error::Shape(format!(
                "{} ids for {} probabilities",
                candidate_ids.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            candidate_ids,
            probs,
        })
    }

    pub fn from_logits(candidate_ids: Vec<u32>, logits: &[f64]) -> Result<Self> {
        let probs = softmax(logits)?;
        Self::new(candidate_ids, probs)
    }

    pub fn candidate_ids(&self) -> &[u32] {
        &self.candidate_ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Numerically stable softmax (shifted by the maximum).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax input is not finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Scale every row to unit Euclidean norm. All-zero rows stay zero.
pub fn l2_normalize_rows(m: &TokenMatrix) -> TokenMatrix {
    let mut data = Vec::with_capacity(m.as_slice().len());
    for row in m.iter_rows() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            data.extend(row.iter().map(|v| v / norm));
        } else {
            data.extend_from_slice(row);
        }
    }
    TokenMatrix {
        rows: m.rows(),
        dim: m.dim(),
        data,
    }
}

/// Dense `rows x cols` matrix of similarity values.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Pairwise cosine similarity between the rows of `t` (`L x d`) and the rows
/// of `c` (`N x d`). Zero rows have similarity 0 with everything.
pub fn cosine_similarity_matrix(t: &TokenMatrix, c: &TokenMatrix) -> Result<SimilarityMatrix> {
    if t.dim() != c.dim() {
        return Err(Error::Shape(format!(
            "token dim {} does not match prototype dim {}",
            t.dim(),
            c.dim()
        )));
    }
    let tn = l2_normalize_rows(t);
    let cn = l2_normalize_rows(c);
    let cols = c.rows();
    let mut data = vec![0.0; t.rows() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols)
            .zip(tn.as_slice().par_chunks(tn.dim().max(1)))
            .for_each(|(out, ti)| {
                for (o, cj) in out.iter_mut().zip(cn.iter_rows()) {
                    *o = dot(ti, cj).clamp(-1.0, 1.0);
                }
            });
    }
    Ok(SimilarityMatrix {
        rows: t.rows(),
        cols: c.rows(),
        data,
    })
}

/// Dot product, summed in four interleaved lanes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, a_tail) = a[..n].split_at(n - n % 4);
    let (b4, b_tail) = b[..n].split_at(n - n % 4);
    let mut acc = [0.0f64; 4];
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = a_tail.iter().zip(b_tail).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity of two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

fn check_aligned(m: &ProbDist, q: &ProbDist) -> Result<()> {
    if m.candidate_ids != q.candidate_ids {
        return Err(Error::Alignment(format!(
            "{:?} vs {:?}",
            m.candidate_ids, q.candidate_ids
        )));
    }
    Ok(())
}

/// `KL(m || q)` in nats, with the `0 ln 0 = 0` convention.
pub fn kl_divergence(m: &ProbDist, q: &ProbDist) -> Result<f64> {
    check_aligned(m, q)?;
    Ok(kl_raw(&m.probs, &q.probs))
}

fn kl_raw(m: &[f64], q: &[f64]) -> f64 {
    m.iter()
        .zip(q)
        .filter(|(mi, _)| **mi > 0.0)
        .map(|(mi, qi)| mi * (mi / qi).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, `0 <= jsd <= ln 2`.
pub fn jsd(m: &ProbDist, n: &ProbDist) -> Result<f64> {
    check_aligned(m, n)?;
    let mid: Vec<f64> = m
        .probs
        .iter()
        .zip(&n.probs)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let value = 0.5 * (kl_raw(&m.probs, &mid) + kl_raw(&n.probs, &mid));
    // Rounding can push an exact zero slightly negative.
    Ok(value.max(0.0))
}

/// Restrict both logit sets to the `m` top-ranked ids of `src` and softmax
/// each restriction independently. Returns `(src, ablated)` distributions
/// over the same ids, best-ranked first.
pub fn head_vocab_distributions(
    src: &SparseLogits,
    ablated: &SparseLogits,
    m: usize,
) -> Result<(ProbDist, ProbDist)> {
    if m == 0 || m > src.len() {
        return Err(Error::InvalidInput(format!(
            "head vocabulary of {m} from {} source candidates",
            src.len()
        )));
    }
    let positions = src.ranked_positions(m);
    let ids: Vec<u32> = positions.iter().map(|&p| src.candidate_ids[p]).collect();
    let src_logits: Vec<f64> = positions.iter().map(|&p| src.logits[p]).collect();
    let abl_logits = ids
        .iter()
        .map(|&id| ablated.get(id).ok_or(Error::MissingCandidate(id)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((
        ProbDist::from_logits(ids.clone(), &src_logits)?,
        ProbDist::from_logits(ids, &abl_logits)?,
    ))
}

/// Probability of the rank-1 candidate after a softmax over the `m`
/// top-ranked logits (all of them when fewer than `m` are available).
pub fn top1_probability(logits: &SparseLogits, m: usize) -> Result<f64> {
    if logits.is_empty() || m == 0 {
        return Err(Error::InvalidInput("top-1 probability of nothing".into()));
    }
    let head: Vec<f64> = logits
        .ranked_positions(m)
        .into_iter()
        .map(|p| logits.logits[p])
        .collect();
    let probs = softmax(&head)?;
    Ok(probs[0])
}

/// JSD between the `m`-head distributions of two logit sets.
pub fn head_jsd(src: &SparseLogits, ablated: &SparseLogits, m: usize) -> Result<f64> {
    let m = m.min(src.len());
    let (p, q) = head_vocab_distributions(src, ablated, m)?;
    jsd(&p, &q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ProbDist {
        ProbDist::new((0..p.len() as u32).collect(), p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-12);
        let p = softmax(&[2.0, 0.0, 0.0]).unwrap();
        for (a, b) in p.iter().zip([0.78699, 0.10651, 0.10651]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            softmax(&[1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn normalize_rows() {
        let m = TokenMatrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m);
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15 && (n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        let s = TokenMatrix::from_rows(&[vec![7.5, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&s).row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_matrix_examples() {
        let t = TokenMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let c = TokenMatrix::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, -2.0, -3.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let s = cosine_similarity_matrix(&t, &c).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((s.get(0, 1) + 1.0).abs() < 1e-9);
        assert!(s.get(1, 2).abs() < 1e-9);
        let bad = TokenMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            cosine_similarity_matrix(&t, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert!(
            kl_divergence(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7]))
                .unwrap()
                .abs()
                < 1e-12
        );
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        let v = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[0.375, 0.625])).unwrap();
        assert!((v - 0.032269).abs() < 1e-5);
        let other = ProbDist::new(vec![4, 5], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            kl_divergence(&dist(&[0.5, 0.5]), &other),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn jsd_examples() {
        assert!(jsd(&dist(&[0.2, 0.8]), &dist(&[0.2, 0.8])).unwrap().abs() < 1e-12);
        let v = jsd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        let v = jsd(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        assert!((v - 0.033822).abs() < 1e-5);
    }

    #[test]
    fn head_vocab_examples() {
        let src = SparseLogits::new(vec![7, 3, 9], vec![5.0, 1.0, -2.0]).unwrap();
        let abl = SparseLogits::new(vec![7, 3], vec![5.0, 1.0]).unwrap();
        let (p, q) = head_vocab_distributions(&src, &abl, 2).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.candidate_ids(), &[7, 3]);

        let (p, q) = head_vocab_distributions(&src, &abl, 1).unwrap();
        assert_eq!(p.probs(), &[1.0]);
        assert_eq!(q.probs(), &[1.0]);
        assert_eq!(p.candidate_ids(), &[7]);

        let src = SparseLogits::new(vec![7, 3], vec![2.0, 0.0]).unwrap();
        let abl = SparseLogits::new(vec![3, 7], vec![0.0, 0.0]).unwrap();
        let (p, q) = head_vocab_distributions(&src, &abl, 2).unwrap();
        assert!((p.probs()[0] - 0.8808).abs() < 1e-4);
        assert!((p.probs()[1] - 0.1192).abs() < 1e-4);
        assert_eq!(q.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn head_vocab_errors() {
        let src = SparseLogits::new(vec![7, 3, 9], vec![5.0, 1.0, -2.0]).unwrap();
        let abl = SparseLogits::new(vec![7, 9], vec![5.0, 1.0]).unwrap();
        assert!(matches!(
            head_vocab_distributions(&src, &abl, 2),
            Err(Error::MissingCandidate(3))
        ));
        assert!(matches!(
            head_vocab_distributions(&src, &abl, 4),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn head_vocab_tie_breaks_on_lower_id() {
        let src = SparseLogits::new(vec![9, 2, 5], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(src.top_ids(2), vec![2, 5]);
    }

    #[test]
    fn top1_examples() {
        let uniform = SparseLogits::dense(vec![0.3; 4]).unwrap();
        assert!((top1_probability(&uniform, 4).unwrap() - 0.25).abs() < 1e-12);
        let peaked = SparseLogits::dense(vec![1000.0, 0.0, 0.0]).unwrap();
        assert!((top1_probability(&peaked, 3).unwrap() - 1.0).abs() < 1e-9);
        let l = SparseLogits::dense(vec![2.0, 0.0, 0.0]).unwrap();
        assert!((top1_probability(&l, 3).unwrap() - 0.78699).abs() < 1e-4);
        // m larger than the candidate list uses every candidate.
        assert!((top1_probability(&l, 50).unwrap() - 0.78699).abs() < 1e-4);
    }

    #[test]
    fn sparse_logits_validation() {
        assert!(SparseLogits::new(vec![], vec![]).is_err());
        assert!(SparseLogits::new(vec![1, 1], vec![0.0, 0.0]).is_err());
        assert!(SparseLogits::new(vec![1], vec![f64::NAN]).is_err());
    }

    fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..40)
    }

    fn prob_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(0.0f64..1.0, n),
            )
        })
    }

    fn normalized(mut v: Vec<f64>) -> Vec<f64> {
        v[0] += 1e-3;
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(l in logits_strategy(), shift in -100.0f64..100.0) {
            let p = softmax(&l).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = l.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn jsd_is_symmetric_and_bounded((a, b) in prob_pair()) {
            let m = dist(&normalized(a));
            let n = dist(&normalized(b));
            let mn = jsd(&m, &n).unwrap();
            let nm = jsd(&n, &m).unwrap();
            prop_assert!((mn - nm).abs() <= 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-9).contains(&mn));
        }

        #[test]
        fn self_head_jsd_is_zero(l in prop::collection::vec(-10.0f64..10.0, 2..30), m in 1usize..30) {
            let s = SparseLogits::dense(l).unwrap();
            prop_assert!(head_jsd(&s, &s, m).unwrap().abs() <= 1e-12);
        }

        #[test]
        fn top1_is_permutation_invariant(l in prop::collection::vec(-10.0f64..10.0, 1..30), m in 1usize..40, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let ids: Vec<u32> = (0..l.len() as u32).collect();
            let base = SparseLogits::new(ids.clone(), l.clone()).unwrap();
            let mut order: Vec<usize> = (0..l.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = SparseLogits::new(
                order.iter().map(|&i| ids[i]).collect(),
                order.iter().map(|&i| l[i]).collect(),
            ).unwrap();
            prop_assert_eq!(top1_probability(&base, m).unwrap(), top1_probability(&shuffled, m).unwrap());
        }

        #[test]
        fn ranking_matches_a_full_sort(l in prop::collection::vec(-3i32..3, 1..60), m in 0usize..70, offset in 0u32..5) {
            let ids: Vec<u32> = (0..l.len() as u32).rev().map(|i| i * 2 + offset).collect();
            let logits: Vec<f64> = l.iter().map(|&v| v as f64).collect();
            let s = SparseLogits::new(ids.clone(), logits.clone()).unwrap();
            let mut full: Vec<usize> = (0..l.len()).collect();
            full.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(ids[a].cmp(&ids[b])));
            full.truncate(m);
            prop_assert_eq!(s.ranked_positions(m), full);
            for (pos, &id) in ids.iter().enumerate() {
                prop_assert_eq!(s.get(id), Some(logits[pos]));
            }
            prop_assert_eq!(s.get(1000), None);
        }

        #[test]
        fn cosine_self_diagonal_is_one(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..10)) {
            let t = TokenMatrix::from_rows(&rows).unwrap();
            let s = cosine_similarity_matrix(&t, &t).unwrap();
            for (i, row) in rows.iter().enumerate() {
                if row.iter().any(|v| *v != 0.0) {
                    prop_assert!((s.get(i, i) - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
