//! Density peaks clustering with kNN density (DPC-kNN).
//!
//! Distances are exact and recomputed row by row, so memory stays `O(L)`
//! beyond the input. Rows are processed in parallel; every output entry
//! depends only on its own row, so results do not depend on the schedule.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{euclidean, TokenMatrix};

/// Cluster centers, per-point assignment and cluster sizes.
///
/// `assignment[i]` is a position into `center_indices`/`sizes`, not a row
/// index of the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterResult {
    pub center_indices: Vec<usize>,
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl ClusterResult {
    pub fn n_clusters(&self) -> usize {
        self.center_indices.len()
    }

    /// Size of the cluster containing point `i`.
    pub fn size_of(&self, i: usize) -> usize {
        self.sizes[self.assignment[i]]
    }

    /// A single cluster holding every point, centered on point 0.
    fn trivial(len: usize) -> Self {
        Self {
            center_indices: vec![0],
            assignment: vec![0; len],
            sizes: vec![len],
        }
    }
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k == 0 || k >= len {
        return Err(Error::InvalidInput(format!(
            "kNN size k={k} must satisfy 1 <= k <= L-1 (L={len})"
        )));
    }
    Ok(())
}

/// `rho_i = exp(-mean distance to the k nearest other points)`.
pub fn dpc_local_density(x: &TokenMatrix, k: usize) -> Result<Vec<f64>> {
    let len = x.rows();
    check_k(len, k)?;
    Ok((0..len)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut dists: Vec<f64> = (0..len)
                .filter(|&j| j != i)
                .map(|j| euclidean(xi, x.row(j)))
                .collect();
            dists.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            let mut nearest = dists[..k].to_vec();
            // Fixed summation order.
            nearest.sort_by(|a, b| a.total_cmp(b));
            (-nearest.iter().sum::<f64>() / k as f64).exp()
        })
        .collect())
}

/// Distance to the nearest strictly denser point. Points with no denser
/// point get the largest pairwise distance in the data set.
pub fn dpc_delta(x: &TokenMatrix, rho: &[f64]) -> Result<Vec<f64>> {
    let len = x.rows();
    if rho.len() != len {
        return Err(Error::Shape(format!(
            "{} densities for {len} points",
            rho.len()
        )));
    }
    let per_point: Vec<(f64, f64)> = (0..len)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut nearest_denser = f64::INFINITY;
            let mut farthest = 0.0f64;
            for j in (0..len).filter(|&j| j != i) {
                let d = euclidean(xi, x.row(j));
                farthest = farthest.max(d);
                if rho[j] > rho[i] {
                    nearest_denser = nearest_denser.min(d);
                }
            }
            (nearest_denser, farthest)
        })
        .collect();
    let diameter = per_point.iter().map(|p| p.1).fold(0.0, f64::max);
    Ok(per_point
        .into_iter()
        .map(|(nearest, _)| {
            if nearest.is_finite() {
                nearest
            } else {
                diameter
            }
        })
        .collect())
}

/// Full DPC-kNN: pick the `n_clusters` points with the highest `rho * delta`
/// as centers and attach every other point to its nearest center.
///
/// Ties in the center ranking go to the lower index; ties in assignment go
/// to the better-ranked center. A candidate center that coincides exactly
/// with an already chosen center is skipped, so fewer than `n_clusters`
/// clusters come back when the data has fewer distinct locations.
pub fn dpc_cluster(x: &TokenMatrix, k: usize, n_clusters: usize) -> Result<ClusterResult> {
    let len = x.rows();
    if n_clusters == 0 || n_clusters > len {
        return Err(Error::InvalidInput(format!(
            "n_clusters={n_clusters} must satisfy 1 <= n_clusters <= L (L={len})"
        )));
    }
    if len == 1 {
        return Ok(ClusterResult::trivial(1));
    }
    check_k(len, k)?;

    let rho = dpc_local_density(x, k)?;
    let delta = dpc_delta(x, &rho)?;
    let mut ranking: Vec<usize> = (0..len).collect();
    ranking.sort_by(|&a, &b| {
        let sa = rho[a] * delta[a];
        let sb = rho[b] * delta[b];
        sb.partial_cmp(&sa)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut centers: Vec<usize> = Vec::with_capacity(n_clusters);
    for &cand in &ranking {
        if centers.len() == n_clusters {
            break;
        }
        let duplicate = centers.iter().any(|&c| x.row(c) == x.row(cand));
        if !duplicate {
            centers.push(cand);
        }
    }

    let assignment: Vec<usize> = (0..len)
        .into_par_iter()
        .map(|i| {
            if let Some(pos) = centers.iter().position(|&c| c == i) {
                return pos;
            }
            let xi = x.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (pos, &c) in centers.iter().enumerate() {
                let d = euclidean(xi, x.row(c));
                if d < best_d {
                    best_d = d;
                    best = pos;
                }
            }
            best
        })
        .collect();

    let mut sizes = vec![0usize; centers.len()];
    for &a in &assignment {
        sizes[a] += 1;
    }
    Ok(ClusterResult {
        center_indices: centers,
        assignment,
        sizes,
    })
}

/// `ceil(len / k)`, the default number of centers for a density parameter `k`.
pub fn default_cluster_count(len: usize, k: usize) -> usize {
    len.div_ceil(k.max(1)).clamp(1, len.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn points_1d(xs: &[f64]) -> TokenMatrix {
        TokenMatrix::from_rows(&xs.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn density_hand_values() {
        let x = points_1d(&[0.0, 1.0, 3.0]);
        let rho = dpc_local_density(&x, 2).unwrap();
        assert!((rho[0] - (-2.0f64).exp()).abs() < 1e-6);
        assert!((rho[0] - 0.135335).abs() < 1e-6);
        // point 1: distances {1, 2} -> exp(-1.5); point 3: {3, 2} -> exp(-2.5)
        assert!((rho[1] - (-1.5f64).exp()).abs() < 1e-12);
        assert!((rho[2] - (-2.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn density_of_duplicates_is_one() {
        let x = points_1d(&[2.0, 2.0, 2.0, 9.0]);
        let rho = dpc_local_density(&x, 2).unwrap();
        assert_eq!(&rho[..3], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn density_rejects_bad_k() {
        let x = points_1d(&[0.0, 1.0, 3.0]);
        assert!(matches!(
            dpc_local_density(&x, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            dpc_local_density(&x, 3),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn delta_hand_values() {
        let x = points_1d(&[0.0, 1.0, 3.0]);
        let delta = dpc_delta(&x, &[0.3, 0.9, 0.1]).unwrap();
        assert_eq!(delta, vec![1.0, 3.0, 2.0]);
    }

    #[test]
    fn delta_of_identical_points_is_zero() {
        let x = points_1d(&[4.0, 4.0, 4.0]);
        let rho = dpc_local_density(&x, 1).unwrap();
        assert_eq!(dpc_delta(&x, &rho).unwrap(), vec![0.0; 3]);
        let single = points_1d(&[4.0]);
        assert_eq!(dpc_delta(&single, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn delta_max_branch_only_for_the_densest_point() {
        let x = points_1d(&[0.0, 0.5, 1.0, 10.0]);
        let rho = [0.2, 0.9, 0.5, 0.1];
        let delta = dpc_delta(&x, &rho).unwrap();
        assert_eq!(delta[1], 10.0);
        assert_eq!(delta[0], 0.5);
        assert_eq!(delta[2], 0.5);
        assert_eq!(delta[3], 9.0);
    }

    pub(crate) fn two_blobs(seed: u64) -> (TokenMatrix, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (label, center) in [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]].iter().enumerate() {
            for _ in 0..20 {
                rows.push(
                    center
                        .iter()
                        .map(|c| c + noise.sample(&mut rng))
                        .collect::<Vec<f64>>(),
                );
                labels.push(label);
            }
        }
        (TokenMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn two_blobs_are_recovered() {
        let (x, labels) = two_blobs(7);
        let res = dpc_cluster(&x, 5, 2).unwrap();
        assert_eq!(res.sizes, vec![20, 20]);
        let first = res.assignment[0];
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(res.assignment[i] == first, l == 0, "point {i}");
        }
        for (pos, &c) in res.center_indices.iter().enumerate() {
            assert_eq!(res.assignment[c], pos);
        }
    }

    #[test]
    fn extreme_cluster_counts() {
        let (x, _) = two_blobs(3);
        let all = dpc_cluster(&x, 4, x.rows()).unwrap();
        assert!(all.sizes.iter().all(|&s| s == 1));
        assert_eq!(all.n_clusters(), x.rows());
        let one = dpc_cluster(&x, 4, 1).unwrap();
        assert_eq!(one.sizes, vec![x.rows()]);
        assert!(matches!(dpc_cluster(&x, 4, 0), Err(Error::InvalidInput(_))));
        assert!(matches!(
            dpc_cluster(&x, 4, x.rows() + 1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let x = TokenMatrix::from_rows(&vec![vec![1.0, 2.0]; 10]).unwrap();
        let res = dpc_cluster(&x, 3, 4).unwrap();
        assert_eq!(res.sizes, vec![10]);
    }

    #[test]
    fn clustering_is_schedule_independent() {
        let (x, _) = two_blobs(11);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    (
                        dpc_local_density(&x, 6).unwrap(),
                        dpc_cluster(&x, 6, 5).unwrap(),
                    )
                })
        };
        let (rho1, c1) = run(1);
        let (rho4, c4) = run(4);
        assert_eq!(c1, c4);
        let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&rho1), bits(&rho4));
    }

    #[test]
    fn density_is_translation_invariant() {
        let (x, _) = two_blobs(5);
        let shifted: Vec<Vec<f64>> = x
            .iter_rows()
            .map(|r| r.iter().map(|v| v + 3.25).collect())
            .collect();
        let y = TokenMatrix::from_rows(&shifted).unwrap();
        let a = dpc_local_density(&x, 7).unwrap();
        let b = dpc_local_density(&y, 7).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn default_counts() {
        assert_eq!(default_cluster_count(64, 16), 4);
        assert_eq!(default_cluster_count(65, 16), 5);
        assert_eq!(default_cluster_count(3, 64), 1);
    }
}
