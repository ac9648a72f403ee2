//! Ordered kNN clusters and their decomposition into equal, rank-contiguous
//! sub-clusters.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::EmbeddingSet;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// A centroid and its `n` most similar samples, centroid first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCluster {
    pub centroid: usize,
    pub members: Vec<usize>,
    pub similarities: Vec<f64>,
    /// 1.0 where the member shares the centroid's label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<f64>>,
}

impl NeighborCluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn positives(&self) -> f64 {
        self.targets.as_ref().map_or(0.0, |t| t.iter().sum())
    }
}

/// `k` token sequences of `s` rows each, in rank order.
#[derive(Debug, Clone)]
pub struct SubClusterBatch {
    pub k: usize,
    pub s: usize,
    pub sequences: Vec<Array2<f64>>,
    pub source: NeighborCluster,
}

impl SubClusterBatch {
    pub fn members(&self, m: usize) -> &[usize] {
        &self.source.members[m * self.s..(m + 1) * self.s]
    }

    /// Concatenate the sequences back into one `n x d` matrix.
    pub fn flatten(&self) -> Array2<f64> {
        let views: Vec<_> = self.sequences.iter().map(|s| s.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("sequences share a width")
    }
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.dot(&b))
}

fn by_similarity(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Brute-force ordered neighborhood of sample `i` over a normalized set.
///
/// Ties are broken by ascending sample index. Similarities are clamped to
/// `[-1, 1]` and the centroid is pinned at rank 0 with similarity 1.
pub fn knn_query(set: &EmbeddingSet, i: usize, n: usize) -> Result<NeighborCluster> {
    let total = set.len();
    if i >= total {
        return Err(Error::Invalid(format!(
            "sample {i} out of range for N={total}"
        )));
    }
    if n == 0 || n > total {
        return Err(Error::Config(format!(
            "cluster size n={n} must be in 1..={total}"
        )));
    }
    let query = set.vectors.row(i);
    let mut scored: Vec<(usize, f64)> = set
        .vectors
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, row)| (j, query.dot(&row).clamp(-1.0, 1.0)))
        .collect();
    let keep = n - 1;
    if keep > 0 && keep < scored.len() {
        scored.select_nth_unstable_by(keep - 1, by_similarity);
    }
    scored.truncate(keep);
    scored.sort_unstable_by(by_similarity);

    let mut members = Vec::with_capacity(n);
    let mut similarities = Vec::with_capacity(n);
    members.push(i);
    similarities.push(1.0);
    for (j, sim) in scored {
        members.push(j);
        similarities.push(sim);
    }
    let targets = set.labels.as_ref().map(|labels| {
        members
            .iter()
            .map(|&j| if labels[j] == labels[i] { 1.0 } else { 0.0 })
            .collect()
    });
    Ok(NeighborCluster {
        centroid: i,
        members,
        similarities,
        targets,
    })
}

/// Neighborhoods of every sample, fanned out under `exec`.
pub fn knn_all(set: &EmbeddingSet, n: usize, exec: Exec) -> Result<Vec<NeighborCluster>> {
    if n == 0 || n > set.len() {
        return Err(Error::Config(format!(
            "cluster size n={n} must be in 1..={}",
            set.len()
        )));
    }
    exec.map(set.len(), |i| knn_query(set, i, n))
        .into_iter()
        .collect()
}

/// Split a cluster into `k` rank blocks of `n / k` members and gather their
/// embedding rows.
pub fn decompose(
    cluster: &NeighborCluster,
    k: usize,
    set: &EmbeddingSet,
) -> Result<SubClusterBatch> {
    let n = cluster.len();
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "sub-cluster count k={k} must divide cluster size n={n}"
        )));
    }
    let s = n / k;
    let sequences = cluster
        .members
        .chunks(s)
        .map(|chunk| set.vectors.select(Axis(0), chunk))
        .collect();
    Ok(SubClusterBatch {
        k,
        s,
        sequences,
        source: cluster.clone(),
    })
}

/// Check both ordering constraints: similarity to the centroid never
/// increases within a sub-cluster, and the last member of each sub-cluster
/// is at least as similar as the first member of the next. Similarities are
/// recomputed from the token rows.
pub fn verify_order(batch: &SubClusterBatch) -> bool {
    let Some(first) = batch.sequences.first() else {
        return true;
    };
    if first.nrows() == 0 {
        return true;
    }
    let centroid = first.row(0);
    let sim = |row: ArrayView1<f64>| centroid.dot(&row).clamp(-1.0, 1.0);
    let mut prev: Option<f64> = None;
    for seq in &batch.sequences {
        for (j, row) in seq.axis_iter(Axis(0)).enumerate() {
            // The centroid is rank 0 by construction; its own similarity is 1.
            let cur = if prev.is_none() && j == 0 {
                1.0
            } else {
                sim(row)
            };
            if let Some(p) = prev {
                if cur > p {
                    return false;
                }
            }
            prev = Some(cur);
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, GroupSpec, SyntheticSpec};
    use ndarray::array;

    fn unit_set(rows: Array2<f64>, labels: Option<Vec<u32>>) -> EmbeddingSet {
        crate::dataio::l2_normalize(&EmbeddingSet::new(rows, labels, None).unwrap()).unwrap()
    }

    fn synthetic(seed: u64) -> EmbeddingSet {
        generate_synthetic(&SyntheticSpec {
            groups: vec![GroupSpec {
                group_id: 0,
                identity_count: 6,
                images_per_identity: (3, 7),
                noise_scale: 0.5,
            }],
            dim: 8,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        let s = |a: [f64; 2], b: [f64; 2]| {
            cosine_similarity(ndarray::aview1(&a), ndarray::aview1(&b)).unwrap()
        };
        assert_eq!(s([1.0, 0.0], [1.0, 0.0]), 1.0);
        assert_eq!(s([1.0, 0.0], [0.0, 1.0]), 0.0);
        assert!((s([0.6, 0.8], [0.8, 0.6]) - 0.96).abs() < 1e-15);
        assert!(cosine_similarity(ndarray::aview1(&[1.0]), ndarray::aview1(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_ranking() {
        let set = synthetic(1);
        for i in [0, 5, set.len() - 1] {
            let c = knn_query(&set, i, 10).unwrap();
            let mut all: Vec<(usize, f64)> = (0..set.len())
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        j,
                        set.vectors.row(i).dot(&set.vectors.row(j)).clamp(-1.0, 1.0),
                    )
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: Vec<usize> = std::iter::once(i)
                .chain(all.iter().take(9).map(|x| x.0))
                .collect();
            assert_eq!(c.members, expected);
        }
    }

    #[test]
    fn knn_colinear_three_points() {
        let set = unit_set(
            array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            Some(vec![0, 0, 1]),
        );
        let c = knn_query(&set, 0, 3).unwrap();
        assert_eq!(c.members, vec![0, 1, 2]);
        assert_eq!(c.targets, Some(vec![1.0, 1.0, 0.0]));
        assert_eq!(knn_query(&set, 0, 1).unwrap().members, vec![0]);
        assert!(knn_query(&set, 0, 4).is_err());
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        let set = unit_set(array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], None);
        let c = knn_query(&set, 1, 4).unwrap();
        assert_eq!(c.members, vec![1, 2, 3, 0]);
        assert_eq!(c, knn_query(&set, 1, 4).unwrap());
    }

    #[test]
    fn decompose_shapes() {
        let set = synthetic(2);
        let c = knn_query(&set, 3, 8).unwrap();
        let b = decompose(&c, 4, &set).unwrap();
        assert_eq!(b.s, 2);
        assert!(b.sequences.iter().all(|s| s.nrows() == 2));
        assert_eq!(b.members(0), &c.members[0..2]);
        assert_eq!(b.members(0)[0], 3);
        let one = decompose(&c, 1, &set).unwrap();
        assert_eq!(one.sequences.len(), 1);
        assert_eq!(one.sequences[0], set.vectors.select(Axis(0), &c.members));
        assert!(matches!(decompose(&c, 3, &set), Err(Error::Config(_))));
    }

    #[test]
    fn decompose_satisfies_order_constraints() {
        let set = synthetic(4);
        for i in 0..set.len() {
            let c = knn_query(&set, i, 12).unwrap();
            for k in [1, 2, 3, 4, 6, 12] {
                let b = decompose(&c, k, &set).unwrap();
                assert!(verify_order(&b));
                // rank-by-rank against the stored similarities
                for m in 0..k {
                    for j in 0..b.s - 1 {
                        let r = m * b.s + j;
                        assert!(c.similarities[r] >= c.similarities[r + 1]);
                    }
                    if m + 1 < k {
                        let last = m * b.s + b.s - 1;
                        assert!(c.similarities[last] >= c.similarities[last + 1]);
                    }
                }
                assert_eq!(b.flatten(), set.vectors.select(Axis(0), &c.members));
            }
        }
    }

    #[test]
    fn swapped_ranks_fail_verification() {
        let set = synthetic(5);
        let c = knn_query(&set, 0, 8).unwrap();
        let mut b = decompose(&c, 2, &set).unwrap();
        // swap rank 1 and rank 6 across sub-clusters
        let r1 = b.sequences[0].row(1).to_owned();
        let r6 = b.sequences[1].row(2).to_owned();
        assert!(c.similarities[1] > c.similarities[6]);
        b.sequences[0].row_mut(1).assign(&r6);
        b.sequences[1].row_mut(2).assign(&r1);
        assert!(!verify_order(&b));
    }

    #[test]
    fn single_block_verification_is_a_monotone_scan() {
        let set = synthetic(6);
        let c = knn_query(&set, 2, 10).unwrap();
        let mut b = decompose(&c, 1, &set).unwrap();
        let scan = |m: &Array2<f64>| {
            let sims: Vec<f64> = (0..m.nrows())
                .map(|j| {
                    if j == 0 {
                        1.0
                    } else {
                        m.row(0).dot(&m.row(j)).clamp(-1.0, 1.0)
                    }
                })
                .collect();
            sims.windows(2).all(|w| w[0] >= w[1])
        };
        assert_eq!(verify_order(&b), scan(&b.sequences[0]));
        let (a, z) = (
            b.sequences[0].row(3).to_owned(),
            b.sequences[0].row(8).to_owned(),
        );
        b.sequences[0].row_mut(3).assign(&z);
        b.sequences[0].row_mut(8).assign(&a);
        assert_eq!(verify_order(&b), scan(&b.sequences[0]));
    }

    #[test]
    fn knn_all_policies_agree() {
        let set = synthetic(7);
        let a = knn_all(&set, 5, Exec::Sequential).unwrap();
        let b = knn_all(&set, 5, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().enumerate().all(|(i, c)| c.members[0] == i));
    }
}
