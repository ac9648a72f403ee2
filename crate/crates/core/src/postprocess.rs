//! From per-cluster link probabilities to one global partition.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};
use crate::exec::Exec;
use crate::neighborhood::NeighborCluster;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Undirected weighted edges, stored with `i < j`, sorted, one per pair.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkSet {
    pub edges: Vec<(usize, usize, f64)>,
}

impl LinkSet {
    /// Canonicalize arbitrary edges: drops self-loops, keeps the strongest duplicate.
    pub fn from_edges(edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut best: HashMap<(usize, usize), f64> = HashMap::new();
        for (a, b, w) in edges {
            if a == b {
                continue;
            }
            let key = (a.min(b), a.max(b));
            let slot = best.entry(key).or_insert(w);
            if w > *slot {
                *slot = w;
            }
        }
        let mut edges: Vec<_> = best.into_iter().map(|((i, j), w)| (i, j, w)).collect();
        edges.sort_by_key(|e| (e.0, e.1));
        LinkSet { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Links from each centroid to the members predicted to share its identity.
pub fn extract_links(
    clusters: &[NeighborCluster],
    predictions: &[Array1<f64>],
    threshold: f64,
    exec: Exec,
) -> Result<LinkSet> {
    if clusters.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            what: "predictions",
            expected: clusters.len(),
            got: predictions.len(),
        });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    if let Some((c, q)) = clusters
        .iter()
        .zip(predictions)
        .find(|(c, q)| c.len() != q.len())
    {
        return Err(Error::LengthMismatch {
            what: "cluster predictions",
            expected: c.len(),
            got: q.len(),
        });
    }
    let per_cluster = exec.map(clusters.len(), |ci| {
        let c = &clusters[ci];
        let q = &predictions[ci];
        (1..c.len())
            .filter(|&r| q[r] > threshold)
            .map(|r| (c.centroid, c.members[r], q[r]))
            .collect::<Vec<_>>()
    });
    Ok(LinkSet::from_edges(per_cluster.into_iter().flatten()))
}

/// A flat clustering of `N` samples with IDs in `0..cluster_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub cluster_count: usize,
}

impl Partition {
    /// Relabel arbitrary IDs to `0..` in order of first appearance.
    pub fn from_labels<T: Copy + Eq + std::hash::Hash>(labels: &[T]) -> Self {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let assignment = labels
            .iter()
            .map(|l| {
                let next = ids.len();
                *ids.entry(*l).or_insert(next)
            })
            .collect();
        Partition {
            assignment,
            cluster_count: ids.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Restrict to `rows`, relabeling to a contiguous range.
    pub fn restrict(&self, rows: &[usize]) -> Partition {
        let sub: Vec<usize> = rows.iter().map(|&r| self.assignment[r]).collect();
        Partition::from_labels(&sub)
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = vec![false; self.cluster_count];
        for &a in &self.assignment {
            match seen.get_mut(a) {
                Some(s) => *s = true,
                None => return false,
            }
        }
        seen.into_iter().all(|s| s)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the link graph; IDs ordered by smallest member.
pub fn merge(links: &LinkSet, n: usize) -> Result<Partition> {
    let mut uf = UnionFind::new(n);
    for &(i, j, _) in &links.edges {
        if i >= n || j >= n {
            return Err(Error::Invalid(format!(
                "link ({i}, {j}) out of range for {n} samples"
            )));
        }
        uf.union(i, j);
    }
    let roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    Ok(Partition::from_labels(&roots))
}

/// Write `sample_index,cluster_id` rows, optionally preceded by a hash comment.
pub fn write_partition_csv(
    partition: &Partition,
    path: &Path,
    config_hash: Option<&str>,
) -> Result<()> {
    let mut out = Vec::with_capacity(partition.len() * 12 + 64);
    if let Some(h) = config_hash {
        writeln!(out, "# config_hash={h}").expect("vec write");
    }
    writeln!(out, "sample_index,cluster_id").expect("vec write");
    for (i, c) in partition.assignment.iter().enumerate() {
        writeln!(out, "{i},{c}").expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_partition_csv(path: &Path) -> Result<Partition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: Location::Line(line),
        message,
    };
    let mut labels = Vec::new();
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if line == "sample_index,cluster_id" {
                continue;
            }
        }
        let (idx, cid) = line
            .split_once(',')
            .ok_or_else(|| parse_err(ln + 1, "expected two columns".into()))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|e| parse_err(ln + 1, format!("{e}")))?;
        let cid: usize = cid
            .trim()
            .parse()
            .map_err(|e| parse_err(ln + 1, format!("{e}")))?;
        if idx != labels.len() {
            return Err(parse_err(
                ln + 1,
                format!("expected sample_index {}, got {idx}", labels.len()),
            ));
        }
        labels.push(cid);
    }
    Ok(Partition::from_labels(&labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cluster(centroid: usize, members: Vec<usize>) -> NeighborCluster {
        let n = members.len();
        NeighborCluster {
            centroid,
            members,
            similarities: vec![1.0; n],
            targets: None,
        }
    }

    #[test]
    fn links_skip_rank_zero_and_low_scores() {
        let c = vec![cluster(0, vec![0, 1, 2])];
        let q = vec![Array1::from(vec![1.0, 0.9, 0.1])];
        let links = extract_links(&c, &q, 0.5, Exec::Sequential).unwrap();
        assert_eq!(links.edges, vec![(0, 1, 0.9)]);
        let none = extract_links(&c, &q, 1.0 - 1e-12, Exec::Sequential).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn shared_pairs_keep_the_stronger_link() {
        let c = vec![cluster(0, vec![0, 1]), cluster(1, vec![1, 0])];
        let q = vec![Array1::from(vec![1.0, 0.6]), Array1::from(vec![1.0, 0.8])];
        let links = extract_links(&c, &q, 0.5, Exec::Sequential).unwrap();
        assert_eq!(links.edges, vec![(0, 1, 0.8)]);
    }

    #[test]
    fn misaligned_predictions_are_rejected() {
        let c = vec![cluster(0, vec![0, 1])];
        assert!(extract_links(&c, &[], 0.5, Exec::Sequential).is_err());
        let q = vec![Array1::from(vec![1.0])];
        assert!(extract_links(&c, &q, 0.5, Exec::Sequential).is_err());
    }

    #[test]
    fn merge_examples() {
        let chain = LinkSet::from_edges([(0, 1, 0.9), (1, 2, 0.9)]);
        let p = merge(&chain, 4).unwrap();
        assert_eq!(p.assignment, vec![0, 0, 0, 1]);
        assert_eq!(p.cluster_count, 2);

        let p = merge(&LinkSet::default(), 3).unwrap();
        assert_eq!(p.assignment, vec![0, 1, 2]);

        let complete = LinkSet::from_edges((0..5).flat_map(|i| (0..5).map(move |j| (i, j, 1.0))));
        assert_eq!(merge(&complete, 5).unwrap().cluster_count, 1);
        assert!(merge(&chain, 2).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = Partition::from_labels(&[3, 3, 1, 7, 1]);
        write_partition_csv(&p, &path, Some("abc")).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config_hash=abc\nsample_index,cluster_id\n0,0\n"));
        assert_eq!(read_partition_csv(&path).unwrap(), p);
    }

    fn arb_links() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
        (2usize..30).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec((0..n, 0..n, 0.0f64..1.0), 0..60),
            )
        })
    }

    proptest! {
        #[test]
        fn merge_ignores_edge_order((n, edges) in arb_links(), seed in any::<u64>()) {
            let a = merge(&LinkSet { edges: edges.clone() }, n).unwrap();
            let mut shuffled = edges;
            let len = shuffled.len();
            if len > 1 {
                for i in 0..len {
                    let j = (seed as usize).wrapping_mul(i + 7) % len;
                    shuffled.swap(i, j);
                }
            }
            let b = merge(&LinkSet { edges: shuffled }, n).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_valid());
            prop_assert_eq!(a.len(), n);
        }

        #[test]
        fn raising_threshold_never_merges_more(
            qs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 6),
            t1 in 0.05f64..0.95,
            dt in 0.0f64..0.5,
        ) {
            let clusters: Vec<_> = (0..6).map(|c| cluster(c, vec![c, (c + 1) % 6, (c + 2) % 6, (c + 4) % 6])).collect();
            let preds: Vec<_> = qs.into_iter().map(Array1::from).collect();
            let t2 = (t1 + dt).min(0.99);
            let lo = merge(&extract_links(&clusters, &preds, t1, Exec::Sequential).unwrap(), 6).unwrap();
            let hi = merge(&extract_links(&clusters, &preds, t2, Exec::Sequential).unwrap(), 6).unwrap();
            prop_assert!(hi.cluster_count >= lo.cluster_count);
        }

        #[test]
        fn canonical_links_are_unique(edges in prop::collection::vec((0usize..8, 0usize..8, 0.0f64..1.0), 0..40)) {
            let l = LinkSet::from_edges(edges);
            prop_assert!(l.edges.iter().all(|&(i, j, w)| i < j && (0.0..=1.0).contains(&w)));
            prop_assert!(l.edges.windows(2).all(|w| (w[0].0, w[0].1) < (w[1].0, w[1].1)));
        }
    }
}
