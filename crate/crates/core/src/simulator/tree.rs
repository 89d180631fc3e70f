//! Digital search trees built from record bit streams.

use serde::{Deserialize, Serialize};

use super::bits::{BitRead, BitReader, BitSource, StreamBits};
use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    /// Left (bit 0) and right (bit 1) children, `u32::MAX` when empty.
    pub children: [u32; 2],
    /// Index of the record stored here.
    pub record: u32,
    pub depth: u32,
}

impl Node {
    pub fn child(&self, bit: bool) -> Option<u32> {
        let c = self.children[bit as usize];
        (c != NONE).then_some(c)
    }
}

/// Arena-backed DST. Node 0 is the root when the tree is nonempty.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DstTree {
    nodes: Vec<Node>,
}

impl DstTree {
    pub fn with_capacity(n: usize) -> Self {
        DstTree {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> Option<&Node> {
        self.nodes.first()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Inserts the next record, pulling bits from `bits` until an empty slot
    /// is reached. Returns the depth at which it was stored.
    pub fn insert<B: BitRead>(&mut self, bits: &mut B) -> Result<u32> {
        let record = self.nodes.len() as u32;
        if record == NONE {
            return Err(Error::domain("tree is full"));
        }
        if self.nodes.is_empty() {
            self.nodes.push(Node {
                children: [NONE; 2],
                record,
                depth: 0,
            });
            return Ok(0);
        }
        let mut cur = 0usize;
        loop {
            let b = bits.next_bit()? as usize;
            let next = self.nodes[cur].children[b];
            if next == NONE {
                let depth = self.nodes[cur].depth + 1;
                self.nodes[cur].children[b] = record;
                self.nodes.push(Node {
                    children: [NONE; 2],
                    record,
                    depth,
                });
                return Ok(depth);
            }
            cur = next as usize;
        }
    }

    /// Inserts `n` records whose bits come from the stream of `(seed, trial)`.
    pub fn from_stream(n: usize, master_seed: u64, trial: u64) -> Self {
        let mut tree = DstTree::with_capacity(n);
        for r in 0..n {
            let mut bits = StreamBits::for_record(master_seed, trial, r as u64);
            tree.insert(&mut bits).expect("stream bits never run out");
        }
        tree
    }
}

/// Inserts records `0..n` in order, record `i` reading from `sources[i]`.
pub fn build_tree(sources: &[BitSource], n: usize) -> Result<DstTree> {
    if sources.len() < n {
        return Err(Error::domain(format!(
            "{} bit sources supplied for {n} records",
            sources.len()
        )));
    }
    let mut tree = DstTree::with_capacity(n);
    for (i, src) in sources.iter().take(n).enumerate() {
        let mut reader = src.reader(i);
        tree.insert(&mut reader)?;
    }
    Ok(tree)
}

/// Level counts and extremal levels of one tree.
///
/// `external[k]` counts empty slots at depth `k`, `internal[k]` stored
/// records at depth `k`. Both are dense up to their last nonzero entry. For
/// the empty tree `external = [1]`, `internal = []`, `height = 0` and
/// `saturation = -1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub n: u64,
    pub external: Vec<u64>,
    pub internal: Vec<u64>,
    pub height: u32,
    pub saturation: i32,
}

impl ProfileSummary {
    pub fn external_at(&self, k: usize) -> u64 {
        self.external.get(k).copied().unwrap_or(0)
    }

    pub fn internal_at(&self, k: usize) -> u64 {
        self.internal.get(k).copied().unwrap_or(0)
    }

    /// `internal` zero-padded (or truncated) to `len` levels.
    pub fn internal_padded(&self, len: usize) -> Vec<u64> {
        (0..len).map(|k| self.internal_at(k)).collect()
    }

    /// Checks the counting identities every DST satisfies.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let ext: u64 = self.external.iter().sum();
        let int: u64 = self.internal.iter().sum();
        if ext != self.n + 1 {
            return Err(format!("sum of external = {ext}, expected {}", self.n + 1));
        }
        if int != self.n {
            return Err(format!("sum of internal = {int}, expected {}", self.n));
        }
        let levels = self.external.len().max(self.internal.len());
        for k in 0..levels {
            let lhs = 2 * self.internal_at(k);
            let rhs = self.internal_at(k + 1) + self.external_at(k + 1);
            if lhs != rhs {
                return Err(format!("2 I[{k}] = {lhs} but I[{}] + B[{}] = {rhs}", k + 1, k + 1));
            }
        }
        if self.n >= 1 && (self.external_at(0) != 0 || self.internal_at(0) != 1) {
            return Err("root level must hold one record and no slot".into());
        }
        Ok(())
    }
}

pub fn profiles(tree: &DstTree) -> ProfileSummary {
    if tree.is_empty() {
        return ProfileSummary {
            n: 0,
            external: vec![1],
            internal: Vec::new(),
            height: 0,
            saturation: -1,
        };
    }
    let mut internal: Vec<u64> = Vec::new();
    let mut external: Vec<u64> = Vec::new();
    for node in tree.nodes() {
        let d = node.depth as usize;
        if internal.len() <= d + 1 {
            internal.resize(d + 2, 0);
            external.resize(d + 2, 0);
        }
        internal[d] += 1;
        external[d + 1] += node.children.iter().filter(|&&c| c == NONE).count() as u64;
    }
    while internal.last() == Some(&0) {
        internal.pop();
    }
    while external.last() == Some(&0) {
        external.pop();
    }
    let height = external.len() as u32 - 1;
    let saturation = internal
        .iter()
        .enumerate()
        .take_while(|&(k, &c)| k < 64 && c == 1u64 << k)
        .count() as i32
        - 1;
    ProfileSummary {
        n: tree.n() as u64,
        external,
        internal,
        height,
        saturation,
    }
}

/// Depth of the `idx`-th external node when externals are listed level by level.
pub fn external_depth_by_index(summary: &ProfileSummary, mut idx: u64) -> Option<u32> {
    for (k, &c) in summary.external.iter().enumerate() {
        if idx < c {
            return Some(k as u32);
        }
        idx -= c;
    }
    None
}

/// Depth of an external node chosen uniformly among all `n + 1` externals,
/// using bits from `source`.
pub fn sample_unsuccessful_depth(tree: &DstTree, source: &BitSource) -> Result<u32> {
    let summary = profiles(tree);
    let mut reader: BitReader<'_> = source.reader(tree.n());
    let idx = reader.below(summary.n + 1)?;
    Ok(external_depth_by_index(&summary, idx).expect("index below external count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn explicit(recs: &[&str]) -> Vec<BitSource> {
        recs.iter().map(|r| BitSource::explicit(r).unwrap()).collect()
    }

    fn five_record_tree() -> DstTree {
        build_tree(&explicit(&["10", "00", "10", "01", "11"]), 5).unwrap()
    }

    #[test]
    fn five_record_tree_profile() {
        let p = profiles(&five_record_tree());
        assert_eq!(p.external, vec![0, 0, 2, 4]);
        assert_eq!(p.internal_padded(4), vec![1, 2, 2, 0]);
        assert_eq!(p.height, 3);
        assert_eq!(p.saturation, 1);
        p.check_invariants().unwrap();
    }

    #[test]
    fn empty_and_single() {
        let p = profiles(&build_tree(&[], 0).unwrap());
        assert_eq!(p.external, vec![1]);
        assert!(p.internal.is_empty());
        assert_eq!((p.height, p.saturation), (0, -1));
        p.check_invariants().unwrap();

        let p = profiles(&build_tree(&explicit(&[""]), 1).unwrap());
        assert_eq!(p.external, vec![0, 2]);
        assert_eq!(p.internal, vec![1]);
        assert_eq!((p.height, p.saturation), (1, 0));
    }

    #[test]
    fn two_records_have_a_fixed_shape() {
        for b in ["0", "1"] {
            let p = profiles(&build_tree(&explicit(&["", b]), 2).unwrap());
            assert_eq!(p.external, vec![0, 1, 2]);
            assert_eq!(p.height, 2);
        }
    }

    #[test]
    fn short_explicit_source_is_reported() {
        let err = build_tree(&explicit(&["", "1", "1"]), 3).unwrap_err();
        assert_eq!(err, Error::BitExhausted { record: 2, available: 1 });
    }

    #[test]
    fn five_record_tree_external_depths() {
        let p = profiles(&five_record_tree());
        let depths: Vec<u32> = (0..6).map(|i| external_depth_by_index(&p, i).unwrap()).collect();
        assert_eq!(depths, vec![2, 2, 3, 3, 3, 3]);
        assert_eq!(external_depth_by_index(&p, 6), None);
    }

    #[test]
    fn unsuccessful_depth_small_trees() {
        let one = DstTree::from_stream(1, 3, 0);
        for r in 0..50 {
            let d = sample_unsuccessful_depth(&one, &BitSource::stream(9, r, 1)).unwrap();
            assert_eq!(d, 1);
        }
        let two = DstTree::from_stream(2, 3, 0);
        let draws = 100_000;
        let ones = (0..draws)
            .filter(|&t| sample_unsuccessful_depth(&two, &BitSource::stream(11, t, 2)).unwrap() == 1)
            .count();
        let p = ones as f64 / draws as f64;
        assert!((p - 1.0 / 3.0).abs() < 0.01, "{p}");
    }

    #[test]
    fn stream_trees_satisfy_invariants() {
        for n in [0usize, 1, 2, 3, 17, 500] {
            for t in 0..5 {
                let p = profiles(&DstTree::from_stream(n, 77, t));
                assert_eq!(p.n, n as u64);
                p.check_invariants().unwrap();
            }
        }
    }

    #[test]
    fn stream_trees_are_reproducible() {
        assert_eq!(DstTree::from_stream(300, 5, 8), DstTree::from_stream(300, 5, 8));
        assert_ne!(DstTree::from_stream(300, 5, 8), DstTree::from_stream(300, 5, 9));
    }
}
