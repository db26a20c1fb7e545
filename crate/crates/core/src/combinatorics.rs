//! Partitions, merger signatures and forests.
//!
//! A forest is a strictly coarsening chain of partitions. Blocks are kept in
//! canonical order (ascending minimum label) so enumeration and hashing are
//! deterministic.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Label = u32;

/// Default bound on the number of leaves for forest enumeration.
pub const FOREST_BOUND: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Block(Vec<Label>);

impl Block {
    pub fn new(mut labels: Vec<Label>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        Block(labels)
    }

    pub fn singleton(l: Label) -> Self {
        Block(vec![l])
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn min(&self) -> Label {
        self.0[0]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, l: Label) -> bool {
        self.0.binary_search(&l).is_ok()
    }

    pub fn is_subset(&self, other: &Block) -> bool {
        self.0.iter().all(|l| other.contains(*l))
    }

    pub fn union(&self, other: &Block) -> Block {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        Block::new(v)
    }

    fn without(&self, l: Label) -> Block {
        Block(self.0.iter().copied().filter(|&x| x != l).collect())
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, "}}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Partition {
    blocks: Vec<Block>,
}

impl Partition {
    /// Build a partition from raw blocks, validating disjointness.
    pub fn new(blocks: Vec<Vec<Label>>) -> Result<Self> {
        Self::from_blocks(blocks.into_iter().map(Block::new).collect())
    }

    pub fn from_blocks(mut blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        let mut seen = BTreeSet::new();
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::InvalidPartition("empty block".into()));
            }
            for &l in b.labels() {
                if l == 0 {
                    return Err(Error::InvalidPartition("labels must be positive".into()));
                }
                if !seen.insert(l) {
                    return Err(Error::InvalidPartition(format!("label {l} repeated")));
                }
            }
        }
        blocks.sort_by_key(|b| b.min());
        Ok(Partition { blocks })
    }

    /// The partition of `{1, …, n}` into singletons.
    pub fn singletons(n: usize) -> Self {
        Partition {
            blocks: (1..=n as Label).map(Block::singleton).collect(),
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn ground_set(&self) -> Vec<Label> {
        let mut v: Vec<Label> = self.blocks.iter().flat_map(|b| b.labels().iter().copied()).collect();
        v.sort_unstable();
        v
    }

    pub fn block_of(&self, l: Label) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(l))
    }

    /// Merge groups of block indices; blocks not listed stay as they are.
    pub fn merge_groups(&self, groups: &[Vec<usize>]) -> Result<Partition> {
        let mut used = vec![false; self.blocks.len()];
        let mut out = Vec::new();
        for g in groups {
            let mut labels = Vec::new();
            for &i in g {
                if i >= self.blocks.len() || used[i] {
                    return Err(Error::InvalidPartition(format!("bad group index {i}")));
                }
                used[i] = true;
                labels.extend_from_slice(self.blocks[i].labels());
            }
            out.push(Block::new(labels));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !used[i] {
                out.push(b.clone());
            }
        }
        Partition::from_blocks(out)
    }

    /// Is `self` a (not necessarily strict) coarsening of `finer`?
    pub fn coarsens(&self, finer: &Partition) -> bool {
        self.ground_set() == finer.ground_set()
            && finer.blocks.iter().all(|b| self.blocks.iter().any(|c| b.is_subset(c)))
    }

    fn without(&self, l: Label) -> Option<Partition> {
        let blocks: Vec<Block> = self
            .blocks
            .iter()
            .map(|b| b.without(l))
            .filter(|b| !b.is_empty())
            .collect();
        if blocks.is_empty() {
            None
        } else {
            Some(Partition::from_blocks(blocks).expect("restriction keeps validity"))
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Group sizes `k_1 ≥ … ≥ k_m ≥ 2` of a simultaneous merger.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergerSignature(Vec<u32>);

impl MergerSignature {
    pub fn new(mut ks: Vec<u32>) -> Result<Self> {
        if ks.is_empty() || ks.iter().any(|&k| k < 2) {
            return Err(Error::InvalidSignature(format!("{ks:?}")));
        }
        ks.sort_unstable_by(|a, b| b.cmp(a));
        Ok(MergerSignature(ks))
    }

    pub fn binary() -> Self {
        MergerSignature(vec![2])
    }

    pub fn groups(&self) -> &[u32] {
        &self.0
    }

    pub fn num_groups(&self) -> usize {
        self.0.len()
    }

    /// Number of lineages taking part.
    pub fn total(&self) -> usize {
        self.0.iter().map(|&k| k as usize).sum()
    }

    /// Number of lineages left after the merger starting from `n`.
    pub fn lineages_after(&self, n: usize) -> usize {
        n - self.total() + self.num_groups()
    }

    /// All signatures admissible with `n` lineages, in a fixed order.
    pub fn all(n: usize) -> Vec<MergerSignature> {
        fn rec(rem: usize, max: usize, cur: &mut Vec<u32>, out: &mut Vec<MergerSignature>) {
            if !cur.is_empty() {
                out.push(MergerSignature(cur.clone()));
            }
            for k in (2..=max.min(rem)).rev() {
                cur.push(k as u32);
                rec(rem - k, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, n, &mut Vec::new(), &mut out);
        out.sort();
        out
    }
}

impl fmt::Display for MergerSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

/// All set partitions of `0..n` as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for g in 0..=max + 1 {
            cur.push(g);
            rec(i + 1, n, max.max(g), cur, out);
            cur.pop();
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut cur = vec![0];
    rec(1, n, 0, &mut cur, &mut out);
    out
}

/// Every strict coarsening of `p`, ordered by decreasing block count and then
/// lexicographically.
pub fn enumerate_coarsenings(p: &Partition) -> Vec<Partition> {
    let b = p.len();
    let mut out = Vec::new();
    for rgs in set_partitions(b) {
        let groups = rgs.iter().copied().max().map_or(0, |m| m + 1);
        if groups == b {
            continue;
        }
        let mut merged: Vec<Vec<usize>> = vec![Vec::new(); groups];
        for (i, &g) in rgs.iter().enumerate() {
            merged[g].push(i);
        }
        let groups: Vec<Vec<usize>> = merged.into_iter().filter(|g| g.len() > 1).collect();
        out.push(p.merge_groups(&groups).expect("groups are valid"));
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    out
}

/// Group sizes of the merger taking `p` to its strict coarsening `q`.
pub fn merger_signature(p: &Partition, q: &Partition) -> Result<MergerSignature> {
    if q.len() >= p.len() || !q.coarsens(p) {
        return Err(Error::NotCoarsening(format!("{p} -> {q}")));
    }
    let ks: Vec<u32> = q
        .blocks()
        .iter()
        .map(|c| p.blocks().iter().filter(|b| b.is_subset(c)).count() as u32)
        .filter(|&k| k >= 2)
        .collect();
    MergerSignature::new(ks)
}

/// Index groups (into `p.blocks()`) merged by the transition `p → q`.
pub fn merger_groups(p: &Partition, q: &Partition) -> Vec<Vec<usize>> {
    q.blocks()
        .iter()
        .map(|c| {
            p.blocks()
                .iter()
                .enumerate()
                .filter(|(_, b)| b.is_subset(c))
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        })
        .filter(|g| g.len() >= 2)
        .collect()
}

/// Number of distinct `(n, k⃗)`-mergers: `n!/(∏k_i! (n−Σk)! ∏m_j!)`, where
/// `m_j` counts repeated group sizes.
pub fn count_mergers(n: usize, sig: &MergerSignature) -> u128 {
    if sig.total() > n {
        return 0;
    }
    let mut count: u128 = 1;
    let mut rem = n as u128;
    for &k in sig.groups() {
        count *= binomial(rem, k as u128);
        rem -= k as u128;
    }
    let ks = sig.groups();
    let mut i = 0;
    while i < ks.len() {
        let mut j = i;
        while j < ks.len() && ks[j] == ks[i] {
            j += 1;
        }
        count /= factorial((j - i) as u128);
        i = j;
    }
    count
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c = 1u128;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

fn factorial(n: u128) -> u128 {
    (1..=n).product::<u128>().max(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ForestNode {
    pub block: Block,
    /// Index of the first level containing this block.
    pub birth: usize,
    /// Index of the first level no longer containing it (None for roots).
    pub death: Option<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

impl ForestNode {
    pub fn is_leaf(&self) -> bool {
        self.birth == 0
    }
}

/// A strictly coarsening sequence of partitions `π_0 > π_1 > … > π_m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Forest {
    levels: Vec<Partition>,
    nodes: Vec<ForestNode>,
}

impl Forest {
    pub fn new(levels: Vec<Partition>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidForest("no levels".into()));
        }
        for w in levels.windows(2) {
            if w[1].len() >= w[0].len() || !w[1].coarsens(&w[0]) {
                return Err(Error::InvalidForest(format!("{} -> {} is not a strict coarsening", w[0], w[1])));
            }
        }
        let mut nodes: Vec<ForestNode> = Vec::new();
        for (li, level) in levels.iter().enumerate() {
            for b in level.blocks() {
                if li > 0 && levels[li - 1].blocks().contains(b) {
                    continue;
                }
                nodes.push(ForestNode {
                    block: b.clone(),
                    birth: li,
                    death: None,
                    parent: None,
                    children: Vec::new(),
                });
            }
        }
        for u in 0..nodes.len() {
            let b = nodes[u].block.clone();
            let death = (nodes[u].birth..levels.len()).find(|&l| !levels[l].blocks().contains(&b));
            nodes[u].death = death;
            if let Some(d) = death {
                let pb = levels[d].blocks().iter().find(|c| b.is_subset(c)).expect("coarsening").clone();
                let p = nodes.iter().position(|n| n.block == pb && n.birth == d).expect("parent node");
                nodes[u].parent = Some(p);
                nodes[p].children.push(u);
            }
        }
        Ok(Forest { levels, nodes })
    }

    pub fn trivial(p: Partition) -> Self {
        Forest::new(vec![p]).expect("single level is valid")
    }

    pub fn levels(&self) -> &[Partition] {
        &self.levels
    }

    pub fn nodes(&self) -> &[ForestNode] {
        &self.nodes
    }

    /// Number of merge events.
    pub fn num_merges(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn is_trivial(&self) -> bool {
        self.levels.len() == 1
    }

    pub fn leaves(&self) -> &Partition {
        &self.levels[0]
    }

    pub fn roots(&self) -> &Partition {
        self.levels.last().expect("nonempty")
    }

    pub fn leaf_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.is_leaf()).map(|(i, _)| i)
    }

    pub fn root_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.parent.is_none()).map(|(i, _)| i)
    }

    pub fn node_of(&self, b: &Block) -> Option<usize> {
        self.nodes.iter().position(|n| &n.block == b)
    }

    /// Signature of the `i`-th merge event (levels `i → i+1`).
    pub fn signature(&self, i: usize) -> MergerSignature {
        merger_signature(&self.levels[i], &self.levels[i + 1]).expect("validated")
    }

    /// Nodes created by the `i`-th merge event (born at level `i+1`).
    pub fn nodes_born_at(&self, level: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, n)| n.birth == level && level > 0).map(|(i, _)| i)
    }

    /// Drop label `l` everywhere and remove levels that become duplicates.
    pub fn restrict_without(&self, l: Label) -> Option<Forest> {
        let mut levels: Vec<Partition> = Vec::new();
        for p in &self.levels {
            let q = p.without(l)?;
            if levels.last() != Some(&q) {
                levels.push(q);
            }
        }
        Forest::new(levels).ok()
    }
}

impl fmt::Display for Forest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, " > ")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// All forests with leaves `p` that stop at the first partition satisfying
/// `absorbing`. Fails when `p` has more than `bound` blocks.
pub fn enumerate_forests<F>(p: &Partition, absorbing: F, bound: usize) -> Result<Vec<Forest>>
where
    F: Fn(&Partition) -> bool,
{
    if p.len() > bound {
        return Err(Error::EnumerationBound(p.len(), bound));
    }
    fn rec<F: Fn(&Partition) -> bool>(chain: &mut Vec<Partition>, absorbing: &F, out: &mut Vec<Forest>) {
        let cur = chain.last().expect("nonempty").clone();
        if absorbing(&cur) {
            out.push(Forest::new(chain.clone()).expect("coarsening chain"));
            return;
        }
        for q in enumerate_coarsenings(&cur) {
            chain.push(q);
            rec(chain, absorbing, out);
            chain.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut vec![p.clone()], &absorbing, &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtensionClass {
    MultipleMerge,
    BinaryMerge,
    SimultaneousBinary,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Extension {
    pub class: ExtensionClass,
    /// Partner node `u⊕` merging binary with the new leaf.
    pub partner: Option<Block>,
    /// Parent `w⊕` of the merged node `u⊕ ∪ v⊕`, if it is not a root.
    pub parent: Option<Block>,
}

/// How `g` extends `f` by the extra leaf `new_leaf`.
pub fn classify_extension(f: &Forest, g: &Forest, new_leaf: Label) -> Result<Extension> {
    if !g.leaves().blocks().contains(&Block::singleton(new_leaf)) {
        return Err(Error::NotAnExtension(format!("{new_leaf} is not a leaf of g")));
    }
    match g.restrict_without(new_leaf) {
        Some(r) if &r == f => {}
        _ => return Err(Error::NotAnExtension(format!("{g} restricted is not {f}"))),
    }
    let v = g.node_of(&Block::singleton(new_leaf)).expect("leaf node");
    let parent = g.nodes()[v]
        .parent
        .ok_or_else(|| Error::NotAnExtension(format!("leaf {new_leaf} never merges in {g}")))?;
    let siblings: Vec<usize> = g.nodes()[parent].children.iter().copied().filter(|&c| c != v).collect();
    if siblings.len() >= 2 {
        return Ok(Extension {
            class: ExtensionClass::MultipleMerge,
            partner: None,
            parent: None,
        });
    }
    let u = siblings[0];
    let level = g.nodes()[v].death.expect("merged leaf");
    let event_groups = g.signature(level - 1).num_groups();
    let class = if event_groups == 1 {
        ExtensionClass::BinaryMerge
    } else {
        ExtensionClass::SimultaneousBinary
    };
    Ok(Extension {
        class,
        partner: Some(g.nodes()[u].block.clone()),
        parent: g.nodes()[parent].parent.map(|w| g.nodes()[w].block.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn part(blocks: &[&[Label]]) -> Partition {
        Partition::new(blocks.iter().map(|b| b.to_vec()).collect()).unwrap()
    }

    #[test]
    fn coarsenings_of_three_singletons() {
        let c = enumerate_coarsenings(&Partition::singletons(3));
        let shown: Vec<String> = c.iter().map(|p| p.to_string()).collect();
        assert_eq!(shown, ["{1}{2,3}", "{1,2}{3}", "{1,3}{2}", "{1,2,3}"]);
    }

    #[test]
    fn coarsenings_count_is_bell_minus_one() {
        let bell = [1usize, 1, 2, 5, 15, 52, 203];
        for n in 1..=6 {
            assert_eq!(enumerate_coarsenings(&Partition::singletons(n)).len(), bell[n] - 1);
        }
    }

    #[test]
    fn coarsenings_of_single_block_empty() {
        assert!(enumerate_coarsenings(&part(&[&[1, 2, 3]])).is_empty());
    }

    #[test]
    fn signature_examples() {
        let p = Partition::singletons(4);
        let q = part(&[&[1, 2], &[3, 4]]);
        assert_eq!(merger_signature(&p, &q).unwrap().groups(), &[2, 2]);
        let q = part(&[&[1, 2, 3], &[4]]);
        assert_eq!(merger_signature(&p, &q).unwrap().groups(), &[3]);
        assert!(merger_signature(&q, &p).is_err());
        assert!(merger_signature(&p, &p).is_err());
    }

    #[test]
    fn count_merger_examples() {
        let s = |v: Vec<u32>| MergerSignature::new(v).unwrap();
        assert_eq!(count_mergers(4, &s(vec![2, 2])), 3);
        assert_eq!(count_mergers(5, &s(vec![3])), 10);
        assert_eq!(count_mergers(6, &s(vec![2, 2, 2])), 15);
        assert_eq!(count_mergers(7, &s(vec![3, 2])), 210);
        assert_eq!(count_mergers(3, &s(vec![4])), 0);
    }

    #[test]
    fn counts_sum_to_number_of_coarsenings() {
        for n in 2..=7 {
            let total: u128 = MergerSignature::all(n).iter().map(|s| count_mergers(n, s)).sum();
            assert_eq!(total as usize, enumerate_coarsenings(&Partition::singletons(n)).len());
        }
    }

    #[test]
    fn forests_of_three_leaves() {
        let fs = enumerate_forests(&Partition::singletons(3), |p| p.len() == 1, FOREST_BOUND).unwrap();
        assert_eq!(fs.len(), 4);
        assert!(enumerate_forests(&Partition::singletons(7), |p| p.len() == 1, FOREST_BOUND).is_err());
    }

    #[test]
    fn forest_counts_and_uniqueness() {
        // labelled ranked forests ending in one block: 1, 1, 4, 32, 436
        let expected = [1usize, 1, 4, 32, 436];
        for n in 1..=5 {
            let fs = enumerate_forests(&Partition::singletons(n), |p| p.len() == 1, FOREST_BOUND).unwrap();
            assert_eq!(fs.len(), expected[n - 1], "n = {n}");
            let set: HashSet<_> = fs.iter().cloned().collect();
            assert_eq!(set.len(), fs.len());
        }
    }

    #[test]
    fn forest_structure_of_fig_like_tree() {
        let f = Forest::new(vec![
            Partition::singletons(5),
            part(&[&[1, 2], &[3], &[4], &[5]]),
            part(&[&[1, 2], &[3, 4, 5]]),
            part(&[&[1, 2, 3, 4, 5]]),
        ])
        .unwrap();
        assert_eq!(f.nodes().len(), 8);
        // seven branches: every node except the root has a parent
        assert_eq!(f.nodes().iter().filter(|n| n.parent.is_some()).count(), 7);
        let root = f.root_nodes().next().unwrap();
        assert_eq!(f.nodes()[root].children.len(), 2);
    }

    #[test]
    fn extension_classes() {
        let cherry = Forest::new(vec![part(&[&[1], &[2]]), part(&[&[1, 2]])]).unwrap();
        let triple = Forest::new(vec![Partition::singletons(3), part(&[&[1, 2, 3]])]).unwrap();
        let e = classify_extension(&cherry, &triple, 3).unwrap();
        assert_eq!(e.class, ExtensionClass::MultipleMerge);

        let comb = Forest::new(vec![Partition::singletons(3), part(&[&[1, 3], &[2]]), part(&[&[1, 2, 3]])]).unwrap();
        let e = classify_extension(&cherry, &comb, 3).unwrap();
        assert_eq!(e.class, ExtensionClass::BinaryMerge);
        assert_eq!(e.partner, Some(Block::singleton(1)));
        assert_eq!(e.parent, Some(Block::new(vec![1, 2, 3])));

        let four = Forest::new(vec![
            Partition::singletons(4),
            part(&[&[1, 2], &[3], &[4]]),
            part(&[&[1, 2, 3, 4]]),
        ])
        .unwrap();
        let sim = Forest::new(vec![Partition::singletons(5), part(&[&[1, 2], &[3], &[4, 5]]), part(&[&[1, 2, 3, 4, 5]])]).unwrap();
        let e = classify_extension(&four, &sim, 5).unwrap();
        assert_eq!(e.class, ExtensionClass::SimultaneousBinary);
        assert_eq!(e.partner, Some(Block::singleton(4)));
        assert_eq!(e.parent, Some(Block::new(vec![1, 2, 3, 4, 5])));

        let other = Forest::trivial(part(&[&[1], &[2]]));
        assert!(classify_extension(&other, &comb, 3).is_err());
        assert!(classify_extension(&cherry, &cherry, 2).is_err());
    }

    #[test]
    fn arbitrary_label_sets() {
        let p = part(&[&[9], &[3], &[4]]);
        assert_eq!(p.to_string(), "{3}{4}{9}");
        let fs = enumerate_forests(&p, |q| q.len() == 1, FOREST_BOUND).unwrap();
        assert_eq!(fs.len(), 4);
    }

    proptest! {
        #[test]
        fn every_enumerated_transition_has_a_signature(n in 1usize..=5) {
            let fs = enumerate_forests(&Partition::singletons(n), |p| p.len() == 1, FOREST_BOUND).unwrap();
            for f in &fs {
                for i in 0..f.num_merges() {
                    let s = merger_signature(&f.levels()[i], &f.levels()[i + 1]).unwrap();
                    prop_assert_eq!(s.lineages_after(f.levels()[i].len()), f.levels()[i + 1].len());
                }
            }
        }

        #[test]
        fn restriction_round_trip(n in 2usize..=4) {
            let small = enumerate_forests(&Partition::singletons(n), |p| p.len() == 1, FOREST_BOUND).unwrap();
            let big = enumerate_forests(&Partition::singletons(n + 1), |p| p.len() == 1, FOREST_BOUND).unwrap();
            let new = (n + 1) as Label;
            for g in &big {
                let r = g.restrict_without(new).unwrap();
                prop_assert!(small.contains(&r));
                if let Ok(e) = classify_extension(&r, g, new) {
                    prop_assert!(e.class != ExtensionClass::MultipleMerge || e.partner.is_none());
                }
            }
        }

        #[test]
        fn merge_groups_preserves_ground_set(n in 2usize..8, seed in 0u64..1000) {
            let p = Partition::singletons(n);
            let i = (seed as usize) % n;
            let j = (i + 1 + (seed as usize / 7) % (n - 1)) % n;
            let q = p.merge_groups(&[vec![i, j]]).unwrap();
            prop_assert_eq!(q.ground_set(), p.ground_set());
            prop_assert_eq!(q.len(), n - 1);
        }
    }
}
