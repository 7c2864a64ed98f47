//! HNSW graph over 8-bit quantized vectors with inner-product similarity.
//!
//! Vectors are stored quantized; a dequantized copy is kept in memory so that
//! every similarity is `dot(q, dequantize(v))` evaluated the same way as the
//! exact oracle. Queries are never quantized.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::quantize::QuantizedVector;
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::retriever::dot;

pub const DEFAULT_M: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
pub const DEFAULT_EF_SEARCH: usize = 128;

const MAGIC: &[u8] = b"KGIANN1";
const NO_ENTRY: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            ef_construction: DEFAULT_EF_CONSTRUCTION,
            seed: 0,
        }
    }
}

/// Heap entry; higher similarity first, then lower node id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f64,
    node: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .total_cmp(&other.sim)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited {
    marks: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![0; n],
            epoch: 0,
        }
    }

    fn reset(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
    }

    /// Marks `node`, returning false if it was already marked.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.marks[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    dim: usize,
    params: HnswParams,
    ids: Vec<String>,
    quantized: Vec<QuantizedVector>,
    /// Row-major dequantized vectors.
    vectors: Vec<f64>,
    /// links[node][layer] for layer in 0..=level(node).
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

impl HnswIndex {
    /// Quantizes `vectors` and inserts them in order. `ids[i]` names vector i.
    pub fn build(ids: Vec<String>, vectors: &[Vec<f64>], params: HnswParams) -> Result<Self> {
        if params.m < 2 {
            return Err(Error::invalid(format!("HNSW M must be >= 2, got {}", params.m)));
        }
        if params.ef_construction == 0 {
            return Err(Error::invalid("ef_construction must be >= 1"));
        }
        if ids.len() != vectors.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(Error::invalid(format!(
                "dimension mismatch: vector {i} has {} entries, expected {dim}",
                v.len()
            )));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vectors must be finite"));
        }

        let quantized: Vec<QuantizedVector> =
            vectors.iter().map(|v| QuantizedVector::quantize(v)).collect();
        let mut flat = Vec::with_capacity(dim * vectors.len());
        for q in &quantized {
            flat.extend(q.dequantize());
        }

        let level_mult = 1.0 / (params.m as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let levels: Vec<usize> = (0..vectors.len())
            .map(|_| {
                let u: f64 = 1.0 - rng.gen::<f64>();
                (-u.ln() * level_mult).floor() as usize
            })
            .collect();

        let mut index = Self {
            dim,
            params,
            ids,
            quantized,
            vectors: flat,
            links: levels.iter().map(|&l| vec![Vec::new(); l + 1]).collect(),
            entry: None,
        };
        let mut visited = Visited::new(vectors.len());
        for node in 0..vectors.len() as u32 {
            index.insert(node, &mut visited);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn entry_point(&self) -> Option<usize> {
        self.entry.map(|e| e as usize)
    }

    pub fn passage_id(&self, node: usize) -> &str {
        &self.ids[node]
    }

    pub fn quantized(&self, node: usize) -> &QuantizedVector {
        &self.quantized[node]
    }

    /// Dequantized stored vector of `node`.
    pub fn vector(&self, node: usize) -> &[f64] {
        &self.vectors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn level(&self, node: usize) -> usize {
        self.links[node].len() - 1
    }

    pub fn neighbors(&self, node: usize, layer: usize) -> &[u32] {
        self.links[node].get(layer).map_or(&[], Vec::as_slice)
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn sim(&self, q: &[f64], node: u32) -> f64 {
        dot(q, self.vector(node as usize))
    }

    fn greedy_closest(&self, q: &[f64], mut cur: u32, layer: usize) -> u32 {
        let mut best = self.sim(q, cur);
        loop {
            let mut moved = false;
            for &nb in self.neighbors(cur as usize, layer) {
                let s = self.sim(q, nb);
                if s > best || (s == best && nb < cur) {
                    best = s;
                    cur = nb;
                    moved = true;
                }
            }
            if !moved {
                return cur;
            }
        }
    }

    /// Best-first search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        q: &[f64],
        entry_points: &[u32],
        ef: usize,
        layer: usize,
        visited: &mut Visited,
    ) -> Vec<Cand> {
        visited.reset();
        let mut candidates = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
        for &ep in entry_points {
            if visited.insert(ep) {
                let c = Cand {
                    sim: self.sim(q, ep),
                    node: ep,
                };
                candidates.push(c);
                results.push(std::cmp::Reverse(c));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0);
            if let Some(w) = worst {
                if results.len() >= ef && c < w {
                    break;
                }
            }
            for &nb in self.neighbors(c.node as usize, layer) {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand {
                    sim: self.sim(q, nb),
                    node: nb,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|w| cand > w.0);
                if admit {
                    candidates.push(cand);
                    results.push(std::cmp::Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Diversity heuristic: keep a candidate only if it is more similar to the
    /// base than to every neighbor kept so far. `sorted` is best first.
    fn select_neighbors(&self, sorted: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        for c in sorted {
            if kept.len() >= m {
                break;
            }
            let cv = self.vector(c.node as usize);
            if kept.iter().all(|&r| self.sim(cv, r) <= c.sim) {
                kept.push(c.node);
            }
        }
        kept
    }

    fn insert(&mut self, node: u32, visited: &mut Visited) {
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let level = self.level(node as usize);
        let top = self.level(entry as usize);
        let q = self.vector(node as usize).to_vec();

        let mut ep = entry;
        for layer in (level + 1..=top).rev() {
            ep = self.greedy_closest(&q, ep, layer);
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &eps, self.params.ef_construction, layer, visited);
            // new nodes fill layer 0 up to 2M as well, which lifts recall in high dimensions
            let chosen = self.select_neighbors(&found, self.max_links(layer));
            for &nb in &chosen {
                self.link(nb, node, layer);
            }
            self.links[node as usize][layer] = chosen;
            eps = found.iter().map(|c| c.node).collect();
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    /// Adds `to` to `from`'s list on `layer`, shrinking the list if it overflows.
    fn link(&mut self, from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        self.links[from as usize][layer].push(to);
        if self.links[from as usize][layer].len() <= cap {
            return;
        }
        let base = self.vector(from as usize);
        let mut cands: Vec<Cand> = self.links[from as usize][layer]
            .iter()
            .map(|&n| Cand {
                sim: dot(base, self.vector(n as usize)),
                node: n,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, cap);
        self.links[from as usize][layer] = kept;
    }

    /// Approximate top-`k` by inner product, ties by passage id. `ef_search`
    /// is raised to `k` when smaller; `k >= len()` ranks every vector.
    pub fn search(&self, q: &[f64], k: usize, ef_search: usize) -> Result<Vec<(String, f64)>> {
        Ok(self.named(self.search_nodes(q, k, ef_search)?))
    }

    /// Like [`search`](Self::search) but returns node numbers.
    pub fn search_nodes(&self, q: &[f64], k: usize, ef_search: usize) -> Result<Vec<(usize, f64)>> {
        if q.len() != self.dim && !self.is_empty() {
            return Err(Error::invalid(format!(
                "query has {} dims, index has {}",
                q.len(),
                self.dim
            )));
        }
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        if k == 0 {
            return Ok(Vec::new());
        }
        if k >= self.len() {
            return Ok(self.exact_nodes(q, k));
        }
        let mut ep = entry;
        for layer in (1..=self.level(entry as usize)).rev() {
            ep = self.greedy_closest(q, ep, layer);
        }
        let mut visited = Visited::new(self.len());
        let found = self.search_layer(q, &[ep], ef_search.max(k), 0, &mut visited);
        let mut hits: Vec<(usize, f64)> = found.into_iter().map(|c| (c.node as usize, c.sim)).collect();
        self.rank(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Exact top-`k` over the dequantized vectors.
    pub fn exact_search(&self, q: &[f64], k: usize) -> Vec<(String, f64)> {
        self.named(self.exact_nodes(q, k))
    }

    pub fn exact_nodes(&self, q: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, dot(q, self.vector(i)))).collect();
        self.rank(&mut all);
        all.truncate(k);
        all
    }

    fn rank(&self, hits: &mut [(usize, f64)]) {
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
    }

    fn named(&self, hits: Vec<(usize, f64)>) -> Vec<(String, f64)> {
        hits.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect()
    }

    /// Structural invariants: valid endpoints, no self loops or duplicates,
    /// monotone layer membership, and bounded neighbor lists.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        let n = self.len();
        match self.entry {
            None if n == 0 => return Ok(()),
            None => return Err("non-empty index without entry point".into()),
            Some(e) if e as usize >= n => return Err(format!("entry point {e} out of range")),
            Some(e) => {
                let top = self.level(e as usize);
                if let Some(i) = (0..n).find(|&i| self.level(i) > top) {
                    return Err(format!("node {i} is above the entry point's level {top}"));
                }
            }
        }
        for (i, layers) in self.links.iter().enumerate() {
            for (layer, list) in layers.iter().enumerate() {
                if list.len() > self.max_links(layer) {
                    return Err(format!("node {i} layer {layer} has {} links", list.len()));
                }
                let mut seen = list.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != list.len() {
                    return Err(format!("node {i} layer {layer} has duplicate links"));
                }
                for &nb in list {
                    if nb as usize >= n {
                        return Err(format!("node {i} links to missing node {nb}"));
                    }
                    if nb as usize == i {
                        return Err(format!("node {i} links to itself"));
                    }
                    if self.level(nb as usize) < layer {
                        return Err(format!(
                            "node {i} links on layer {layer} to node {nb} of level {}",
                            self.level(nb as usize)
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(MAGIC)?;
        w.usize(self.dim)?;
        w.usize(self.len())?;
        w.usize(self.params.m)?;
        w.usize(self.params.ef_construction)?;
        w.u64(self.params.seed)?;
        for q in &self.quantized {
            w.f64(q.offset)?;
            w.f64(q.scale)?;
        }
        for q in &self.quantized {
            w.bytes(&q.codes)?;
        }
        for layers in &self.links {
            w.u32(layers.len() as u32)?;
            for list in layers {
                w.u32(list.len() as u32)?;
                for &nb in list {
                    w.u32(nb)?;
                }
            }
        }
        w.u64(self.entry.map_or(NO_ENTRY, |e| e as u64))?;
        for id in &self.ids {
            w.str(id)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r);
        r.expect_magic(MAGIC)?;
        let dim = r.len(1 << 20)?;
        let n = r.len(u32::MAX as usize)?;
        let m = r.len(1 << 16)?;
        let ef_construction = r.len(usize::MAX)?;
        let seed = r.u64()?;
        let mut tables = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            tables.push((r.f64()?, r.f64()?));
        }
        let mut quantized = Vec::with_capacity(n.min(1 << 20));
        for (offset, scale) in tables {
            quantized.push(QuantizedVector {
                codes: r.bytes(dim)?,
                scale,
                offset,
            });
        }
        let mut links = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let n_layers = r.u32()? as usize;
            if n_layers == 0 || n_layers > 64 {
                return Err(Error::Format(format!("bad layer count {n_layers}")));
            }
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let len = r.u32()? as usize;
                let mut list = Vec::with_capacity(len.min(1 << 12));
                for _ in 0..len {
                    list.push(r.u32()?);
                }
                layers.push(list);
            }
            links.push(layers);
        }
        let entry = match r.u64()? {
            NO_ENTRY => None,
            e => Some(u32::try_from(e).map_err(|_| Error::Format("entry point overflow".into()))?),
        };
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            ids.push(r.str()?);
        }
        r.finish()?;
        let mut vectors = Vec::with_capacity(n * dim);
        for q in &quantized {
            vectors.extend(q.dequantize());
        }
        let index = Self {
            dim,
            params: HnswParams {
                m,
                ef_construction,
                seed,
            },
            ids,
            quantized,
            vectors,
            links,
            entry,
        };
        index.check_structure().map_err(Error::Format)?;
        Ok(index)
    }
}

/// Exact top-`k` by inner product; ties by ascending index.
pub fn brute_force(vectors: &[Vec<f64>], q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = vectors.iter().map(|v| dot(q, v)).enumerate().collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:05}")).collect()
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    #[test]
    fn single_vector() {
        let idx = HnswIndex::build(ids(1), &[vec![0.5, -0.5]], HnswParams::default()).unwrap();
        assert_eq!(idx.entry_point(), Some(0));
        let hits = idx.search(&[1.0, 0.0], 3, 10).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "p00000");
    }

    #[test]
    fn empty_and_k_zero() {
        let idx = HnswIndex::build(vec![], &[], HnswParams::default()).unwrap();
        assert!(idx.search(&[], 5, 10).unwrap().is_empty());
        let vs = random_unit(10, 4, 1);
        let idx = HnswIndex::build(ids(10), &vs, HnswParams::default()).unwrap();
        assert!(idx.search(&vs[0], 0, 10).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        let err = HnswIndex::build(ids(2), &[vec![1.0, 2.0], vec![1.0]], HnswParams::default());
        assert!(matches!(err, Err(Error::InvalidInput(m)) if m.contains("dimension")));
        let p = HnswParams {
            m: 1,
            ..HnswParams::default()
        };
        assert!(HnswIndex::build(ids(1), &[vec![1.0]], p).is_err());
    }

    #[test]
    fn small_index_is_exact() {
        let vs = random_unit(150, 8, 2);
        let idx = HnswIndex::build(ids(150), &vs, HnswParams::default()).unwrap();
        idx.check_structure().unwrap();
        for q in random_unit(20, 8, 3) {
            let approx = idx.search(&q, 10, 200).unwrap();
            assert_eq!(approx, idx.exact_search(&q, 10));
        }
    }

    #[test]
    fn self_query_ranks_first() {
        let vs = random_unit(500, 16, 4);
        let idx = HnswIndex::build(ids(500), &vs, HnswParams::default()).unwrap();
        for i in [0, 17, 250, 499] {
            let hits = idx.search(&vs[i], 5, 128).unwrap();
            assert_eq!(hits[0].0, idx.passage_id(i));
        }
    }

    #[test]
    fn scores_are_true_inner_products() {
        let vs = random_unit(300, 12, 5);
        let idx = HnswIndex::build(ids(300), &vs, HnswParams::default()).unwrap();
        let q = &random_unit(1, 12, 6)[0];
        for (id, s) in idx.search(q, 20, 64).unwrap() {
            let node: usize = id[1..].parse().unwrap();
            assert_eq!(s, dot(q, &idx.quantized(node).dequantize()));
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let vs = random_unit(400, 8, 7);
        let a = HnswIndex::build(ids(400), &vs, HnswParams::default()).unwrap();
        let b = HnswIndex::build(ids(400), &vs, HnswParams::default()).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"KGIANN1"));
        let back = HnswIndex::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, a);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn brute_force_fixture() {
        // inner products with q = (1, 2): 2, -1, 4, 4, 0
        let vs = vec![
            vec![2.0, 0.0],
            vec![1.0, -1.0],
            vec![0.0, 2.0],
            vec![2.0, 1.0],
            vec![0.0, 0.0],
        ];
        let got = brute_force(&vs, &[1.0, 2.0], 5);
        let order: Vec<usize> = got.iter().map(|h| h.0).collect();
        assert_eq!(order, [2, 3, 0, 4, 1]);
        assert_eq!(got[0].1, 4.0);

        let orth = brute_force(&vs[..1], &[0.0, 1.0], 3);
        assert_eq!(orth, vec![(0, 0.0)]);
    }
}
