//! Random directed graphs, exact shortest-path oracles and pair datasets.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Array;
use crate::{io_err, seeded, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphKind {
    Dense,
    Sparse,
    SparseBlock,
}

impl GraphKind {
    pub fn tag(self) -> &'static str {
        match self {
            GraphKind::Dense => "dense",
            GraphKind::Sparse => "sparse",
            GraphKind::SparseBlock => "sparse-block",
        }
    }
}

pub const SPARSE_RESEEDS: usize = 100;
pub const BLOCKS: usize = 4;

/// Unit-weight directed graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    adj: Vec<Vec<usize>>,
}

impl DirectedGraph {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Invalid(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a == b {
                return Err(Error::Invalid(format!("self-loop at {a}")));
            }
            adj[a].push(b);
        }
        for out in &mut adj {
            out.sort_unstable();
            out.dedup();
        }
        Ok(DirectedGraph { n, adj })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adj.iter().enumerate().flat_map(|(a, out)| out.iter().map(move |&b| (a, b))).collect()
    }
}

fn erdos_renyi(n: usize, rng: &mut crate::Rng, p: impl Fn(usize, usize) -> f64) -> DirectedGraph {
    let mut adj = vec![Vec::new(); n];
    for (a, out) in adj.iter_mut().enumerate() {
        for b in 0..n {
            if a != b && rng.random::<f64>() < p(a, b) {
                out.push(b);
            }
        }
    }
    DirectedGraph { n, adj }
}

/// Block of node `v` when `n` nodes are cut into [`BLOCKS`] equal blocks.
pub fn block_of(v: usize, n: usize) -> usize {
    (v * BLOCKS / n).min(BLOCKS - 1)
}

/// Draw a graph of the given kind. `sparse` redraws up to
/// [`SPARSE_RESEEDS`] times until strongly connected, otherwise keeps the
/// draw with the largest strongly connected component.
pub fn generate_graph(kind: GraphKind, n: usize, seed: u64) -> Result<DirectedGraph> {
    if n < 2 {
        return Err(Error::Invalid(format!("a graph needs at least 2 nodes, got {n}")));
    }
    let mut rng = seeded(seed);
    let nf = n as f64;
    Ok(match kind {
        GraphKind::Dense => erdos_renyi(n, &mut rng, |_, _| 0.1),
        GraphKind::Sparse => {
            let mut best: Option<(usize, DirectedGraph)> = None;
            for _ in 0..SPARSE_RESEEDS {
                let g = erdos_renyi(n, &mut rng, |_, _| 2.0 / nf);
                let size = all_pairs_distances(&g).largest_scc();
                if size == n {
                    return Ok(g);
                }
                if best.as_ref().is_none_or(|(s, _)| size > *s) {
                    best = Some((size, g));
                }
            }
            best.expect("at least one draw").1
        }
        GraphKind::SparseBlock => {
            if n < 2 * BLOCKS {
                return Err(Error::Invalid(format!(
                    "{BLOCKS} blocks need at least {} nodes, got {n}",
                    2 * BLOCKS
                )));
            }
            erdos_renyi(n, &mut rng, |a, b| {
                if block_of(a, n) == block_of(b, n) {
                    4.0 / nf
                } else {
                    0.5 / (nf * nf)
                }
            })
        }
    })
}

/// Exact all-pairs quasimetric; unreachable pairs are `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceOracle {
    n: usize,
    d: Vec<f64>,
}

impl DistanceOracle {
    pub fn from_matrix(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Invalid(format!("{} entries for {n} nodes", d.len())));
        }
        Ok(DistanceOracle { n, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.d[x * self.n + y]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.d
    }

    pub fn all_finite(&self) -> bool {
        self.d.iter().all(|v| v.is_finite())
    }

    /// Size of the largest strongly connected component.
    pub fn largest_scc(&self) -> usize {
        (0..self.n)
            .map(|v| (0..self.n).filter(|&u| self.get(v, u).is_finite() && self.get(u, v).is_finite()).count())
            .max()
            .unwrap_or(0)
    }

    /// Largest `d(x,z) − d(x,y) − d(y,z)` over all triples (∞-aware; 0 when
    /// the triangle inequality holds everywhere).
    pub fn max_triangle_violation(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for x in 0..n {
            for y in 0..n {
                let xy = self.get(x, y);
                if xy.is_infinite() {
                    continue;
                }
                for z in 0..n {
                    let (xz, yz) = (self.get(x, z), self.get(y, z));
                    if yz.is_infinite() {
                        continue;
                    }
                    let v = if xz.is_infinite() { f64::INFINITY } else { xz - xy - yz };
                    worst = worst.max(v);
                }
            }
        }
        worst
    }
}

/// Breadth-first search from every node.
pub fn all_pairs_distances(g: &DirectedGraph) -> DistanceOracle {
    let n = g.n();
    let mut d = vec![f64::INFINITY; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for s in 0..n {
        let row = &mut d[s * n..(s + 1) * n];
        row[s] = 0.0;
        queue.clear();
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            let next = row[v] + 1.0;
            for &w in g.successors(v) {
                if row[w].is_infinite() {
                    row[w] = next;
                    queue.push_back(w);
                }
            }
        }
    }
    DistanceOracle { n, d }
}

/// `γ^d` with `γ^∞ = 0`.
pub fn discount(gamma: f64, d: f64) -> f64 {
    if d.is_infinite() {
        0.0
    } else {
        gamma.powf(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub src: usize,
    pub dst: usize,
    pub dist: f64,
    pub target: f64,
}

/// All ordered pairs split uniformly at random into train and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub n: usize,
    pub gamma: f64,
    pub features: Array,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
}

/// Seeded standard-normal node features, `[n, dim]`.
pub fn node_features(n: usize, dim: usize, seed: u64) -> Array {
    let mut rng = seeded(seed);
    let data = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Array::matrix(n, dim, data).expect("sized")
}

pub fn build_dataset(
    oracle: &DistanceOracle,
    feature_dim: usize,
    fraction: f64,
    gamma: f64,
    seed: u64,
) -> Result<PairDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("train fraction {fraction} outside (0, 1)")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Invalid(format!("discount {gamma} outside (0, 1)")));
    }
    let n = oracle.n();
    let total = n * n;
    let n_train = (fraction * total as f64).round() as usize;
    if n_train == 0 || n_train == total {
        return Err(Error::Invalid(format!("fraction {fraction} of {total} pairs leaves an empty split")));
    }
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let pair = |i: usize| {
        let (src, dst) = (i / n, i % n);
        let dist = oracle.get(src, dst);
        Pair { src, dst, dist, target: discount(gamma, dist) }
    };
    let train = order[..n_train].iter().map(|&i| pair(i)).collect();
    let val = order[n_train..].iter().map(|&i| pair(i)).collect();
    let features = node_features(n, feature_dim, seed.wrapping_add(0x9e37_79b9));
    Ok(PairDataset { n, gamma, features, train, val })
}

const MAGIC: &[u8; 4] = b"QGR1";

/// Graph and oracle as little-endian `u32`s: magic, n, edge count, edges,
/// then the n² distances with `u32::MAX` for ∞.
pub fn save_graph(path: &Path, g: &DirectedGraph, oracle: &DistanceOracle) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let edges = g.edges();
    buf.extend_from_slice(&(g.n() as u32).to_le_bytes());
    buf.extend_from_slice(&(edges.len() as u32).to_le_bytes());
    for (a, b) in edges {
        buf.extend_from_slice(&(a as u32).to_le_bytes());
        buf.extend_from_slice(&(b as u32).to_le_bytes());
    }
    for &d in oracle.matrix() {
        let v = if d.is_infinite() { u32::MAX } else { d as u32 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_graph(path: &Path) -> Result<(DirectedGraph, DistanceOracle)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = || Error::Invalid(format!("{}: not a graph file", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad());
    }
    let words: Vec<u32> =
        bytes[4..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let (n, m) = (words[0] as usize, words[1] as usize);
    if words.len() != 2 + 2 * m + n * n {
        return Err(bad());
    }
    let edges: Vec<(usize, usize)> =
        (0..m).map(|i| (words[2 + 2 * i] as usize, words[3 + 2 * i] as usize)).collect();
    let d = words[2 + 2 * m..]
        .iter()
        .map(|&v| if v == u32::MAX { f64::INFINITY } else { v as f64 })
        .collect();
    Ok((DirectedGraph::new(n, &edges)?, DistanceOracle::from_matrix(n, d)?))
}

/// `source,target,d,discounted`, with `inf` for unreachable pairs.
pub fn write_pairs_csv(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "source,target,d,discounted")?;
        for p in pairs {
            writeln!(f, "{},{},{},{}", p.src, p.dst, p.dist, p.target)?;
        }
        f.flush()
    };
    write().map_err(io_err(path))
}
