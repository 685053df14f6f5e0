//! Hierarchical navigable small-world graph over the index's vector slots.
//!
//! The graph never owns vectors; every call borrows the slot-major `f32`
//! storage of the owning [`VectorIndex`](super::VectorIndex). Replaced or
//! removed entries become tombstones: still traversed, never returned.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 keeps `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    slot: u32,
    live: bool,
    links: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    dist: f64,
    node: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.node.cmp(&other.node))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Hnsw {
    params: HnswParams,
    level_mult: f64,
    nodes: Vec<Node>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
}

struct Space<'a> {
    vectors: &'a [f32],
    dim: usize,
}

impl Space<'_> {
    fn vec(&self, slot: u32) -> &[f32] {
        let s = slot as usize * self.dim;
        &self.vectors[s..s + self.dim]
    }
}

impl Hnsw {
    pub fn new(params: HnswParams) -> Self {
        let m = params.m.max(2);
        Hnsw {
            params: HnswParams { m, ..params },
            level_mult: 1.0 / (m as f64).ln(),
            nodes: Vec::new(),
            entry: None,
            max_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        }
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn slot_of(&self, node: u32) -> u32 {
        self.nodes[node as usize].slot
    }

    pub fn is_live(&self, node: u32) -> bool {
        self.nodes[node as usize].live
    }

    pub fn tombstone(&mut self, node: u32) {
        self.nodes[node as usize].live = false;
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn dist(&self, space: &Space<'_>, q: &[f32], node: u32) -> f64 {
        1.0 - dot(q, space.vec(self.nodes[node as usize].slot))
    }

    /// Inserts the vector stored at `slot` and returns its node id.
    pub fn insert(&mut self, slot: u32, vectors: &[f32], dim: usize) -> u32 {
        let space = Space { vectors, dim };
        let u: f64 = self.rng.random();
        let level = (-(1.0 - u).ln() * self.level_mult).floor() as usize;
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            slot,
            live: true,
            links: vec![Vec::new(); level + 1],
        });
        let Some(mut ep) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return id;
        };
        let q = space.vec(slot);
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.search_layer(&space, q, &[ep], 1, layer)[0].node;
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&space, q, &eps, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(&space, &found, self.params.m);
            for &nb in &chosen {
                self.link(&space, nb, id, layer);
            }
            self.nodes[id as usize].links[layer] = chosen;
            eps = found.iter().map(|s| s.node).collect();
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(id);
        }
        id
    }

    fn link(&mut self, space: &Space<'_>, from: u32, to: u32, layer: usize) {
        let cap = self.max_links(layer);
        let links = &mut self.nodes[from as usize].links[layer];
        links.push(to);
        if links.len() <= cap {
            return;
        }
        let base = space.vec(self.nodes[from as usize].slot);
        let mut cands: Vec<Scored> = self.nodes[from as usize].links[layer]
            .iter()
            .map(|&n| Scored {
                dist: self.dist(space, base, n),
                node: n,
            })
            .collect();
        cands.sort();
        let kept = self.select_neighbors(space, &cands, cap);
        self.nodes[from as usize].links[layer] = kept;
    }

    /// Diversity heuristic: keep a candidate only if it is closer to the base
    /// than to every neighbour already kept, then back-fill with the closest
    /// pruned candidates. `cands` must be sorted by distance ascending.
    fn select_neighbors(&self, space: &Space<'_>, cands: &[Scored], m: usize) -> Vec<u32> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for &c in cands {
            if kept.len() >= m {
                break;
            }
            let cv = space.vec(self.nodes[c.node as usize].slot);
            let diverse = kept.iter().all(|k| self.dist(space, cv, k.node) > c.dist);
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        for c in pruned {
            if kept.len() >= m {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|s| s.node).collect()
    }

    /// Best-first search on one layer; returns up to `ef` nodes sorted by
    /// distance ascending.
    fn search_layer(&self, space: &Space<'_>, q: &[f32], eps: &[u32], ef: usize, layer: usize) -> Vec<Scored> {
        let mut visited: HashSet<u32> = HashSet::with_capacity(ef * 8);
        let mut frontier: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::new();
        let mut best: BinaryHeap<Scored> = BinaryHeap::new();
        for &ep in eps {
            if visited.insert(ep) {
                let s = Scored {
                    dist: self.dist(space, q, ep),
                    node: ep,
                };
                frontier.push(std::cmp::Reverse(s));
                best.push(s);
            }
        }
        while best.len() > ef {
            best.pop();
        }
        while let Some(std::cmp::Reverse(cur)) = frontier.pop() {
            let worst = best.peek().map_or(f64::INFINITY, |s| s.dist);
            if cur.dist > worst && best.len() >= ef {
                break;
            }
            let Some(links) = self.nodes[cur.node as usize].links.get(layer) else {
                continue;
            };
            for &nb in links {
                if !visited.insert(nb) {
                    continue;
                }
                let d = self.dist(space, q, nb);
                let worst = best.peek().map_or(f64::INFINITY, |s| s.dist);
                if best.len() < ef || d < worst {
                    let s = Scored { dist: d, node: nb };
                    frontier.push(std::cmp::Reverse(s));
                    best.push(s);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Returns up to `ef` candidate nodes (live or not) nearest to `q`.
    pub fn search(&self, q: &[f32], ef: usize, vectors: &[f32], dim: usize) -> Vec<u32> {
        let Some(mut ep) = self.entry else {
            return Vec::new();
        };
        let space = Space { vectors, dim };
        for layer in (1..=self.max_level).rev() {
            ep = self.search_layer(&space, q, &[ep], 1, layer)[0].node;
        }
        self.search_layer(&space, q, &[ep], ef.max(1), 0)
            .into_iter()
            .map(|s| s.node)
            .collect()
    }
}
