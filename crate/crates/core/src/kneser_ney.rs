//! Unpruned interpolated modified Kneser-Ney character n-gram model.
//!
//! Contexts live in a trie keyed by the context read right to left, so the
//! node for `abc` hangs below `c` then `bc`. A single walk down the trie
//! therefore yields the nodes of every suffix of a query context. Each node
//! keeps its successor counts: raw counts at the top order, continuation
//! counts (distinct left extensions) below it.
//!
//! Persisted format:
//!
//! ```text
//! magic       8 bytes  "CLABKNM1"
//! header_len  u64 LE
//! header      JSON (order, vocabulary, hash, discounts, record counts)
//! edges       sorted (parent u32, char u32, child u32) LE
//! raw counts  sorted (node u32, char u32, count u32) LE
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Id, Vocabulary};
use crate::error::{Error, Result};
use crate::records::{Evaluation, PredictionRecord};

const MAGIC: &[u8; 8] = b"CLABKNM1";

/// Absolute discount used when counts-of-counts are degenerate.
pub const FALLBACK_DISCOUNT: f64 = 0.5;

/// Lower clamp on estimated discounts. A zero discount would leave no mass
/// for lower orders and give unseen characters probability 0.
pub const DISCOUNT_FLOOR: f64 = 1e-3;

/// Discounts for one context length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discounts {
    pub d1: f64,
    pub d2: f64,
    pub d3plus: f64,
    /// True when the fallback discount was used.
    pub fallback: bool,
}

impl Discounts {
    /// Estimates from counts-of-counts `n[k-1]` = number of entries with
    /// count exactly `k`, for `k = 1..=4`.
    pub fn estimate(n: [u64; 4]) -> Self {
        let [n1, n2, n3, n4] = n.map(|v| v as f64);
        if n1 == 0.0 || n2 == 0.0 || n3 == 0.0 {
            return Discounts {
                d1: FALLBACK_DISCOUNT,
                d2: FALLBACK_DISCOUNT,
                d3plus: FALLBACK_DISCOUNT,
                fallback: true,
            };
        }
        let y = n1 / (n1 + 2.0 * n2);
        Discounts {
            d1: (1.0 - 2.0 * y * n2 / n1).clamp(DISCOUNT_FLOOR, 1.0),
            d2: (2.0 - 3.0 * y * n3 / n2).clamp(DISCOUNT_FLOOR, 2.0),
            d3plus: (3.0 - 4.0 * y * n4 / n3).clamp(DISCOUNT_FLOOR, 3.0),
            fallback: false,
        }
    }

    pub fn for_count(&self, count: u32) -> f64 {
        match count {
            0 => 0.0,
            1 => self.d1,
            2 => self.d2,
            _ => self.d3plus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    depth: u32,
    /// `(char, count)` sorted by char; counts are raw at the top order and
    /// continuation counts below.
    succ: Vec<(Id, u32)>,
    total: u64,
    /// Successors with count 1, 2 and ≥ 3.
    classes: [u32; 3],
}

impl Node {
    fn count(&self, c: Id) -> u32 {
        self.succ
            .binary_search_by_key(&c, |&(id, _)| id)
            .map_or(0, |i| self.succ[i].1)
    }

    fn gamma(&self, d: &Discounts) -> f64 {
        let [a, b, c] = self.classes.map(f64::from);
        (d.d1 * a + d.d2 * b + d.d3plus * c) / self.total as f64
    }
}

/// Fitted model. Immutable after [`NgramModel::fit`]; queries take `&self`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: Vocabulary,
    nodes: Vec<Node>,
    children: HashMap<(u32, Id), u32>,
    /// Raw occurrence counts at every depth, kept for persistence.
    raw: HashMap<(u32, Id), u32>,
    /// Indexed by context length `0..=order`.
    discounts: Vec<Discounts>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    order: usize,
    vocab: String,
    vocab_hash: String,
    discounts: Vec<Discounts>,
    nodes: usize,
    edges: usize,
    raw_counts: usize,
}

impl NgramModel {
    /// Counts every window of `train` with context length `n`.
    pub fn fit(train: &[Id], n: usize, vocab: &Vocabulary) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "n-gram context length must be at least 1".into(),
            ));
        }
        if train.len() <= n {
            return Err(Error::InvalidArgument(format!(
                "training stream of {} characters is too short for context length {n}",
                train.len()
            )));
        }
        vocab.check_ids(train)?;

        let mut depths = vec![0u32];
        let mut children: HashMap<(u32, Id), u32> = HashMap::new();
        let mut raw: HashMap<(u32, Id), u32> = HashMap::new();
        for t in 0..train.len() {
            let c = train[t];
            let mut node = 0u32;
            *raw.entry((node, c)).or_insert(0) += 1;
            for d in 1..=n.min(t) {
                let next = depths.len() as u32;
                node = *children.entry((node, train[t - d])).or_insert_with(|| {
                    depths.push(d as u32);
                    next
                });
                *raw.entry((node, c)).or_insert(0) += 1;
            }
        }
        Self::assemble(n, vocab.clone(), depths, children, raw)
    }

    /// Derives per-node successor tables and discounts from the trie and raw
    /// counts.
    fn assemble(
        order: usize,
        vocab: Vocabulary,
        depths: Vec<u32>,
        children: HashMap<(u32, Id), u32>,
        raw: HashMap<(u32, Id), u32>,
    ) -> Result<Self> {
        let mut parent = vec![u32::MAX; depths.len()];
        for (&(p, _), &ch) in &children {
            parent[ch as usize] = p;
        }
        // continuation count of (ctx, c): distinct x such that x·ctx·c occurs
        let mut cont: HashMap<(u32, Id), u32> = HashMap::new();
        for &(node, c) in raw.keys() {
            let p = parent[node as usize];
            if p != u32::MAX {
                *cont.entry((p, c)).or_insert(0) += 1;
            }
        }
        let mut succ: Vec<Vec<(Id, u32)>> = vec![Vec::new(); depths.len()];
        for (&(node, c), &count) in &raw {
            if depths[node as usize] as usize == order {
                succ[node as usize].push((c, count));
            }
        }
        for (&(node, c), &count) in &cont {
            succ[node as usize].push((c, count));
        }

        let mut coc = vec![[0u64; 4]; order + 1];
        let nodes: Vec<Node> = depths
            .iter()
            .zip(succ)
            .map(|(&depth, mut s)| {
                s.sort_unstable();
                let mut classes = [0u32; 3];
                let mut total = 0u64;
                for &(_, count) in &s {
                    total += u64::from(count);
                    classes[(count.min(3) - 1) as usize] += 1;
                    if count <= 4 {
                        coc[depth as usize][count as usize - 1] += 1;
                    }
                }
                Node {
                    depth,
                    succ: s,
                    total,
                    classes,
                }
            })
            .collect();
        let discounts: Vec<Discounts> = coc
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let d = Discounts::estimate(n);
                if d.fallback {
                    warn!(
                        "degenerate counts-of-counts {n:?} at context length {j}; using discount {FALLBACK_DISCOUNT}"
                    );
                }
                d
            })
            .collect();
        Ok(NgramModel {
            order,
            vocab,
            nodes,
            children,
            raw,
            discounts,
        })
    }

    /// Context length `n`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Discounts indexed by context length.
    pub fn discounts(&self) -> &[Discounts] {
        &self.discounts
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes for the suffixes of `context` of length 0, 1, ... up to the
    /// longest one seen in training (capped at the order).
    fn suffix_nodes(&self, context: &[Id]) -> Vec<u32> {
        let mut out = vec![0u32];
        let mut node = 0u32;
        for &c in context.iter().rev().take(self.order) {
            match self.children.get(&(node, c)) {
                Some(&ch) => {
                    node = ch;
                    out.push(ch);
                }
                None => break,
            }
        }
        out
    }

    fn check_context(&self, context: &[Id]) -> Result<()> {
        let k = self.vocab.len();
        match context.iter().find(|&&c| c as usize >= k) {
            Some(&c) => Err(Error::IdOutOfRange {
                id: c as usize,
                size: k,
            }),
            None => Ok(()),
        }
    }

    /// `p(c | context)`. Only the last `order` ids of `context` matter.
    pub fn prob(&self, context: &[Id], c: Id) -> Result<f64> {
        self.check_context(context)?;
        self.check_context(&[c])?;
        let mut p = 1.0 / self.vocab.len() as f64;
        for node in self.suffix_nodes(context) {
            let node = &self.nodes[node as usize];
            if node.total == 0 {
                continue;
            }
            let d = &self.discounts[node.depth as usize];
            let count = node.count(c);
            let head = (f64::from(count) - d.for_count(count)).max(0.0) / node.total as f64;
            p = head + node.gamma(d) * p;
        }
        Ok(p)
    }

    /// Full next-character distribution after `context`.
    pub fn distribution(&self, context: &[Id]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let k = self.vocab.len();
        let mut p = vec![1.0 / k as f64; k];
        for node in self.suffix_nodes(context) {
            let node = &self.nodes[node as usize];
            if node.total == 0 {
                continue;
            }
            let d = &self.discounts[node.depth as usize];
            let g = node.gamma(d);
            let total = node.total as f64;
            p.iter_mut().for_each(|v| *v *= g);
            for &(c, count) in &node.succ {
                p[c as usize] += (f64::from(count) - d.for_count(count)).max(0.0) / total;
            }
        }
        Ok(p)
    }

    /// Scores positions `1..stream.len()`, each with the preceding
    /// `min(order, t)` characters as context.
    pub fn evaluate_stream(&self, stream: &[Id]) -> Result<Evaluation> {
        if stream.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "evaluation stream needs at least 2 characters, got {}",
                stream.len()
            )));
        }
        self.check_context(stream)?;
        let mut records = Vec::with_capacity(stream.len() - 1);
        let mut total = 0.0;
        for t in 1..stream.len() {
            let ctx = &stream[t.saturating_sub(self.order)..t];
            let p = self.prob(ctx, stream[t])?;
            total -= p.ln();
            records.push(PredictionRecord {
                position: t,
                target: stream[t],
                p_target: p,
            });
        }
        Ok(Evaluation {
            mean_loss: total / records.len() as f64,
            records,
            distributions: None,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut edges: Vec<(u32, Id, u32)> = self.children.iter().map(|(&(p, c), &ch)| (p, c, ch)).collect();
        edges.sort_unstable();
        let mut raw: Vec<(u32, Id, u32)> = self.raw.iter().map(|(&(n, c), &v)| (n, c, v)).collect();
        raw.sort_unstable();
        let header = Header {
            format: 1,
            order: self.order,
            vocab: self.vocab.as_string(),
            vocab_hash: self.vocab.hash(),
            discounts: self.discounts.clone(),
            nodes: self.nodes.len(),
            edges: edges.len(),
            raw_counts: raw.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 12 * (edges.len() + raw.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (a, b, c) in edges.into_iter().chain(raw) {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "n-gram model",
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let vocab = Vocabulary::from_id_order(&header.vocab)?;
        if vocab.hash() != header.vocab_hash {
            return Err(bad("vocabulary hash mismatch".into()));
        }
        let records = &body[len..];
        if records.len() != 12 * (header.edges + header.raw_counts) {
            return Err(bad("record section length does not match header".into()));
        }
        let triples: Vec<(u32, u32, u32)> = records
            .chunks_exact(12)
            .map(|r| {
                let w = |i: usize| u32::from_le_bytes(r[i..i + 4].try_into().expect("4 bytes"));
                (w(0), w(4), w(8))
            })
            .collect();
        let (edges, raw) = triples.split_at(header.edges);

        let mut depths = vec![u32::MAX; header.nodes];
        if header.nodes == 0 {
            return Err(bad("model has no root".into()));
        }
        depths[0] = 0;
        let mut children = HashMap::with_capacity(edges.len());
        // parents always precede children in id order, so a sorted pass
        // assigns depths top-down
        let mut by_child: Vec<(u32, u32, u32)> = edges.to_vec();
        by_child.sort_unstable_by_key(|&(_, _, ch)| ch);
        for &(p, c, ch) in &by_child {
            if p as usize >= header.nodes || ch as usize >= header.nodes || p >= ch || depths[p as usize] == u32::MAX {
                return Err(bad(format!("bad edge {p} -{c}-> {ch}")));
            }
            depths[ch as usize] = depths[p as usize] + 1;
            children.insert((p, c), ch);
        }
        if depths.iter().any(|&d| d == u32::MAX || d as usize > header.order) {
            return Err(bad("trie is not connected or exceeds the order".into()));
        }
        let k = vocab.len() as u32;
        let mut raw_map = HashMap::with_capacity(raw.len());
        for &(n, c, v) in raw {
            if n as usize >= header.nodes || c >= k || v == 0 {
                return Err(bad(format!("bad count record ({n}, {c}, {v})")));
            }
            raw_map.insert((n, c), v);
        }
        let model = Self::assemble(header.order, vocab, depths, children, raw_map)?;
        if model.discounts != header.discounts {
            return Err(bad("stored discounts disagree with counts".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
