//! Helpers shared by the integration test targets: the text fixture and
//! independent reference implementations used as oracles.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::sync::OnceLock;

use charlab::corpus::Id;

/// The King James Bible plain text (about 3.3M characters), gzipped in
/// `tests/data`.
pub fn kjv() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/kjv.txt.gz");
        let file = std::fs::File::open(path).expect("fixture present");
        let mut s = String::new();
        flate2::read::GzDecoder::new(file)
            .read_to_string(&mut s)
            .expect("fixture decodes");
        s
    })
}

/// First `n` characters of `text`.
pub fn prefix(text: &str, n: usize) -> String {
    text.chars().take(n).collect()
}

/// Interpolated modified Kneser-Ney written straight from the recursion,
/// with n-gram tables keyed by the full id sequence and explicit loops over
/// the alphabet. Deliberately shares no code with the library model.
pub struct BruteKn {
    n: usize,
    k: usize,
    /// Raw occurrence counts of every m-gram, m = 1..=n+1.
    raw: HashMap<Vec<Id>, u64>,
    /// Distinct contexts of each length 0..=n that occur in the stream.
    contexts: Vec<HashSet<Vec<Id>>>,
    /// (D1, D2, D3+) per context length.
    discounts: Vec<[f64; 3]>,
}

impl BruteKn {
    pub fn new(train: &[Id], n: usize, k: usize) -> Self {
        let mut raw = HashMap::new();
        let mut contexts = vec![HashSet::new(); n + 1];
        for t in 0..train.len() {
            for d in 0..=n.min(t) {
                *raw.entry(train[t - d..=t].to_vec()).or_insert(0) += 1;
                contexts[d].insert(train[t - d..t].to_vec());
            }
        }
        let mut me = BruteKn {
            n,
            k,
            raw,
            contexts,
            discounts: Vec::new(),
        };
        for d in 0..=n {
            let mut coc = [0u64; 4];
            for ctx in &me.contexts[d] {
                for c in 0..k as Id {
                    let v = me.count(ctx, c);
                    if (1..=4).contains(&v) {
                        coc[v as usize - 1] += 1;
                    }
                }
            }
            me.discounts.push(Self::estimate(coc));
        }
        me
    }

    fn estimate([n1, n2, n3, n4]: [u64; 4]) -> [f64; 3] {
        if n1 == 0 || n2 == 0 || n3 == 0 {
            return [0.5; 3];
        }
        let (n1, n2, n3, n4) = (n1 as f64, n2 as f64, n3 as f64, n4 as f64);
        let y = n1 / (n1 + 2.0 * n2);
        let clamp = |v: f64, hi: f64| v.max(1e-3).min(hi);
        [
            clamp(1.0 - 2.0 * y * n2 / n1, 1.0),
            clamp(2.0 - 3.0 * y * n3 / n2, 2.0),
            clamp(3.0 - 4.0 * y * n4 / n3, 3.0),
        ]
    }

    fn raw_count(&self, gram: &[Id]) -> u64 {
        self.raw.get(gram).copied().unwrap_or(0)
    }

    /// Raw count at the top order, number of distinct left extensions below.
    fn count(&self, ctx: &[Id], c: Id) -> u64 {
        let mut gram = ctx.to_vec();
        gram.push(c);
        if ctx.len() == self.n {
            return self.raw_count(&gram);
        }
        let mut distinct = 0;
        for x in 0..self.k as Id {
            let mut ext = vec![x];
            ext.extend_from_slice(&gram);
            if self.raw_count(&ext) > 0 {
                distinct += 1;
            }
        }
        distinct
    }

    fn discount(&self, d: usize, count: u64) -> f64 {
        match count {
            0 => 0.0,
            1 => self.discounts[d][0],
            2 => self.discounts[d][1],
            _ => self.discounts[d][2],
        }
    }

    /// p(c | context) using the last min(n, |context|) ids.
    pub fn prob(&self, context: &[Id], c: Id) -> f64 {
        let m = self.n.min(context.len());
        self.prob_at(&context[context.len() - m..], c)
    }

    fn prob_at(&self, ctx: &[Id], c: Id) -> f64 {
        let lower = if ctx.is_empty() {
            1.0 / self.k as f64
        } else {
            self.prob_at(&ctx[1..], c)
        };
        let counts: Vec<u64> = (0..self.k as Id).map(|x| self.count(ctx, x)).collect();
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return lower;
        }
        let d = ctx.len();
        let mut gamma = 0.0;
        for &v in &counts {
            gamma += self.discount(d, v);
        }
        gamma /= total as f64;
        let own = counts[c as usize];
        let head = (own as f64 - self.discount(d, own)).max(0.0) / total as f64;
        head + gamma * lower
    }
}

/// Brace pairs found by repeatedly pairing a `{` with the next remaining
/// brace when that brace is a `}`. Quadratic, no stack.
pub fn brute_braces(text: &[char]) -> (Vec<(usize, usize)>, usize) {
    let mut live: Vec<usize> = (0..text.len()).filter(|&i| text[i] == '{' || text[i] == '}').collect();
    let mut pairs = Vec::new();
    loop {
        let hit = live.windows(2).position(|w| text[w[0]] == '{' && text[w[1]] == '}');
        match hit {
            Some(i) => {
                pairs.push((live[i], live[i + 1]));
                live.drain(i..i + 2);
            }
            None => break,
        }
    }
    pairs.sort_by_key(|&(_, close)| close);
    let unmatched = live.iter().filter(|&&i| text[i] == '}').count();
    (pairs, unmatched)
}
