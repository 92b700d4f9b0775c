//! Staged error attribution. A model's errors (target probability below
//! 0.5) are peeled off by a fixed sequence of oracles, each seeing only the
//! errors that survived the previous ones:
//!
//! `ngram → memory → rare_word → word_boundary → punctuation → boost → residual`
//!
//! A word is a maximal run of alphabetic characters, with apostrophes
//! allowed between two letters. Matching is case-sensitive.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::get_general_category;

use crate::analysis::error_set;
use crate::error::{Error, Result};
use crate::records::PredictionRecord;

/// Identifies the stage order in emitted reports.
pub const PIPELINE_VERSION: &str = "ngram>memory>rare_word>word_boundary>punctuation>boost>residual/1";

/// Tolerance on `p + b >= threshold` so that e.g. `0.1 + 0.4` lands on the
/// rung despite rounding.
const BOOST_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Error threshold on the target probability (strict `<`).
    pub threshold: f64,
    /// Memory window in characters.
    pub memory_window: usize,
    /// Words seen at most this many times in training count as rare.
    pub rare_max_count: u64,
    /// Boost rungs, ascending.
    pub boost_ladder: Vec<f64>,
    /// Characters after which an error counts as a word-boundary error.
    pub boundary_chars: Vec<char>,
    /// Added to the Unicode `P*` categories.
    pub extra_punctuation: Vec<char>,
    pub examples_per_stage: usize,
    /// Characters of left context shown with each example.
    pub example_context: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            threshold: 0.5,
            memory_window: 5000,
            rare_max_count: 5,
            boost_ladder: vec![0.1, 0.2, 0.3, 0.4],
            boundary_chars: vec![' ', '"', '\'', '\n'],
            extra_punctuation: vec!['(', ')', '[', ']', '{', '}', '<', '>'],
            examples_per_stage: 5,
            example_context: 40,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        if self.boost_ladder.windows(2).any(|w| w[1] <= w[0]) || self.boost_ladder.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidArgument(
                "boost ladder must be positive and ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn is_punctuation(&self, c: char) -> bool {
        get_general_category(c).abbreviation().starts_with('P') || self.extra_punctuation.contains(&c)
    }
}

// ------------------------------------------------------------------ words

/// Maximal alphabetic runs (apostrophes allowed between letters) as
/// half-open `[start, end)` char ranges.
pub fn word_spans(text: &[char]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if !text[i].is_alphabetic() {
            i += 1;
            continue;
        }
        let start = i;
        while i < text.len()
            && (text[i].is_alphabetic()
                || (text[i] == '\''
                    && i + 1 < text.len()
                    && text[i + 1].is_alphabetic()
                    && text[i - 1].is_alphabetic()))
        {
            i += 1;
        }
        spans.push((start, i));
    }
    spans
}

/// For every character, the index of the word span containing it.
fn word_index(text: &[char], spans: &[(usize, usize)]) -> Vec<Option<usize>> {
    let mut idx = vec![None; text.len()];
    for (w, &(s, e)) in spans.iter().enumerate() {
        idx[s..e].iter_mut().for_each(|v| *v = Some(w));
    }
    idx
}

/// Occurrence counts of every word in `text`.
pub fn word_counts(text: &[char]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for (s, e) in word_spans(text) {
        *counts.entry(text[s..e].iter().collect()).or_insert(0) += 1;
    }
    counts
}

// ---------------------------------------------------------------- oracles

/// Errors on which some n-gram model puts strictly more than `threshold` on
/// the target.
pub fn ngram_oracle(
    errors: &BTreeSet<usize>,
    ngram_records: &[&[PredictionRecord]],
    threshold: f64,
) -> Result<BTreeSet<usize>> {
    if ngram_records.is_empty() {
        return Err(Error::Empty("n-gram records"));
    }
    let maps: Vec<HashMap<usize, f64>> = ngram_records
        .iter()
        .map(|r| r.iter().map(|x| (x.position, x.p_target)).collect())
        .collect();
    let mut removed = BTreeSet::new();
    for &t in errors {
        let mut best = f64::NEG_INFINITY;
        for (i, m) in maps.iter().enumerate() {
            let p = m
                .get(&t)
                .ok_or_else(|| Error::Mismatch(format!("n-gram record set {i} lacks position {t}")))?;
            best = best.max(*p);
        }
        if best > threshold {
            removed.insert(t);
        }
    }
    Ok(removed)
}

/// Errors from the second character of a word onward, where the whole word
/// occurs in the `window` characters before the word starts.
pub fn memory_oracle(errors: &BTreeSet<usize>, text: &[char], window: usize) -> BTreeSet<usize> {
    let spans = word_spans(text);
    let idx = word_index(text, &spans);
    let mut verdict: HashMap<usize, bool> = HashMap::new();
    errors
        .iter()
        .copied()
        .filter(|&t| {
            let Some(w) = idx.get(t).copied().flatten() else {
                return false;
            };
            let (s, e) = spans[w];
            if t == s {
                return false;
            }
            *verdict.entry(w).or_insert_with(|| {
                let word = &text[s..e];
                let lo = s.saturating_sub(window);
                text[lo..s].windows(word.len()).any(|win| win == word)
            })
        })
        .collect()
}

/// Errors inside words seen at most `max_count` times in training.
pub fn rare_word_oracle(
    errors: &BTreeSet<usize>,
    text: &[char],
    train_counts: &HashMap<String, u64>,
    max_count: u64,
) -> BTreeSet<usize> {
    let spans = word_spans(text);
    let idx = word_index(text, &spans);
    errors
        .iter()
        .copied()
        .filter(|&t| {
            idx.get(t).copied().flatten().is_some_and(|w| {
                let (s, e) = spans[w];
                let word: String = text[s..e].iter().collect();
                train_counts.get(&word).copied().unwrap_or(0) <= max_count
            })
        })
        .collect()
}

/// Errors right after one of `boundary` characters.
pub fn word_boundary_oracle(errors: &BTreeSet<usize>, text: &[char], boundary: &[char]) -> BTreeSet<usize> {
    errors
        .iter()
        .copied()
        .filter(|&t| t > 0 && text.get(t - 1).is_some_and(|c| boundary.contains(c)))
        .collect()
}

/// Errors whose target character is punctuation.
pub fn punctuation_oracle(errors: &BTreeSet<usize>, text: &[char], config: &OracleConfig) -> BTreeSet<usize> {
    errors
        .iter()
        .copied()
        .filter(|&t| text.get(t).is_some_and(|&c| config.is_punctuation(c)))
        .collect()
}

/// Assigns each error to the smallest rung `b` with `p + b >= threshold`.
/// Returns one set per rung and the residual.
pub fn boost_oracle(
    errors: &BTreeSet<usize>,
    p_target: &HashMap<usize, f64>,
    ladder: &[f64],
    threshold: f64,
) -> Result<(Vec<BTreeSet<usize>>, BTreeSet<usize>)> {
    let mut rungs = vec![BTreeSet::new(); ladder.len()];
    let mut residual = BTreeSet::new();
    for &t in errors {
        let p = *p_target
            .get(&t)
            .ok_or_else(|| Error::Mismatch(format!("no record for position {t}")))?;
        match ladder.iter().position(|&b| p + b >= threshold - BOOST_EPS) {
            Some(i) => {
                rungs[i].insert(t);
            }
            None => {
                residual.insert(t);
            }
        }
    }
    Ok((rungs, residual))
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub position: usize,
    /// Text before the error.
    pub context: String,
    pub target: String,
    pub p_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// `ngram`, `memory`, `rare_word`, `word_boundary`, `punctuation`,
    /// `boost`, `residual`.
    pub stage: String,
    pub params: serde_json::Value,
    pub count: usize,
    pub fraction: f64,
    pub examples: Vec<Example>,
    #[serde(skip)]
    pub removed: BTreeSet<usize>,
}

impl StageReport {
    /// `stage` plus its parameter, e.g. `boost(0.2)`.
    pub fn label(&self) -> String {
        match &self.params {
            serde_json::Value::Null => self.stage.clone(),
            serde_json::Value::Object(m) if m.len() == 1 => {
                format!("{}({})", self.stage, m.values().next().expect("one entry"))
            }
            p => format!("{}({p})", self.stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub pipeline: String,
    pub config: OracleConfig,
    pub positions: usize,
    pub total_errors: usize,
    pub stages: Vec<StageReport>,
}

/// Inputs shared by every stage.
pub struct PipelineInputs<'a> {
    /// Records of the model under study.
    pub model: &'a [PredictionRecord],
    /// Records of the n-gram models.
    pub ngrams: Vec<&'a [PredictionRecord]>,
    /// The evaluated stream; record positions index into it.
    pub text: &'a [char],
    /// Word counts of the training split.
    pub train_counts: &'a HashMap<String, u64>,
}

fn check_stream(name: &str, records: &[PredictionRecord], reference: &[PredictionRecord], text: &[char]) -> Result<()> {
    if records.len() != reference.len()
        || records
            .iter()
            .zip(reference)
            .any(|(a, b)| a.position != b.position || a.target != b.target)
    {
        return Err(Error::Mismatch(format!("{name} records cover a different stream")));
    }
    if let Some(r) = records.last() {
        if r.position >= text.len() {
            return Err(Error::Mismatch(format!(
                "{name} position {} beyond the text",
                r.position
            )));
        }
    }
    Ok(())
}

pub fn run_pipeline(inputs: &PipelineInputs<'_>, config: &OracleConfig) -> Result<ErrorBreakdown> {
    config.validate()?;
    crate::records::validate(inputs.model)?;
    check_stream("model", inputs.model, inputs.model, inputs.text)?;
    for (i, r) in inputs.ngrams.iter().enumerate() {
        check_stream(&format!("n-gram set {i}"), r, inputs.model, inputs.text)?;
    }
    let text = inputs.text;
    let p: HashMap<usize, f64> = inputs.model.iter().map(|r| (r.position, r.p_target)).collect();
    let initial = error_set(inputs.model, config.threshold);
    let total = initial.len();
    let mut remaining = initial;
    let mut stages = Vec::new();
    let mut push =
        |stage: &str, params: serde_json::Value, removed: BTreeSet<usize>, remaining: &mut BTreeSet<usize>| {
            for t in &removed {
                remaining.remove(t);
            }
            stages.push(StageReport {
                stage: stage.to_string(),
                params,
                count: removed.len(),
                fraction: if total == 0 {
                    0.0
                } else {
                    removed.len() as f64 / total as f64
                },
                examples: examples(&removed, text, &p, config),
                removed,
            });
        };

    let r = ngram_oracle(&remaining, &inputs.ngrams, config.threshold)?;
    push(
        "ngram",
        serde_json::json!({ "models": inputs.ngrams.len() }),
        r,
        &mut remaining,
    );
    let r = memory_oracle(&remaining, text, config.memory_window);
    push(
        "memory",
        serde_json::json!({ "n": config.memory_window }),
        r,
        &mut remaining,
    );
    let r = rare_word_oracle(&remaining, text, inputs.train_counts, config.rare_max_count);
    push(
        "rare_word",
        serde_json::json!({ "t": config.rare_max_count }),
        r,
        &mut remaining,
    );
    let r = word_boundary_oracle(&remaining, text, &config.boundary_chars);
    push("word_boundary", serde_json::Value::Null, r, &mut remaining);
    let r = punctuation_oracle(&remaining, text, config);
    push("punctuation", serde_json::Value::Null, r, &mut remaining);
    let (rungs, residual) = boost_oracle(&remaining, &p, &config.boost_ladder, config.threshold)?;
    for (b, r) in config.boost_ladder.iter().zip(rungs) {
        push("boost", serde_json::json!({ "b": b }), r, &mut remaining);
    }
    push("residual", serde_json::Value::Null, residual, &mut remaining);
    debug_assert!(remaining.is_empty());

    Ok(ErrorBreakdown {
        pipeline: PIPELINE_VERSION.to_string(),
        config: config.clone(),
        positions: inputs.model.len(),
        total_errors: total,
        stages,
    })
}

fn examples(removed: &BTreeSet<usize>, text: &[char], p: &HashMap<usize, f64>, config: &OracleConfig) -> Vec<Example> {
    removed
        .iter()
        .take(config.examples_per_stage)
        .map(|&t| Example {
            position: t,
            context: text[t.saturating_sub(config.example_context)..t].iter().collect(),
            target: text[t].to_string(),
            p_target: p.get(&t).copied().unwrap_or(f64::NAN),
        })
        .collect()
}

impl ErrorBreakdown {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Pie-chart CSV: `slice,count,fraction`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slice", "count", "fraction"])?;
        for s in &self.stages {
            w.write_record([s.label(), s.count.to_string(), s.fraction.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDelta {
    pub slice: String,
    pub count_a: usize,
    pub count_b: usize,
    /// `count_a − count_b`.
    pub delta: i64,
    /// `delta / count_a`; `None` when `count_a` is 0.
    pub relative: Option<f64>,
    /// Share of the total error difference; `None` when the totals agree.
    pub share_of_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownComparison {
    pub total_a: usize,
    pub total_b: usize,
    pub total_delta: i64,
    pub stages: Vec<StageDelta>,
}

/// Per-slice differences between two breakdowns of the same stream, `a`
/// typically the smaller model.
pub fn compare_breakdowns(a: &ErrorBreakdown, b: &ErrorBreakdown) -> Result<BreakdownComparison> {
    let labels = |x: &ErrorBreakdown| x.stages.iter().map(StageReport::label).collect::<Vec<_>>();
    if labels(a) != labels(b) || a.pipeline != b.pipeline {
        return Err(Error::Mismatch("breakdowns use different oracle stages".into()));
    }
    if a.positions != b.positions {
        return Err(Error::Mismatch("breakdowns cover different streams".into()));
    }
    let total_delta = a.total_errors as i64 - b.total_errors as i64;
    let stages = a
        .stages
        .iter()
        .zip(&b.stages)
        .map(|(x, y)| {
            let delta = x.count as i64 - y.count as i64;
            StageDelta {
                slice: x.label(),
                count_a: x.count,
                count_b: y.count,
                delta,
                relative: (x.count > 0).then(|| delta as f64 / x.count as f64),
                share_of_difference: (total_delta != 0).then(|| delta as f64 / total_delta as f64),
            }
        })
        .collect();
    Ok(BreakdownComparison {
        total_a: a.total_errors,
        total_b: b.total_errors,
        total_delta,
        stages,
    })
}
