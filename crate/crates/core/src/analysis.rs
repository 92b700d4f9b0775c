//! Post-hoc measurements over trained models and their prediction records:
//! gate saturation, cell-trace rendering and probes, model agreement, error
//! overlap, per-character advantage, the closing-brace case study and KL
//! training dynamics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::{forward_window, CellKind, Gate, Params, StepState, StepTrace};
use crate::corpus::{Id, Vocabulary};
use crate::error::{Error, Result};
use crate::records::{Distributions, PredictionRecord, PROB_FLOOR};

/// Runs `stream` through the model with batch size 1, carrying state across
/// `chunk`-sized windows, and returns the activations at every timestep.
pub fn capture_trace(params: &Params, stream: &[Id], chunk: usize) -> Result<StepTrace> {
    if stream.is_empty() {
        return Err(Error::Empty("trace stream"));
    }
    if chunk == 0 {
        return Err(Error::InvalidArgument("trace chunk must be positive".into()));
    }
    let mut state = vec![StepState::zeros(&params.spec)];
    let mut trace = StepTrace::default();
    for window in stream.chunks(chunk) {
        let mut out = forward_window(params, &[window.to_vec()], &state, true, None)?;
        let tr = out.traces.take().and_then(|mut t| t.pop()).unwrap_or_default();
        trace.extend(tr);
        state = out.state;
    }
    Ok(trace)
}

// ---------------------------------------------------------------- saturation

/// Saturation thresholds: left below `lo`, right above `hi`.
pub const SATURATION_THRESHOLDS: (f64, f64) = (0.1, 0.9);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSaturation {
    pub layer: usize,
    pub gate: String,
    pub unit: usize,
    pub frac_left: f64,
    pub frac_right: f64,
}

/// Fractions of `values` strictly below `lo` and strictly above `hi`.
pub fn saturation_fractions(values: &[f64], (lo, hi): (f64, f64)) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let left = values.iter().filter(|&&v| v < lo).count() as f64;
    let right = values.iter().filter(|&&v| v > hi).count() as f64;
    (left / n, right / n)
}

/// Per-unit saturation of every sigmoid gate in `trace`.
pub fn saturation_from_trace(trace: &StepTrace, kind: CellKind, thresholds: (f64, f64)) -> Result<Vec<UnitSaturation>> {
    let gates = Gate::sigmoid_gates(kind);
    if gates.is_empty() {
        return Err(Error::InvalidArgument(format!("{kind} models have no gates")));
    }
    if thresholds.0 > thresholds.1 {
        return Err(Error::InvalidArgument(
            "saturation thresholds must satisfy lo <= hi".into(),
        ));
    }
    let mut out = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        for &g in gates {
            let Some(rows) = layer.get(g) else { continue };
            let units = rows.first().map_or(0, |r| r.len());
            for u in 0..units {
                let column: Vec<f64> = rows.iter().map(|r| r[u]).collect();
                let (frac_left, frac_right) = saturation_fractions(&column, thresholds);
                out.push(UnitSaturation {
                    layer: l,
                    gate: g.as_str().to_string(),
                    unit: u,
                    frac_left,
                    frac_right,
                });
            }
        }
    }
    Ok(out)
}

/// Gate saturation over one pass of `stream`. LSTM and GRU only.
pub fn gate_saturation(params: &Params, stream: &[Id], thresholds: (f64, f64)) -> Result<Vec<UnitSaturation>> {
    let kind = params.spec.kind;
    if Gate::sigmoid_gates(kind).is_empty() {
        return Err(Error::InvalidArgument(format!("{kind} models have no gates")));
    }
    let trace = capture_trace(params, stream, 100)?;
    saturation_from_trace(&trace, kind, thresholds)
}

/// Columns `layer,gate,unit,frac_left,frac_right`; doubles as scatter data.
pub fn write_saturation_csv(path: &Path, rows: &[UnitSaturation]) -> Result<()> {
    write_rows(path, rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------- cell traces

/// Per-character values displayed for `(layer, unit)`: `tanh(c)` for LSTM,
/// `h` for RNN and GRU.
pub fn cell_values(params: &Params, stream: &[Id], layer: usize, unit: usize) -> Result<Vec<f64>> {
    let spec = params.spec;
    if !spec.kind.is_recurrent() {
        return Err(Error::InvalidArgument("cell traces need a recurrent model".into()));
    }
    if layer >= spec.layers || unit >= spec.hidden {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} unit {unit} outside a {}x{} model",
            spec.layers, spec.hidden
        )));
    }
    let trace = capture_trace(params, stream, 100)?;
    let (gate, squash) = if spec.kind == CellKind::Lstm {
        (Gate::Cell, true)
    } else {
        (Gate::Hidden, false)
    };
    let rows = trace.layers[layer]
        .get(gate)
        .ok_or_else(|| Error::InvalidArgument(format!("trace lacks {}", gate.as_str())))?;
    Ok(rows
        .iter()
        .map(|r| if squash { r[unit].tanh() } else { r[unit] })
        .collect())
}

/// Background colour for a value in `[-1, 1]`: red at −1, white at 0, blue
/// at +1, linear in between.
pub fn trace_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let fade = |a: f64| (255.0 * (1.0 - a)).round() as u8;
    if v < 0.0 {
        [255, fade(-v), fade(-v)]
    } else {
        [fade(v), fade(v), 255]
    }
}

/// Inverse of [`trace_color`] up to quantization.
pub fn color_value([r, g, b]: [u8; 3]) -> f64 {
    if r < 255 {
        1.0 - f64::from(r.min(g)) / 255.0
    } else if b < 255 {
        -(1.0 - f64::from(b.min(g)) / 255.0)
    } else {
        0.0
    }
}

fn escape_char(c: char, out: &mut String) {
    match c {
        '&' => out.push_str("&amp;"),
        '<' => out.push_str("&lt;"),
        '>' => out.push_str("&gt;"),
        '"' => out.push_str("&quot;"),
        '\'' => out.push_str("&#39;"),
        c => out.push(c),
    }
}

/// Standalone HTML page with one coloured span per character. Newlines stay
/// inside a `<pre>` so line structure is preserved.
pub fn render_trace_html(text: &[char], values: &[f64], title: &str) -> Result<String> {
    if text.len() != values.len() {
        return Err(Error::shape("render_trace_html values", text.len(), values.len()));
    }
    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>");
    title.chars().for_each(|c| escape_char(c, &mut html));
    html.push_str("</title></head><body>\n<pre style=\"font-family:monospace\">");
    for (&c, &v) in text.iter().zip(values) {
        let [r, g, b] = trace_color(v);
        write!(html, "<span style=\"background-color:#{r:02x}{g:02x}{b:02x}\">").expect("string write");
        escape_char(c, &mut html);
        html.push_str("</span>");
    }
    html.push_str("</pre>\n</body></html>\n");
    Ok(html)
}

/// Recovers `(char, value)` pairs from a document produced by
/// [`render_trace_html`].
pub fn parse_trace_html(html: &str) -> Result<Vec<(char, f64)>> {
    const OPEN: &str = "<span style=\"background-color:#";
    let bad = |reason: &str| Error::Format {
        kind: "trace html",
        reason: reason.to_string(),
    };
    let mut out = Vec::new();
    let mut rest = html;
    while let Some(i) = rest.find(OPEN) {
        rest = &rest[i + OPEN.len()..];
        let hex = rest.get(..6).ok_or_else(|| bad("truncated colour"))?;
        let byte = |k: usize| u8::from_str_radix(&hex[2 * k..2 * k + 2], 16).map_err(|_| bad("bad colour"));
        let rgb = [byte(0)?, byte(1)?, byte(2)?];
        rest = rest.get(8..).ok_or_else(|| bad("truncated span"))?;
        let end = rest.find("</span>").ok_or_else(|| bad("unterminated span"))?;
        let body = &rest[..end];
        let c = match body {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&#39;" => '\'',
            s => {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => c,
                    _ => return Err(bad("span must hold one character")),
                }
            }
        };
        out.push((c, color_value(rgb)));
        rest = &rest[end..];
    }
    Ok(out)
}

// ------------------------------------------------------------------ probes

/// Deterministic text scanners used as correlation targets. They are
/// analysis labels, not ground truth:
///
/// * `inside_quote`: toggles on every `"` not preceded by an odd run of
///   backslashes; the value at a quote is the state after it.
/// * `line_position`: 0-based column of the character within its line.
/// * `inside_parens`: nesting depth of `(` after the character, floored at 0.
/// * `indent_depth`: count of leading spaces and tabs on the character's line.
/// * `inside_comment`: 1 on characters of `/* ... */` and `// ...` comments,
///   delimiters included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    InsideQuote,
    LinePosition,
    InsideParens,
    IndentDepth,
    InsideComment,
}

impl Probe {
    pub const ALL: [Probe; 5] = [
        Probe::InsideQuote,
        Probe::LinePosition,
        Probe::InsideParens,
        Probe::IndentDepth,
        Probe::InsideComment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Probe::InsideQuote => "inside_quote",
            Probe::LinePosition => "line_position",
            Probe::InsideParens => "inside_parens",
            Probe::IndentDepth => "indent_depth",
            Probe::InsideComment => "inside_comment",
        }
    }

    pub fn signal(self, text: &[char]) -> Vec<f64> {
        match self {
            Probe::InsideQuote => {
                let mut inside = false;
                let mut backslashes = 0usize;
                text.iter()
                    .map(|&c| {
                        if c == '"' && backslashes.is_multiple_of(2) {
                            inside = !inside;
                        }
                        backslashes = if c == '\\' { backslashes + 1 } else { 0 };
                        f64::from(u8::from(inside))
                    })
                    .collect()
            }
            Probe::LinePosition => {
                let mut col = 0usize;
                text.iter()
                    .map(|&c| {
                        let v = col as f64;
                        col = if c == '\n' { 0 } else { col + 1 };
                        v
                    })
                    .collect()
            }
            Probe::InsideParens => {
                let mut depth = 0i64;
                text.iter()
                    .map(|&c| {
                        match c {
                            '(' => depth += 1,
                            ')' => depth = (depth - 1).max(0),
                            _ => {}
                        }
                        depth as f64
                    })
                    .collect()
            }
            Probe::IndentDepth => {
                let mut out = Vec::with_capacity(text.len());
                for line in text.split_inclusive(|&c| c == '\n') {
                    let indent = line.iter().take_while(|&&c| c == ' ' || c == '\t').count() as f64;
                    out.extend(std::iter::repeat_n(indent, line.len()));
                }
                out
            }
            Probe::InsideComment => {
                let mut out = vec![0.0; text.len()];
                let mut t = 0;
                while t < text.len() {
                    let next = text.get(t + 1).copied();
                    if text[t] == '/' && next == Some('*') {
                        let mut e = t + 2;
                        while e < text.len() && !(text[e] == '/' && text[e - 1] == '*' && e >= t + 3) {
                            e += 1;
                        }
                        let stop = e.min(text.len() - 1);
                        out[t..=stop].iter_mut().for_each(|v| *v = 1.0);
                        t = stop + 1;
                    } else if text[t] == '/' && next == Some('/') {
                        let mut e = t;
                        while e < text.len() && text[e] != '\n' {
                            out[e] = 1.0;
                            e += 1;
                        }
                        t = e;
                    } else {
                        t += 1;
                    }
                }
                out
            }
        }
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe {s:?}")))
    }
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub layer: usize,
    pub unit: usize,
    pub correlation: f64,
}

/// Ranks `(layer, unit, values)` by |correlation| with `signal`, descending;
/// ties keep input order. Constant units are skipped.
pub fn rank_units(units: &[(usize, usize, Vec<f64>)], signal: &[f64], top_k: usize) -> Result<Vec<CellScore>> {
    if signal.len() < 2 || signal.iter().all(|&v| v == signal[0]) {
        return Err(Error::InvalidArgument(
            "probe signal is constant; correlation undefined".into(),
        ));
    }
    let mut scores = Vec::new();
    for (layer, unit, values) in units {
        if values.len() != signal.len() {
            return Err(Error::shape("rank_units values", signal.len(), values.len()));
        }
        if let Some(r) = pearson(values, signal) {
            scores.push(CellScore {
                layer: *layer,
                unit: *unit,
                correlation: r,
            });
        }
    }
    scores.sort_by(|a, b| b.correlation.abs().total_cmp(&a.correlation.abs()));
    scores.truncate(top_k);
    Ok(scores)
}

/// Units of a recurrent model whose `tanh(c)` (LSTM) or `h` tracks `probe`
/// over `text`.
pub fn find_interpretable_cells(
    params: &Params,
    vocab: &Vocabulary,
    text: &str,
    probe: Probe,
    top_k: usize,
) -> Result<Vec<CellScore>> {
    let spec = params.spec;
    if !spec.kind.is_recurrent() {
        return Err(Error::InvalidArgument("cell probes need a recurrent model".into()));
    }
    let chars: Vec<char> = text.chars().collect();
    let signal = probe.signal(&chars);
    let ids = vocab.encode(text)?;
    let trace = capture_trace(params, &ids, 100)?;
    let (gate, squash) = if spec.kind == CellKind::Lstm {
        (Gate::Cell, true)
    } else {
        (Gate::Hidden, false)
    };
    let mut units = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        let rows = layer
            .get(gate)
            .ok_or_else(|| Error::InvalidArgument(format!("trace lacks {}", gate.as_str())))?;
        for u in 0..spec.hidden {
            let v = rows.iter().map(|r| if squash { r[u].tanh() } else { r[u] }).collect();
            units.push((l, u, v));
        }
    }
    rank_units(&units, &signal, top_k)
}

// --------------------------------------------------------------- agreement

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub models: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Pairwise fraction of positions where two models share the argmax.
pub fn agreement(models: &[(String, &Distributions)]) -> Result<AgreementMatrix> {
    let Some((_, first)) = models.first() else {
        return Err(Error::Empty("agreement models"));
    };
    if first.is_empty() {
        return Err(Error::Empty("agreement distributions"));
    }
    for (name, d) in models {
        if d.positions != first.positions {
            return Err(Error::Mismatch(format!("{name} was evaluated on different positions")));
        }
    }
    let argmaxes: Vec<Vec<usize>> = models
        .iter()
        .map(|(_, d)| d.probs.iter().map(|p| argmax(p)).collect())
        .collect();
    let m = models.len();
    let n = first.len() as f64;
    let mut values = vec![vec![1.0; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let same = argmaxes[a].iter().zip(&argmaxes[b]).filter(|(x, y)| x == y).count() as f64 / n;
            values[a][b] = same;
            values[b][a] = same;
        }
    }
    Ok(AgreementMatrix {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

/// Square CSV with a `model` column followed by one column per model.
pub fn write_agreement_csv(path: &Path, m: &AgreementMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["model".to_string()];
    header.extend(m.models.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.models.iter().zip(&m.values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------------ errors

pub const ERROR_THRESHOLD: f64 = 0.5;

/// Positions whose target probability is strictly below `threshold`.
pub fn error_set(records: &[PredictionRecord], threshold: f64) -> BTreeSet<usize> {
    records
        .iter()
        .filter(|r| r.p_target < threshold)
        .map(|r| r.position)
        .collect()
}

/// Venn counts of three error sets. Region keys join the member names with
/// `+`, listed in input order; `none` counts positions in no set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorOverlap {
    pub models: [String; 3],
    pub regions: BTreeMap<String, usize>,
    pub none: usize,
    pub total: usize,
}

pub fn error_overlap(sets: [(&str, &BTreeSet<usize>); 3], total: usize) -> ErrorOverlap {
    let mut regions: BTreeMap<String, usize> = BTreeMap::new();
    for mask in 1u8..8 {
        let key = (0..3)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| sets[i].0)
            .collect::<Vec<_>>()
            .join("+");
        regions.insert(key, 0);
    }
    let union: BTreeSet<usize> = sets.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    for p in &union {
        let members: Vec<&str> = sets.iter().filter(|(_, s)| s.contains(p)).map(|(n, _)| *n).collect();
        *regions.get_mut(&members.join("+")).expect("all regions present") += 1;
    }
    ErrorOverlap {
        models: sets.map(|(n, _)| n.to_string()),
        regions,
        none: total.saturating_sub(union.len()),
        total,
    }
}

// --------------------------------------------------------------- advantage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharMeans {
    pub id: Id,
    pub ch: String,
    pub count: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a − mean_b`.
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    /// Every character seen as a target, by id.
    pub chars: Vec<CharMeans>,
    /// Largest positive differences (model a better), descending.
    pub top_a: Vec<CharMeans>,
    /// Largest negative differences (model b better), most negative first.
    pub top_b: Vec<CharMeans>,
    /// Characters never seen as a target.
    pub absent: Vec<String>,
}

/// Mean target probability per character for two models on one stream.
pub fn char_advantage(
    a: &[PredictionRecord],
    b: &[PredictionRecord],
    vocab: &Vocabulary,
    top_k: usize,
) -> Result<AdvantageReport> {
    if a.len() != b.len()
        || a.iter()
            .zip(b)
            .any(|(x, y)| x.position != y.position || x.target != y.target)
    {
        return Err(Error::Mismatch("advantage records cover different positions".into()));
    }
    let k = vocab.len();
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); k];
    for (x, y) in a.iter().zip(b) {
        let s = sums.get_mut(x.target as usize).ok_or(Error::IdOutOfRange {
            id: x.target as usize,
            size: k,
        })?;
        s.0 += 1;
        s.1 += x.p_target;
        s.2 += y.p_target;
    }
    let label = |id: usize| vocab.char(id as Id).map_or(String::new(), |c| c.to_string());
    let mut chars = Vec::new();
    let mut absent = Vec::new();
    for (id, &(count, sa, sb)) in sums.iter().enumerate() {
        if count == 0 {
            absent.push(label(id));
            continue;
        }
        let (mean_a, mean_b) = (sa / count as f64, sb / count as f64);
        chars.push(CharMeans {
            id: id as Id,
            ch: label(id),
            count,
            mean_a,
            mean_b,
            diff: mean_a - mean_b,
        });
    }
    let mut by_diff = chars.clone();
    by_diff.sort_by(|x, y| y.diff.total_cmp(&x.diff).then(x.id.cmp(&y.id)));
    let top_a = by_diff.iter().filter(|c| c.diff > 0.0).take(top_k).cloned().collect();
    let top_b = by_diff
        .iter()
        .rev()
        .filter(|c| c.diff < 0.0)
        .take(top_k)
        .cloned()
        .collect();
    Ok(AdvantageReport {
        chars,
        top_a,
        top_b,
        absent,
    })
}

/// Columns `id,ch,count,mean_a,mean_b,diff`.
pub fn write_advantage_csv(path: &Path, report: &AdvantageReport) -> Result<()> {
    write_rows(path, &report.chars)
}

// ------------------------------------------------------------------ braces

/// Matches `{`/`}` with a pushdown scan. Returns `(open, close)` pairs in
/// order of the closer and the number of unmatched closers.
pub fn match_braces(text: &[char]) -> (Vec<(usize, usize)>, usize) {
    let mut stack = Vec::new();
    let mut pairs = Vec::new();
    let mut unmatched = 0;
    for (i, &c) in text.iter().enumerate() {
        match c {
            '{' => stack.push(i),
            '}' => match stack.pop() {
                Some(o) => pairs.push((o, i)),
                None => unmatched += 1,
            },
            _ => {}
        }
    }
    (pairs, unmatched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BraceBucket {
    /// Inclusive distance range.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    /// Mean probability of `}` per model, `None` for empty buckets.
    pub mean_p: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BraceReport {
    pub models: Vec<String>,
    pub buckets: Vec<BraceBucket>,
    pub unmatched_closers: usize,
    /// Matched pairs farther apart than the last bucket.
    pub beyond_max: usize,
}

fn record_at(records: &[PredictionRecord], position: usize) -> Option<&PredictionRecord> {
    records
        .binary_search_by_key(&position, |r| r.position)
        .ok()
        .map(|i| &records[i])
}

/// Buckets closing braces by distance to their opener (`[1, w]`,
/// `[w+1, 2w]`, ... up to `max_distance`) and averages each model's
/// probability of the `}`.
pub fn brace_distance(
    models: &[(String, &[PredictionRecord])],
    text: &[char],
    bucket_width: usize,
    max_distance: usize,
) -> Result<BraceReport> {
    if bucket_width == 0 || max_distance < bucket_width {
        return Err(Error::InvalidArgument("need 0 < bucket_width <= max_distance".into()));
    }
    let nb = max_distance.div_ceil(bucket_width);
    let mut sums = vec![vec![0.0; models.len()]; nb];
    let mut counts = vec![0usize; nb];
    let (pairs, unmatched) = match_braces(text);
    let mut beyond = 0;
    for (o, c) in pairs {
        let dist = c - o;
        if dist > max_distance {
            beyond += 1;
            continue;
        }
        let b = (dist - 1) / bucket_width;
        let ps: Option<Vec<f64>> = models
            .iter()
            .map(|(_, r)| record_at(r, c).map(|r| r.p_target))
            .collect();
        let ps = ps.ok_or_else(|| Error::Mismatch(format!("no prediction record for position {c}")))?;
        counts[b] += 1;
        for (s, p) in sums[b].iter_mut().zip(ps) {
            *s += p;
        }
    }
    let buckets = (0..nb)
        .map(|b| BraceBucket {
            lo: b * bucket_width + 1,
            hi: ((b + 1) * bucket_width).min(max_distance),
            count: counts[b],
            mean_p: sums[b]
                .iter()
                .map(|s| (counts[b] > 0).then(|| s / counts[b] as f64))
                .collect(),
        })
        .collect();
    Ok(BraceReport {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        buckets,
        unmatched_closers: unmatched,
        beyond_max: beyond,
    })
}

/// Columns `lo,hi,count` then one mean column per model.
pub fn write_brace_csv(path: &Path, report: &BraceReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["lo".to_string(), "hi".into(), "count".into()];
    header.extend(report.models.iter().map(|m| format!("mean_p_{m}")));
    w.write_record(&header)?;
    for b in &report.buckets {
        let mut rec = vec![b.lo.to_string(), b.hi.to_string(), b.count.to_string()];
        rec.extend(b.mean_p.iter().map(|m| m.map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------- KL

/// `KL(p‖q)` with both sides floored at [`PROB_FLOOR`] inside the log.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    0.5 * (kl(p, q) + kl(q, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    /// Index into the checkpoint series.
    pub checkpoint: usize,
    pub label: String,
    pub baseline: String,
    pub symmetric_kl: f64,
    /// Baseline loss minus checkpoint loss; positive when the checkpoint is
    /// better.
    pub delta_loss: f64,
}

fn dist_loss(d: &Distributions, stream: &[Id]) -> Result<f64> {
    let mut total = 0.0;
    for (&pos, p) in d.positions.iter().zip(&d.probs) {
        let t = *stream
            .get(pos)
            .ok_or_else(|| Error::Mismatch(format!("position {pos} beyond the stream")))? as usize;
        let pt = *p.get(t).ok_or(Error::IdOutOfRange { id: t, size: p.len() })?;
        total -= f64::from(pt).max(PROB_FLOOR).ln();
    }
    Ok(total / d.len() as f64)
}

/// Mean symmetric KL and loss gap between each checkpoint's distributions
/// and each baseline's, over `stream`.
pub fn kl_dynamics(
    series: &[(String, &Distributions)],
    baselines: &[(String, &Distributions)],
    stream: &[Id],
) -> Result<Vec<KlPoint>> {
    let mut out = Vec::new();
    for (bname, base) in baselines {
        if base.is_empty() {
            return Err(Error::Empty("baseline distributions"));
        }
        let base_loss = dist_loss(base, stream)?;
        for (i, (label, d)) in series.iter().enumerate() {
            if d.positions != base.positions {
                return Err(Error::Mismatch(format!(
                    "{label} and {bname} cover different positions"
                )));
            }
            let mut acc = 0.0;
            for (p, q) in d.probs.iter().zip(&base.probs) {
                let p: Vec<f64> = p.iter().map(|&v| f64::from(v)).collect();
                let q: Vec<f64> = q.iter().map(|&v| f64::from(v)).collect();
                acc += symmetric_kl(&p, &q);
            }
            out.push(KlPoint {
                checkpoint: i,
                label: label.clone(),
                baseline: bname.clone(),
                symmetric_kl: acc / d.len() as f64,
                delta_loss: base_loss - dist_loss(d, stream)?,
            });
        }
    }
    Ok(out)
}

/// Columns `checkpoint,label,baseline,symmetric_kl,delta_loss`.
pub fn write_kl_csv(path: &Path, points: &[KlPoint]) -> Result<()> {
    write_rows(path, points)
}
