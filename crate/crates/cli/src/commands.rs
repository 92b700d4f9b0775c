use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use charlab::analysis::{self, Probe};
use charlab::cells::{sample as sample_text, CellKind, ModelSpec};
use charlab::checkpoint::Checkpoint;
use charlab::corpus::{read_text, CorpusSplits, DatasetManifest, SplitRatios, Vocabulary};
use charlab::kneser_ney::NgramModel;
use charlab::oracles::{self, OracleConfig, PipelineInputs};
use charlab::records::{self, bootstrap_sigma, Distributions, PredictionRecord};
use charlab::trainer::{self, TrainConfig};
use charlab::{Error, Result};
use clap::Subcommand;
use serde_json::{json, Value};

use crate::data::Prepared;
use crate::run::RunDir;
use crate::{Common, TrainOpts};

pub fn train_defaults_help() -> String {
    let d = TrainConfig::default();
    let v = serde_json::to_value(&d).expect("config serializes");
    let mut s = String::from("Config keys and defaults (learning rate held for `lr_decay_after` epochs, then multiplied by `lr_decay_factor` each epoch):\n");
    if let Value::Object(m) = v {
        for (k, v) in m {
            s.push_str(&format!("  {k} = {v}\n"));
        }
    }
    s
}

fn parse_named(s: &str) -> Result<(String, PathBuf)> {
    let (n, p) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("expected NAME=PATH, got {s:?}")))?;
    Ok((n.to_string(), PathBuf::from(p)))
}

fn check_vocab(ck: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ck.vocab.hash() != vocab.hash() {
        return Err(Error::Mismatch(
            "checkpoint vocabulary differs from the dataset's".into(),
        ));
    }
    Ok(())
}

pub fn prep(common: &Common, input: &Path, ratios: &str, limit: Option<usize>) -> Result<Value> {
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("ratios {ratios:?}: {e}")))?;
    let [a, b, c] = parts[..] else {
        return Err(Error::InvalidArgument(format!(
            "ratios need three values, got {ratios:?}"
        )));
    };
    let ratios = SplitRatios::new(a, b, c);
    let mut text = read_text(input)?;
    if let Some(n) = limit {
        text = text.chars().take(n).collect();
    }
    let vocab = Vocabulary::build(&text)?;
    let splits = CorpusSplits::split(&vocab.encode(&text)?, ratios)?;
    let manifest = DatasetManifest::new(&text, &vocab, &splits);
    let mut run = RunDir::create(
        &common.out_root,
        "prep",
        json!({ "ratios": [a, b, c], "limit_chars": limit }),
        &[input],
        vec![],
    )?;
    for f in ["dataset.json", "train.ids", "val.ids", "test.ids"] {
        run.output(f);
    }
    Prepared::save(&run.path, &manifest, &splits)?;
    let dir = run.finish()?;
    Ok(json!({
        "run_dir": dir,
        "vocab_size": manifest.vocab_size,
        "boundaries": manifest.boundaries,
        "content_sha256": manifest.content_sha256,
    }))
}

pub fn train(
    common: &Common,
    command: &str,
    kind: CellKind,
    layers: usize,
    hidden: usize,
    window: usize,
    opts: &TrainOpts,
) -> Result<Value> {
    let data = Prepared::load(&opts.data)?;
    let config = trainer::load_config(opts.config.as_deref(), &opts.overrides)?;
    let k = data.vocab.len();
    let spec = if kind == CellKind::Nnn {
        ModelSpec::nnn(window, hidden, k)
    } else {
        ModelSpec::recurrent(kind, layers, hidden, k)
    };
    spec.validate()?;
    let mut run = RunDir::create(
        &common.out_root,
        command,
        json!({ "spec": spec, "train": config, "cross_validate": opts.cross_validate }),
        &[&opts.data],
        vec![config.seed],
    )?;
    let (outcome, cv) = if opts.cross_validate {
        let s = trainer::cross_validate_dropout(spec, &config, &data.splits, &data.vocab)?;
        let table: Vec<Value> = s
            .val_losses
            .iter()
            .map(|(p, v)| json!({ "dropout": p, "val_loss": v }))
            .collect();
        (s.best, Some(json!({ "best_dropout": s.best_dropout, "grid": table })))
    } else {
        (trainer::train(spec, &config, &data.splits, &data.vocab)?, None)
    };
    outcome.best.save(&run.output("best.ckpt"))?;
    outcome.last.save(&run.output("last.ckpt"))?;
    outcome.log.write_csv(&run.output("train_log.csv"))?;
    if !outcome.snapshots.is_empty() {
        fs::create_dir_all(run.path.join("snapshots")).map_err(|e| Error::io(&run.path, e))?;
        for s in &outcome.snapshots {
            s.save(&run.output(&format!("snapshots/iter-{:08}.ckpt", s.iteration)))?;
        }
    }
    let summary = json!({
        "dataset_sha256": data.manifest.content_sha256,
        "spec": spec,
        "params": spec.param_count(),
        "best_val_loss": outcome.best.val_loss,
        "best_iteration": outcome.best.iteration,
        "best_epoch": outcome.best.epoch,
        "iterations": outcome.log.iterations.len(),
        "dropout": outcome.best.dropout,
        "cross_validation": cv,
    });
    fs::write(
        run.output("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .map_err(|e| Error::io(&run.path, e))?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "summary": summary }))
}

pub fn grid(common: &Common, kinds: &[CellKind], layers: &[usize], sizes: &[usize], opts: &TrainOpts) -> Result<Value> {
    let data = Prepared::load(&opts.data)?;
    let config = trainer::load_config(opts.config.as_deref(), &opts.overrides)?;
    let mut run = RunDir::create(
        &common.out_root,
        "grid",
        json!({ "kinds": kinds, "layers": layers, "sizes": sizes, "train": config }),
        &[&opts.data],
        vec![config.seed],
    )?;
    let rows = trainer::model_grid(kinds, layers, sizes, &config, &data.splits, &data.vocab)?;
    trainer::write_grid_csv(&run.output("grid.csv"), &rows)?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "rows": rows }))
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    distributions: bool,
    bootstrap: usize,
    seed: u64,
) -> Result<Value> {
    let data = Prepared::load(data_dir)?;
    let ck = Checkpoint::load(checkpoint)?;
    check_vocab(&ck, &data.vocab)?;
    let mut run = RunDir::create(
        &common.out_root,
        "eval",
        json!({ "split": split, "distributions": distributions, "bootstrap": bootstrap, "seed": seed }),
        &[checkpoint, data_dir],
        vec![seed],
    )?;
    let ev = trainer::evaluate(&ck, data.split(split)?, 100, distributions)?;
    records::write_csv(&run.output("records.csv"), &ev.records)?;
    if let Some(d) = &ev.distributions {
        d.save(&run.output("distributions.bin"))?;
    }
    let summary = json!({
        "split": split,
        "mean_loss": ev.mean_loss,
        "bootstrap_sigma": bootstrap_sigma(&ev.records, bootstrap, seed),
        "positions": ev.records.len(),
    });
    fs::write(
        run.output("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .map_err(|e| Error::io(&run.path, e))?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "summary": summary }))
}

pub fn sample(
    common: &Common,
    checkpoint: &Path,
    prime: &str,
    length: usize,
    temperature: f64,
    seed: u64,
) -> Result<Value> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut run = RunDir::create(
        &common.out_root,
        "sample",
        json!({ "prime": prime, "length": length, "temperature": temperature, "seed": seed }),
        &[checkpoint],
        vec![seed],
    )?;
    let text = sample_text(&ck.params, &ck.vocab, prime, length, temperature, seed)?;
    fs::write(run.output("sample.txt"), &text).map_err(|e| Error::io(&run.path, e))?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "text": text }))
}

pub fn ngram(
    common: &Common,
    data_dir: &Path,
    orders: &[usize],
    split: &str,
    save_models: bool,
    bootstrap: usize,
    seed: u64,
) -> Result<Value> {
    let data = Prepared::load(data_dir)?;
    let stream = data.split(split)?;
    let mut run = RunDir::create(
        &common.out_root,
        "ngram",
        json!({ "n": orders, "split": split, "save_models": save_models, "bootstrap": bootstrap, "seed": seed }),
        &[data_dir],
        vec![seed],
    )?;
    let table_path = run.output("table.csv");
    let mut table = csv::Writer::from_path(&table_path).map_err(Error::from)?;
    table
        .write_record(["n", "split", "loss", "sigma"])
        .map_err(Error::from)?;
    let mut rows = Vec::new();
    for &n in orders {
        let model = NgramModel::fit(&data.splits.train, n, &data.vocab)?;
        let ev = model.evaluate_stream(stream)?;
        let sigma = bootstrap_sigma(&ev.records, bootstrap, seed);
        records::write_csv(&run.output(&format!("records_n{n}.csv")), &ev.records)?;
        if save_models {
            model.save(&run.output(&format!("model_n{n}.kn")))?;
        }
        table
            .write_record([
                n.to_string(),
                split.to_string(),
                ev.mean_loss.to_string(),
                sigma.to_string(),
            ])
            .map_err(Error::from)?;
        rows.push(json!({ "n": n, "loss": ev.mean_loss, "sigma": sigma }));
    }
    table.flush().map_err(|e| Error::io(&table_path, e))?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "rows": rows }))
}

#[derive(Subcommand)]
pub enum Analysis {
    /// Per-unit gate saturation fractions (LSTM, GRU).
    Saturation {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Analyse only the first N characters of the split.
        #[arg(long)]
        max_chars: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        lo: f64,
        #[arg(long, default_value_t = 0.9)]
        hi: f64,
    },
    /// HTML rendering of one cell's activation over text.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        unit: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 2000)]
        len: usize,
    },
    /// Rank cells by correlation with a text probe.
    Probes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// inside_quote, line_position, inside_parens, indent_depth, inside_comment
        #[arg(long)]
        probe: Probe,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        max_chars: Option<usize>,
    },
    /// Pairwise argmax agreement between distribution dumps.
    Agreement {
        /// NAME=distributions.bin, repeatable.
        #[arg(long = "dist", required = true)]
        dists: Vec<String>,
    },
    /// Venn regions of three models' error sets.
    Overlap {
        /// Exactly three NAME=records.csv.
        #[arg(long = "records", required = true, num_args = 1)]
        records: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Per-character mean target probability of two models.
    Advantage {
        #[arg(long)]
        data: PathBuf,
        /// NAME=records.csv
        #[arg(long)]
        a: String,
        /// NAME=records.csv
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Closing-brace probability bucketed by distance to the opener.
    Braces {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// NAME=records.csv, repeatable.
        #[arg(long = "records", required = true)]
        records: Vec<String>,
        #[arg(long, default_value_t = 20)]
        bucket_width: usize,
        #[arg(long, default_value_t = 400)]
        max_distance: usize,
    },
    /// Symmetric KL and loss gap of checkpoint distributions to baselines.
    Kl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// LABEL=distributions.bin in training order, repeatable.
        #[arg(long = "series", required = true)]
        series: Vec<String>,
        /// NAME=distributions.bin, repeatable.
        #[arg(long = "baseline", required = true)]
        baselines: Vec<String>,
    },
}

fn truncated(ids: &[charlab::corpus::Id], max: Option<usize>) -> &[charlab::corpus::Id] {
    &ids[..max.map_or(ids.len(), |m| m.min(ids.len()))]
}

fn load_named_records(specs: &[String]) -> Result<Vec<(String, PathBuf, Vec<PredictionRecord>)>> {
    specs
        .iter()
        .map(|s| {
            let (n, p) = parse_named(s)?;
            let r = records::read_csv(&p)?;
            Ok((n, p, r))
        })
        .collect()
}

fn load_named_dists(specs: &[String]) -> Result<Vec<(String, PathBuf, Distributions)>> {
    specs
        .iter()
        .map(|s| {
            let (n, p) = parse_named(s)?;
            let d = Distributions::load(&p)?;
            Ok((n, p, d))
        })
        .collect()
}

pub fn analyze(common: &Common, which: Analysis) -> Result<Value> {
    match which {
        Analysis::Saturation {
            checkpoint,
            data,
            split,
            max_chars,
            lo,
            hi,
        } => {
            let d = Prepared::load(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            check_vocab(&ck, &d.vocab)?;
            let mut run = RunDir::create(
                &common.out_root,
                "saturation",
                json!({ "split": split, "max_chars": max_chars, "thresholds": [lo, hi] }),
                &[&checkpoint, &data],
                vec![],
            )?;
            let rows = analysis::gate_saturation(&ck.params, truncated(d.split(&split)?, max_chars), (lo, hi))?;
            analysis::write_saturation_csv(&run.output("saturation.csv"), &rows)?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "units": rows.len() }))
        }
        Analysis::Trace {
            checkpoint,
            data,
            split,
            layer,
            unit,
            start,
            len,
        } => {
            let d = Prepared::load(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            check_vocab(&ck, &d.vocab)?;
            let ids = d.split(&split)?;
            let end = (start + len).min(ids.len());
            if start >= end {
                return Err(Error::InvalidArgument(format!("start {start} beyond the split")));
            }
            let mut run = RunDir::create(
                &common.out_root,
                "trace",
                json!({ "split": split, "layer": layer, "unit": unit, "start": start, "len": len }),
                &[&checkpoint, &data],
                vec![],
            )?;
            // run from the split start so the state reflects the preceding text
            let values = analysis::cell_values(&ck.params, &ids[..end], layer, unit)?;
            let chars: Vec<char> = d.vocab.decode(&ids[start..end])?.chars().collect();
            let html = analysis::render_trace_html(&chars, &values[start..], &format!("layer {layer} unit {unit}"))?;
            fs::write(run.output("trace.html"), html).map_err(|e| Error::io(&run.path, e))?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "chars": chars.len() }))
        }
        Analysis::Probes {
            checkpoint,
            data,
            split,
            probe,
            top_k,
            max_chars,
        } => {
            let d = Prepared::load(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            check_vocab(&ck, &d.vocab)?;
            let mut run = RunDir::create(
                &common.out_root,
                "probes",
                json!({ "split": split, "probe": probe, "top_k": top_k, "max_chars": max_chars }),
                &[&checkpoint, &data],
                vec![],
            )?;
            let text = d.vocab.decode(truncated(d.split(&split)?, max_chars))?;
            let cells = analysis::find_interpretable_cells(&ck.params, &d.vocab, &text, probe, top_k)?;
            let p = run.output("cells.csv");
            let mut w = csv::Writer::from_path(&p)?;
            for c in &cells {
                w.serialize(c)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "cells": cells }))
        }
        Analysis::Agreement { dists } => {
            let loaded = load_named_dists(&dists)?;
            let paths: Vec<&Path> = loaded.iter().map(|(_, p, _)| p.as_path()).collect();
            let mut run = RunDir::create(
                &common.out_root,
                "agreement",
                json!({ "models": dists }),
                &paths,
                vec![],
            )?;
            let named: Vec<(String, &Distributions)> = loaded.iter().map(|(n, _, d)| (n.clone(), d)).collect();
            let m = analysis::agreement(&named)?;
            analysis::write_agreement_csv(&run.output("agreement.csv"), &m)?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "matrix": m }))
        }
        Analysis::Overlap { records, threshold } => {
            let loaded = load_named_records(&records)?;
            if loaded.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "overlap needs 3 record sets, got {}",
                    loaded.len()
                )));
            }
            let paths: Vec<&Path> = loaded.iter().map(|(_, p, _)| p.as_path()).collect();
            let mut run = RunDir::create(
                &common.out_root,
                "overlap",
                json!({ "models": records, "threshold": threshold }),
                &paths,
                vec![],
            )?;
            let positions = &loaded[0].2;
            for (n, _, r) in &loaded[1..] {
                if r.len() != positions.len() || r.iter().zip(positions).any(|(a, b)| a.position != b.position) {
                    return Err(Error::Mismatch(format!("{n} covers different positions")));
                }
            }
            let sets: Vec<_> = loaded
                .iter()
                .map(|(_, _, r)| analysis::error_set(r, threshold))
                .collect();
            let o = analysis::error_overlap(
                [
                    (loaded[0].0.as_str(), &sets[0]),
                    (loaded[1].0.as_str(), &sets[1]),
                    (loaded[2].0.as_str(), &sets[2]),
                ],
                positions.len(),
            );
            fs::write(run.output("overlap.json"), serde_json::to_string_pretty(&o)? + "\n")
                .map_err(|e| Error::io(&run.path, e))?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "overlap": o }))
        }
        Analysis::Advantage { data, a, b, top_k } => {
            let d = Prepared::load(&data)?;
            let mut loaded = load_named_records(&[a, b])?;
            let (nb, pb, rb) = loaded.pop().expect("two entries");
            let (na, pa, ra) = loaded.pop().expect("two entries");
            let mut run = RunDir::create(
                &common.out_root,
                "advantage",
                json!({ "a": na, "b": nb, "top_k": top_k }),
                &[&data, &pa, &pb],
                vec![],
            )?;
            let report = analysis::char_advantage(&ra, &rb, &d.vocab, top_k)?;
            analysis::write_advantage_csv(&run.output("advantage.csv"), &report)?;
            fs::write(
                run.output("advantage.json"),
                serde_json::to_string_pretty(&report)? + "\n",
            )
            .map_err(|e| Error::io(&run.path, e))?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "top_a": report.top_a, "top_b": report.top_b }))
        }
        Analysis::Braces {
            data,
            split,
            records,
            bucket_width,
            max_distance,
        } => {
            let d = Prepared::load(&data)?;
            let loaded = load_named_records(&records)?;
            let mut paths: Vec<&Path> = vec![&data];
            paths.extend(loaded.iter().map(|(_, p, _)| p.as_path()));
            let mut run = RunDir::create(
                &common.out_root,
                "braces",
                json!({ "split": split, "models": records, "bucket_width": bucket_width, "max_distance": max_distance }),
                &paths,
                vec![],
            )?;
            let text = d.split_chars(&split)?;
            let named: Vec<(String, &[PredictionRecord])> =
                loaded.iter().map(|(n, _, r)| (n.clone(), r.as_slice())).collect();
            let report = analysis::brace_distance(&named, &text, bucket_width, max_distance)?;
            analysis::write_brace_csv(&run.output("braces.csv"), &report)?;
            fs::write(run.output("braces.json"), serde_json::to_string_pretty(&report)? + "\n")
                .map_err(|e| Error::io(&run.path, e))?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "report": report }))
        }
        Analysis::Kl {
            data,
            split,
            series,
            baselines,
        } => {
            let d = Prepared::load(&data)?;
            let s = load_named_dists(&series)?;
            let b = load_named_dists(&baselines)?;
            let mut paths: Vec<&Path> = vec![&data];
            paths.extend(s.iter().chain(&b).map(|(_, p, _)| p.as_path()));
            let mut run = RunDir::create(
                &common.out_root,
                "kl",
                json!({ "split": split, "series": series, "baselines": baselines }),
                &paths,
                vec![],
            )?;
            let sn: Vec<(String, &Distributions)> = s.iter().map(|(n, _, d)| (n.clone(), d)).collect();
            let bn: Vec<(String, &Distributions)> = b.iter().map(|(n, _, d)| (n.clone(), d)).collect();
            let pts = analysis::kl_dynamics(&sn, &bn, d.split(&split)?)?;
            analysis::write_kl_csv(&run.output("kl.csv"), &pts)?;
            let dir = run.finish()?;
            Ok(json!({ "run_dir": dir, "points": pts }))
        }
    }
}

pub fn oracle(
    common: &Common,
    data: &Path,
    split: &str,
    model: &Path,
    ngram: &[PathBuf],
    config: Option<&Path>,
    overrides: &[String],
) -> Result<Value> {
    let d = Prepared::load(data)?;
    let mut value = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => serde_json::to_value(OracleConfig::default())?,
    };
    trainer::apply_overrides(&mut value, overrides)?;
    let cfg: OracleConfig =
        serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("oracle config: {e}")))?;
    cfg.validate()?;
    let model_records = records::read_csv(model)?;
    let ngram_records: Vec<Vec<PredictionRecord>> =
        ngram.iter().map(|p| records::read_csv(p)).collect::<Result<_>>()?;
    let mut paths: Vec<&Path> = vec![data, model];
    paths.extend(ngram.iter().map(PathBuf::as_path));
    let mut run = RunDir::create(
        &common.out_root,
        "oracle",
        json!({ "split": split, "config": cfg }),
        &paths,
        vec![],
    )?;
    let text = d.split_chars(split)?;
    let train_counts: HashMap<String, u64> = oracles::word_counts(&d.split_chars("train")?);
    let inputs = PipelineInputs {
        model: &model_records,
        ngrams: ngram_records.iter().map(Vec::as_slice).collect(),
        text: &text,
        train_counts: &train_counts,
    };
    let b = oracles::run_pipeline(&inputs, &cfg)?;
    b.save_json(&run.output("breakdown.json"))?;
    b.write_csv(&run.output("breakdown.csv"))?;
    let dir = run.finish()?;
    let slices: Vec<Value> = b
        .stages
        .iter()
        .map(|s| json!({ "slice": s.label(), "count": s.count, "fraction": s.fraction }))
        .collect();
    Ok(json!({ "run_dir": dir, "total_errors": b.total_errors, "positions": b.positions, "slices": slices }))
}

pub fn oracle_compare(common: &Common, a: &Path, b: &Path) -> Result<Value> {
    let ba = oracles::ErrorBreakdown::load_json(a)?;
    let bb = oracles::ErrorBreakdown::load_json(b)?;
    let mut run = RunDir::create(&common.out_root, "oracle-compare", json!({}), &[a, b], vec![])?;
    let c = oracles::compare_breakdowns(&ba, &bb)?;
    fs::write(run.output("comparison.json"), serde_json::to_string_pretty(&c)? + "\n")
        .map_err(|e| Error::io(&run.path, e))?;
    let dir = run.finish()?;
    Ok(json!({ "run_dir": dir, "comparison": c }))
}
