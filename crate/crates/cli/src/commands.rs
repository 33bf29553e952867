use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use confrank_core::features::{generate_drift_stream, group_by_day, load_csv, temporal_split, Example, FieldSchema};
use confrank_core::metrics::MetricReport;
use confrank_core::models::ModelSnapshot;
use confrank_core::pipeline::{fit_standard, run_one_pass_experiment, CycleReport, Setting, TrainConfig};
use confrank_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::args::{DataSpec, EvalSpec, GenSpec, Invocation, ModelSpec, OnePassSpec, SweepSpec, TrainSpec};
use crate::failure::Failure;

pub const SNAPSHOT_FILE: &str = "model.snap";
pub const REPORT_FILE: &str = "report.json";

/// Files a command reads; their digests go into the manifest.
pub fn inputs(invocation: &Invocation) -> Vec<PathBuf> {
    match invocation {
        Invocation::Gen(_) => Vec::new(),
        Invocation::Train(s) => std::iter::once(s.data.path.clone()).chain(s.teacher.clone()).collect(),
        Invocation::Onepass(s) => vec![s.data.path.clone()],
        Invocation::Eval(s) => [
            Some(s.snapshot.clone()),
            Some(s.data.clone()),
            s.teacher_snapshot.clone(),
        ]
        .into_iter()
        .flatten()
        .collect(),
        Invocation::Sweep(s) => vec![s.data.path.clone()],
    }
}

fn schema_of(data: &DataSpec) -> Result<FieldSchema, Failure> {
    Ok(FieldSchema::from_csv_header(&data.path, data.hash_dim)?)
}

/// Effective training configuration, derived from the data header.
pub fn train_config(invocation: &Invocation) -> Result<Option<TrainConfig>, Failure> {
    let (data, model, setting, warm_start) = match invocation {
        Invocation::Train(s) => (&s.data, &s.model, Setting::Standard, true),
        Invocation::Onepass(s) => (&s.data, &s.model, Setting::OnePass, s.warm_start),
        Invocation::Sweep(s) => (&s.data, &s.model, Setting::Standard, true),
        Invocation::Gen(_) | Invocation::Eval(_) => return Ok(None),
    };
    let schema = schema_of(data)?;
    let mut config = model.train_config(schema.field_count(), data.hash_dim, setting)?;
    config.warm_start = warm_start;
    if let Invocation::Train(s) = invocation {
        config.teacher_path = s.teacher.clone();
    }
    Ok(Some(config))
}

/// Runs the command and returns the file names written into its output
/// directory, plus the line to print on stdout.
pub fn execute(invocation: &Invocation, config: Option<&TrainConfig>) -> Result<(Vec<String>, String), Failure> {
    match invocation {
        Invocation::Gen(spec) => gen(spec),
        Invocation::Train(spec) => train(spec, config.expect("train has a config")),
        Invocation::Onepass(spec) => onepass(spec, config.expect("onepass has a config")),
        Invocation::Eval(spec) => eval(spec),
        Invocation::Sweep(spec) => sweep(spec, config.expect("sweep has a config")),
    }
}

struct OutDir<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> OutDir<'a> {
    fn new(dir: &'a Path) -> Self {
        OutDir {
            dir,
            written: Vec::new(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_owned());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes") + "\n"
}

fn load_examples(data: &DataSpec) -> Result<Vec<Example>, Failure> {
    Ok(load_csv(&data.path, &schema_of(data)?)?)
}

fn report_for(
    model: &ModelSnapshot,
    examples: &[Example],
    teacher: Option<&ModelSnapshot>,
) -> Result<MetricReport, Failure> {
    let ids: Vec<u64> = examples.iter().map(|e| e.id).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let logits = model.forward_batch(examples)?;
    let teacher_logits = teacher.map(|t| t.forward_batch(examples)).transpose()?;
    Ok(MetricReport::evaluate(
        &ids,
        &logits,
        &labels,
        teacher_logits.as_deref(),
    )?)
}

fn check_compatible(snapshot: &ModelSnapshot, schema: &FieldSchema, what: &str) -> Result<(), Failure> {
    let arch = snapshot.arch();
    if arch.field_count != schema.field_count() {
        return Err(Error::FieldCountMismatch {
            expected: arch.field_count,
            got: schema.field_count(),
        }
        .into());
    }
    if arch.hash_dim != schema.hash_dim() {
        return Err(Error::DescriptorMismatch(format!(
            "{what} hashes into {} buckets, data uses {}",
            arch.hash_dim,
            schema.hash_dim()
        ))
        .into());
    }
    Ok(())
}

fn gen(spec: &GenSpec) -> Result<(Vec<String>, String), Failure> {
    let stream = generate_drift_stream(&spec.generator)?;
    let mut out = OutDir::new(&spec.out);
    let data = out.path("data.csv");
    stream.save_csv(&data)?;
    let sidecar = json!({
        "schema_version": 1,
        "generator": spec.generator,
        "bias": stream.bias,
        "rows": stream.examples.len(),
    });
    out.text("generator.json", &json_line(&sidecar))?;
    let summary = json!({ "rows": stream.examples.len(), "data": data });
    Ok((
        out.written,
        serde_json::to_string(&summary).expect("summary serializes"),
    ))
}

fn train(spec: &TrainSpec, config: &TrainConfig) -> Result<(Vec<String>, String), Failure> {
    let schema = schema_of(&spec.data)?;
    let examples = load_csv(&spec.data.path, &schema)?;
    let split = temporal_split(&examples, spec.validation_days, spec.test_days, spec.data.time_unit)?;
    let teacher = spec.teacher.as_deref().map(ModelSnapshot::load).transpose()?;
    if let Some(t) = &teacher {
        check_compatible(t, &schema, "teacher snapshot")?;
    }
    let outcome = fit_standard(&split, config, teacher.as_ref())?;
    let report = report_for(&outcome.snapshot, &split.test, teacher.as_ref())?;

    let mut out = OutDir::new(&spec.out);
    outcome.snapshot.save(&out.path(SNAPSHOT_FILE))?;
    out.text(REPORT_FILE, &json_line(&report))?;
    let history: String = outcome.history.iter().map(json_line).collect();
    out.text("history.jsonl", &history)?;
    Ok((out.written, report.to_json_line()))
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(String::new, |v| v.to_string())
}

fn margins_csv(reports: &[CycleReport]) -> String {
    let mut csv = String::from("day,served_version,n_pos,n_neg,auc,pos_mean,neg_mean,sample_margin\n");
    for r in reports {
        let s = &r.serve;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.day,
            r.served_version,
            s.n_pos,
            s.n_neg,
            fmt_opt(s.auc),
            fmt_opt(s.pos_mean),
            fmt_opt(s.neg_mean),
            fmt_opt(s.sample_margin)
        );
    }
    csv
}

fn mean_auc(reports: &[CycleReport]) -> Option<f64> {
    let aucs: Vec<f64> = reports.iter().filter_map(|r| r.serve.auc).collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn onepass(spec: &OnePassSpec, config: &TrainConfig) -> Result<(Vec<String>, String), Failure> {
    let examples = load_examples(&spec.data)?;
    let days = group_by_day(&examples, spec.data.time_unit);
    let run = run_one_pass_experiment(&days, spec.warmup_days, spec.cycle_days, config)?;

    let mut out = OutDir::new(&spec.out);
    let cycles: String = run.reports.iter().map(|r| r.to_json_line() + "\n").collect();
    out.text("cycles.jsonl", &cycles)?;
    run.log.save_csv(&out.path("predictions.csv"))?;
    out.text("margins.csv", &margins_csv(&run.reports))?;
    run.final_snapshot.save(&out.path(SNAPSHOT_FILE))?;

    let mut summary = json!({
        "mode": config.mode,
        "cycles": run.reports.len(),
        "mean_serve_auc": mean_auc(&run.reports),
    });
    if let Some(baseline_mode) = spec.compare_with {
        let baseline_spec = ModelSpec {
            mode: baseline_mode,
            weights: baseline_mode.default_weights(),
            ..spec.model.clone()
        };
        let mut baseline_config =
            baseline_spec.train_config(config.arch.field_count, config.arch.hash_dim, Setting::OnePass)?;
        baseline_config.warm_start = config.warm_start;
        let baseline = run_one_pass_experiment(&days, spec.warmup_days, spec.cycle_days, &baseline_config)?;
        let per_day: Vec<_> = run
            .reports
            .iter()
            .zip(&baseline.reports)
            .map(|(a, b)| {
                json!({
                    "day": a.day,
                    "auc": a.serve.auc,
                    "baseline_auc": b.serve.auc,
                    "auc_delta": a.serve.auc.zip(b.serve.auc).map(|(x, y)| x - y),
                })
            })
            .collect();
        let deltas: Vec<f64> = per_day.iter().filter_map(|d| d["auc_delta"].as_f64()).collect();
        let mean_delta = (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64);
        let comparison = json!({
            "schema_version": 1,
            "mode": config.mode,
            "baseline_mode": baseline_mode,
            "days": per_day,
            "mean_auc_delta": mean_delta,
        });
        out.text("comparison.json", &json_line(&comparison))?;
        summary["baseline_mode"] = json!(baseline_mode);
        summary["mean_auc_delta"] = json!(mean_delta);
    }
    Ok((
        out.written,
        serde_json::to_string(&summary).expect("summary serializes"),
    ))
}

fn eval(spec: &EvalSpec) -> Result<(Vec<String>, String), Failure> {
    let snapshot = ModelSnapshot::load(&spec.snapshot)?;
    let schema = FieldSchema::from_csv_header(&spec.data, snapshot.arch().hash_dim)?;
    check_compatible(&snapshot, &schema, "snapshot")?;
    let teacher = spec.teacher_snapshot.as_deref().map(ModelSnapshot::load).transpose()?;
    if let Some(t) = &teacher {
        check_compatible(t, &schema, "teacher snapshot")?;
    }
    let examples = load_csv(&spec.data, &schema)?;
    let report = report_for(&snapshot, &examples, teacher.as_ref())?;
    let mut written = Vec::new();
    if let Some(dir) = &spec.out {
        let mut out = OutDir::new(dir);
        out.text(REPORT_FILE, &json_line(&report))?;
        written = out.written;
    }
    Ok((written, report.to_json_line()))
}

fn sweep(spec: &SweepSpec, config: &TrainConfig) -> Result<(Vec<String>, String), Failure> {
    let examples = load_examples(&spec.data)?;
    let split = temporal_split(&examples, spec.validation_days, spec.test_days, spec.data.time_unit)?;
    let mut rows = Vec::new();
    for &lambda_cr in &spec.grid_cr {
        for &lambda_rcr in &spec.grid_rcr {
            let mut cell = config.clone();
            cell.weights.lambda_cr = lambda_cr;
            cell.weights.lambda_rcr = lambda_rcr;
            cell.validate()?;
            let outcome = fit_standard(&split, &cell, None)?;
            let auc = report_for(&outcome.snapshot, &split.test, None)?.auc;
            rows.push((lambda_cr, lambda_rcr, auc));
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.2.map(|auc| (i, auc)))
        .fold(None::<(usize, f64)>, |best, (i, auc)| match best {
            Some((_, b)) if b >= auc => best,
            _ => Some((i, auc)),
        });
    let mut csv = String::from("lambda_cr,lambda_rcr,test_auc,best\n");
    for (i, (cr, rcr, auc)) in rows.iter().enumerate() {
        let is_best = best.is_some_and(|(b, _)| b == i);
        let _ = writeln!(csv, "{cr},{rcr},{},{}", fmt_opt(*auc), u8::from(is_best));
    }
    let mut out = OutDir::new(&spec.out);
    out.text("sweep.csv", &csv)?;
    let summary = json!({
        "cells": rows.len(),
        "best": best.map(|(i, auc)| json!({ "lambda_cr": rows[i].0, "lambda_rcr": rows[i].1, "test_auc": auc })),
    });
    Ok((
        out.written,
        serde_json::to_string(&summary).expect("summary serializes"),
    ))
}
