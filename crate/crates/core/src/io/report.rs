//! Run reports as ordered `key value` lines. Every line is deterministic
//! in (config, seed) except those under the `timing.` prefix, which carry
//! wall-clock measurements; `determinism_view` strips them for comparisons.

use crate::data::QuestionKind;
use crate::train::{EvalStats, RunReport};

pub const FORMAT_LINE: &str = "report 1";
pub const TIMING_PREFIX: &str = "timing.";

fn push(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(key);
    out.push(' ');
    out.push_str(&value.to_string());
    out.push('\n');
}

fn push_eval(out: &mut String, prefix: &str, stats: &EvalStats) {
    push(out, &format!("{prefix}.samples"), stats.samples);
    push(out, &format!("{prefix}.correct"), stats.correct);
    push(out, &format!("{prefix}.accuracy"), stats.accuracy());
    push(out, &format!("{prefix}.loss"), stats.mean_loss);
    for k in &stats.per_kind {
        let kp = format!("{prefix}.kind.{}", k.kind.as_str());
        push(out, &format!("{kp}.samples"), k.samples);
        push(out, &format!("{kp}.correct"), k.correct);
        push(out, &format!("{kp}.accuracy"), k.accuracy());
    }
}

pub fn render(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(FORMAT_LINE);
    out.push('\n');
    push(&mut out, "seed", report.seed);
    for (key, value) in &report.config_echo {
        push(&mut out, &format!("config.{key}"), value);
    }
    push(&mut out, "data.train_samples", report.train_samples);
    push(&mut out, "data.val_samples", report.val_samples);
    push(&mut out, "epochs", report.epochs.len());
    for e in &report.epochs {
        let p = format!("epoch.{}", e.epoch);
        push(&mut out, &format!("{p}.lr"), e.lr);
        push(&mut out, &format!("{p}.train_loss"), e.train_loss);
        push(&mut out, &format!("{p}.train_accuracy"), e.train_accuracy);
        if let Some(v) = e.val_loss {
            push(&mut out, &format!("{p}.val_loss"), v);
        }
        if let Some(v) = e.val_accuracy {
            push(&mut out, &format!("{p}.val_accuracy"), v);
        }
    }
    push_eval(&mut out, "final.train", &report.final_train);
    if let Some(val) = &report.final_val {
        push_eval(&mut out, "final.val", val);
    }
    for e in &report.epochs {
        push(
            &mut out,
            &format!("{TIMING_PREFIX}epoch.{}.seconds", e.epoch),
            e.seconds,
        );
    }
    push(&mut out, "timing.total_seconds", report.total_seconds);
    out
}

/// The report with wall-clock lines removed; equal across reruns of the
/// same (config, seed).
pub fn determinism_view(text: &str) -> String {
    text.lines()
        .filter(|line| !line.starts_with(TIMING_PREFIX))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Value of the first line whose key matches, if any.
pub fn lookup<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|line| line.strip_prefix(key).and_then(|rest| rest.strip_prefix(' ')))
}

/// Kind-accuracy key as written by `render`.
pub fn kind_accuracy_key(split: &str, kind: QuestionKind) -> String {
    format!("final.{split}.kind.{}.accuracy", kind.as_str())
}
