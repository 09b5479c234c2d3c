//! Latency harness: per-document forward timing for a set of models over a
//! shared document set, strictly single-threaded on a monotonic clock.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gru::{gru_forward, GruParams};
use crate::model::Model;
use crate::tensor::Matrix;
use crate::text::TokenRef;

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 3;

/// Per-model latency statistics in seconds per document.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub model: String,
    pub mean_s: f64,
    pub std_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reps: usize,
    pub warmup: usize,
    pub hardware: String,
}

/// A named forward pass over the document at a given index.
pub struct BenchSubject<'a> {
    pub name: String,
    pub run: Box<dyn FnMut(usize) -> Result<()> + 'a>,
}

impl<'a> BenchSubject<'a> {
    /// Times the classifier forward over pre-encoded token documents.
    pub fn attention(name: &str, model: &'a Model, docs: &'a [Vec<TokenRef>]) -> BenchSubject<'a> {
        BenchSubject {
            name: name.into(),
            run: Box::new(move |i| model.forward(&docs[i]).map(|_| ())),
        }
    }

    /// Times the recurrent forward over pre-embedded `n×d` inputs.
    pub fn gru(name: &str, params: &'a GruParams, docs: &'a [Matrix]) -> BenchSubject<'a> {
        BenchSubject {
            name: name.into(),
            run: Box::new(move |i| gru_forward(&docs[i], params).map(|_| ())),
        }
    }
}

/// Runs `warmup` untimed passes and `reps` timed passes over the document
/// set for each subject; every timed forward contributes one sample.
pub fn bench(
    subjects: Vec<BenchSubject<'_>>,
    doc_count: usize,
    reps: usize,
    warmup: usize,
) -> Result<Vec<LatencyReport>> {
    if doc_count == 0 {
        return Err(Error::Data("benchmark needs at least one document".into()));
    }
    if reps < MIN_REPS {
        return Err(Error::Config(format!("reps must be at least {MIN_REPS}, got {reps}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::Config(format!("warmup must be at least {MIN_WARMUP}, got {warmup}")));
    }
    let hardware = hardware_descriptor();
    let mut reports = Vec::with_capacity(subjects.len());
    for mut subject in subjects {
        for _ in 0..warmup {
            for doc in 0..doc_count {
                (subject.run)(doc)?;
            }
        }
        let mut samples = Vec::with_capacity(reps * doc_count);
        for _ in 0..reps {
            for doc in 0..doc_count {
                let started = Instant::now();
                (subject.run)(doc)?;
                samples.push(started.elapsed().as_secs_f64());
            }
        }
        reports.push(summarize(subject.name, &samples, reps, warmup, hardware.clone()));
    }
    Ok(reports)
}

fn summarize(
    model: String,
    samples: &[f64],
    reps: usize,
    warmup: usize,
    hardware: String,
) -> LatencyReport {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() < 2 {
        0.0
    } else {
        samples.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
    };
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LatencyReport { model, mean_s: mean, std_s: var.sqrt(), min_s: min, max_s: max, reps, warmup, hardware }
}

/// CPU model from /proc/cpuinfo, falling back to the platform triple.
pub fn hardware_descriptor() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|name| name.trim().to_string())
        })
        .filter(|name| !name.is_empty())
        .unwrap_or_else(|| format!("{}/{}", std::env::consts::OS, std::env::consts::ARCH))
}

/// Plain-text comparison table, one row per model.
pub fn render_table(reports: &[LatencyReport]) -> String {
    let mut width = "model".len();
    for r in reports {
        width = width.max(r.model.len());
    }
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>5}\n",
        "model", "mean (s)", "std (s)", "min (s)", "max (s)", "reps",
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>12.6}  {:>12.6}  {:>12.6}  {:>12.6}  {:>5}\n",
            r.model, r.mean_s, r.std_s, r.min_s, r.max_s, r.reps,
        ));
    }
    out
}
