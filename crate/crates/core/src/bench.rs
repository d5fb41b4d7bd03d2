//! Decoder latency benchmark.
//!
//! Every context is encoded once up front; each decoder is then timed alone
//! over the whole evaluation set, once untimed as warm-up and `repetitions`
//! times for real. Encoder time is measured separately since all decoders
//! share it.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{run_decoder, InferOptions};
use crate::model::AutodialModel;
use crate::transformer::EncoderOutput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub task: String,
    pub kind: String,
    /// Mean seconds of decoder-only work over the whole evaluation set.
    pub mean_s: f64,
    pub sd_s: f64,
    pub params: usize,
    pub repetitions: usize,
    pub gen_max_len: usize,
    /// Mean seconds to encode the whole evaluation set once.
    pub encoder_mean_s: f64,
    /// `mean_s + encoder_mean_s`.
    pub end_to_end_mean_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub contexts: usize,
    pub encoder_mean_s: f64,
    pub encoder_sd_s: f64,
}

/// Mean and sample standard deviation (0 for a single sample).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn encode_all(model: &AutodialModel, contexts: &[Vec<usize>]) -> Result<Vec<EncoderOutput>> {
    contexts.iter().map(|c| model.encode_context(c)).collect()
}

/// Times each decoder in `tasks`, one after another.
pub fn benchmark(
    model: &AutodialModel,
    contexts: &[Vec<usize>],
    tasks: &[&str],
    repetitions: usize,
    opts: &InferOptions,
) -> Result<BenchmarkReport> {
    if repetitions == 0 {
        return Err(Error::Invalid("repetitions must be at least 1".into()));
    }
    if contexts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for t in tasks {
        model.decoder(t)?;
    }
    let encs = encode_all(model, contexts)?;
    let mut enc_times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        std::hint::black_box(encode_all(model, contexts)?);
        enc_times.push(t0.elapsed().as_secs_f64());
    }
    let (encoder_mean_s, encoder_sd_s) = mean_sd(&enc_times);

    let mut rows = Vec::new();
    for &task in tasks {
        for enc in &encs {
            std::hint::black_box(run_decoder(model, task, enc, opts)?);
        }
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            for enc in &encs {
                std::hint::black_box(run_decoder(model, task, enc, opts)?);
            }
            times.push(t0.elapsed().as_secs_f64());
        }
        let (mean_s, sd_s) = mean_sd(&times);
        let d = model.decoder(task)?;
        rows.push(BenchmarkRow {
            task: task.to_string(),
            kind: d.spec.kind_name().to_string(),
            mean_s,
            sd_s,
            params: d.params.numel(),
            repetitions,
            gen_max_len: opts.gen_max_len,
            encoder_mean_s,
            end_to_end_mean_s: mean_s + encoder_mean_s,
        });
    }
    Ok(BenchmarkReport {
        rows,
        contexts: contexts.len(),
        encoder_mean_s,
        encoder_sd_s,
    })
}

impl BenchmarkReport {
    pub fn row(&self, task: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// Mean decoder-only latency over rows of `kind`.
    pub fn mean_for_kind(&self, kind: &str) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter(|r| r.kind == kind).map(|r| r.mean_s).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<15} {:>12} {:>12} {:>14} {:>14} {:>12}\n",
            "task", "kind", "mean_s", "sd_s", "end_to_end_s", "params", "gen_max_len"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<15} {:>12.6} {:>12.6} {:>14.6} {:>14} {:>12}\n",
                r.task, r.kind, r.mean_s, r.sd_s, r.end_to_end_mean_s, r.params, r.gen_max_len
            ));
        }
        out.push_str(&format!(
            "encoder: {:.6}s ± {:.6}s over {} contexts, {} repetitions\n",
            self.encoder_mean_s,
            self.encoder_sd_s,
            self.contexts,
            self.rows.first().map_or(0, |r| r.repetitions)
        ));
        out
    }
}
