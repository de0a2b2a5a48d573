//! Report records and their JSON-lines / CSV encodings.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" | "jsonl" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => bail!("unknown report format {s:?}"),
        }
    }
}

/// One decode run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub policy: String,
    pub gen_len: usize,
    pub steps: usize,
    pub dlm_passes: usize,
    pub ar_passes: usize,
    pub total_flops: u64,
    pub rule_match_rate: Option<f64>,
    pub wall_ms: f64,
    pub tokens_checksum: u64,
}

/// One bench cell: the run plus the sweep coordinates that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(flatten)]
    pub report: Report,
    pub heuristic: String,
    pub schedule_steps: usize,
    pub block_size: usize,
    pub topk_match: usize,
    pub tau: f64,
    pub agreement: Option<f64>,
    /// Sequential-baseline DLM passes over this cell's DLM passes.
    pub speedup: f64,
    /// Sequential-baseline FLOPs over this cell's FLOPs.
    pub flop_speedup: f64,
    pub mean_accepted_prefix: Option<f64>,
}

pub trait Record: Serialize {
    fn csv_header() -> &'static str;
    fn csv_row(&self) -> String;
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl Record for Report {
    fn csv_header() -> &'static str {
        "schema,policy,gen_len,steps,dlm_passes,ar_passes,total_flops,rule_match_rate,wall_ms,tokens_checksum"
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3},{}",
            self.schema,
            self.policy,
            self.gen_len,
            self.steps,
            self.dlm_passes,
            self.ar_passes,
            self.total_flops,
            opt(&self.rule_match_rate),
            self.wall_ms,
            self.tokens_checksum
        )
    }
}

impl Record for BenchRecord {
    fn csv_header() -> &'static str {
        "schema,policy,gen_len,steps,dlm_passes,ar_passes,total_flops,rule_match_rate,wall_ms,tokens_checksum,\
         heuristic,schedule_steps,block_size,topk_match,tau,agreement,speedup,flop_speedup,mean_accepted_prefix"
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.report.csv_row(),
            self.heuristic,
            self.schedule_steps,
            self.block_size,
            self.topk_match,
            self.tau,
            opt(&self.agreement),
            self.speedup,
            self.flop_speedup,
            opt(&self.mean_accepted_prefix)
        )
    }
}

/// Append `records` to `out` (or stdout). CSV files get a header when new;
/// `header` is written first, as a JSON line or a `#` comment line.
pub fn emit<R: Record>(records: &[R], format: Format, out: Option<&Path>, header: Option<&serde_json::Value>) -> Result<()> {
    let mut text = String::new();
    let fresh = out.is_none_or(|p| std::fs::metadata(p).map_or(true, |m| m.len() == 0));
    match format {
        Format::Json => {
            if let Some(h) = header {
                text.push_str(&serde_json::to_string(h)?);
                text.push('\n');
            }
            for r in records {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
        }
        Format::Csv => {
            if let Some(h) = header {
                text.push_str("# ");
                text.push_str(&serde_json::to_string(h)?);
                text.push('\n');
            }
            if fresh {
                text.push_str(R::csv_header());
                text.push('\n');
            }
            for r in records {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
        }
    }
    match out {
        Some(path) => OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?
            .write_all(text.as_bytes())?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
