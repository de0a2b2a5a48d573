//! Executing one decode job and sweeps of them.

use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use dlmfp_core::denoise::{decode_baseline, DenoiseConfig, Heuristic};
use dlmfp_core::freecache::{decode_freecache, DEFAULT_BLOCK_SIZE};
use dlmfp_core::guided::{decode_guided, GuidanceConfig, GuidanceMode};
use dlmfp_core::model::{fnv1a, rule_match_rate, Attention, Rule, RuleModel};
use dlmfp_core::rng::SplitMix64;
use dlmfp_core::trace::Decoded;

use crate::models::SharedModel;
use crate::report::{BenchRecord, Report, SCHEMA_VERSION};

/// Longest generation of the guided configuration.
pub const GUIDED_MAX_OUTPUT: usize = 1024;
/// Longest generation of the uncached and cached configurations.
pub const DEFAULT_MAX_OUTPUT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Baseline,
    Freecache,
    Guided,
    GuidedStochastic,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::Freecache => "freecache",
            Policy::Guided => "guided",
            Policy::GuidedStochastic => "guided_stochastic",
        }
    }

    pub fn is_guided(self) -> bool {
        matches!(self, Policy::Guided | Policy::GuidedStochastic)
    }

    pub fn default_gen_len(self) -> usize {
        if self.is_guided() {
            GUIDED_MAX_OUTPUT
        } else {
            DEFAULT_MAX_OUTPUT
        }
    }
}

impl FromStr for Policy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Policy::Baseline,
            "freecache" => Policy::Freecache,
            "guided" => Policy::Guided,
            "guided_stochastic" | "guided-stochastic" => Policy::GuidedStochastic,
            _ => bail!("unknown policy {s:?}"),
        })
    }
}

#[derive(Clone)]
pub struct Job {
    pub dlm: SharedModel,
    pub guider: Option<SharedModel>,
    pub prompt: Vec<u32>,
    pub rule_task: bool,
    pub gen_len: usize,
    pub policy: Policy,
    pub heuristic: Heuristic,
    pub steps: usize,
    /// `None`: whole-region unmasking for the baseline, the default block
    /// size for cached and guided decoding.
    pub block_size: Option<usize>,
    pub guidance: GuidanceConfig,
}

/// Prompt of the rule task: the recurrence started from two seeded tokens.
pub fn rule_prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let m = (vocab - 1) as u64;
    let mut rng = SplitMix64::new(seed);
    Rule::Fibonacci.sequence(rng.below(m) as u32, rng.below(m) as u32, len, m as u32)
}

/// One token id per line; blank lines and `#` comments skipped.
pub fn parse_prompt(text: &str) -> Result<Vec<u32>> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(n, l)| l.parse::<u32>().with_context(|| format!("prompt line {}: {l:?}", n + 1)))
        .collect()
}

pub fn tokens_checksum(tokens: &[u32]) -> u64 {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fnv1a(&bytes)
}

pub fn execute(job: &Job) -> Result<(Report, Decoded)> {
    let started = Instant::now();
    let decoded = match job.policy {
        Policy::Baseline => {
            let mut cfg = DenoiseConfig::new(job.steps, job.heuristic);
            cfg.block_size = job.block_size;
            decode_baseline(job.dlm.as_ref(), &job.prompt, job.gen_len, &cfg)?
        }
        Policy::Freecache => {
            let cfg = DenoiseConfig::new(job.steps, job.heuristic).with_blocks(job.block_size.unwrap_or(DEFAULT_BLOCK_SIZE));
            decode_freecache(job.dlm.as_ref(), &job.prompt, job.gen_len, &cfg)?
        }
        Policy::Guided | Policy::GuidedStochastic => {
            let guider = job.guider.as_ref().context("guided policies need --guider")?;
            let mut cfg = job.guidance;
            if job.policy == Policy::GuidedStochastic {
                cfg.mode = GuidanceMode::Stochastic;
            }
            decode_guided(job.dlm.as_ref(), guider.as_ref(), &job.prompt, job.gen_len, &cfg, job.block_size)?
        }
    };
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let start = job.prompt.len();
    let rule_match = job
        .rule_task
        .then(|| rule_match_rate(Rule::Fibonacci, &decoded.tokens, start..start + job.gen_len, job.dlm.vocab_size()));
    let report = Report {
        schema: SCHEMA_VERSION,
        policy: job.policy.name().to_string(),
        gen_len: job.gen_len,
        steps: decoded.trace.steps.len(),
        dlm_passes: decoded.trace.dlm_passes(),
        ar_passes: decoded.trace.ar_passes(),
        total_flops: decoded.trace.total_flops.total(),
        rule_match_rate: rule_match,
        wall_ms,
        tokens_checksum: tokens_checksum(&decoded.tokens),
    };
    Ok((report, decoded))
}

/// Sweep axes; each policy sweeps only the axes it reads.
#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    pub policies: Vec<Policy>,
    pub steps: Vec<usize>,
    pub block_sizes: Vec<usize>,
    pub topk: Vec<usize>,
    pub taus: Vec<f64>,
    /// Competence of a rule guider; empty to use the configured guider.
    pub agreements: Vec<f64>,
}

#[derive(Clone)]
struct Cell {
    job: Job,
    agreement: Option<f64>,
}

fn cells(base: &Job, sweep: &Sweep, seed: u64) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for &policy in &sweep.policies {
        let steps: &[usize] = if policy.is_guided() { &[base.steps] } else { &sweep.steps };
        let blocks: Vec<Option<usize>> = match policy {
            Policy::Baseline => vec![base.block_size],
            _ => sweep.block_sizes.iter().map(|&b| Some(b)).collect(),
        };
        let topk: &[usize] = if policy.is_guided() { &sweep.topk } else { &sweep.topk[..1] };
        let taus: &[f64] = if policy == Policy::GuidedStochastic { &sweep.taus } else { &sweep.taus[..1] };
        let agreements: Vec<Option<f64>> = if policy.is_guided() && !sweep.agreements.is_empty() {
            sweep.agreements.iter().map(|&p| Some(p)).collect()
        } else {
            vec![None]
        };
        for &t in steps {
            for &b in &blocks {
                for &k in topk {
                    for &tau in taus {
                        for &p in &agreements {
                            let mut job = base.clone();
                            job.policy = policy;
                            job.steps = t;
                            job.block_size = b;
                            job.guidance.topk_match = k;
                            job.guidance.tau = tau;
                            if let Some(p) = p {
                                let vocab = base.dlm.vocab_size();
                                job.guider = Some(std::sync::Arc::new(RuleModel::new(
                                    Rule::Fibonacci,
                                    p,
                                    seed,
                                    vocab,
                                    Attention::Causal,
                                )?));
                            }
                            out.push(Cell { job, agreement: p });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Run every cell in parallel; records come back in sweep order.
pub fn bench(base: &Job, sweep: &Sweep, seed: u64) -> Result<Vec<BenchRecord>> {
    let reference = Job {
        policy: Policy::Baseline,
        steps: base.gen_len,
        block_size: None,
        ..base.clone()
    };
    let (ref_report, _) = execute(&reference)?;
    let cells = cells(base, sweep, seed)?;
    cells
        .par_iter()
        .map(|cell| {
            let (report, decoded) = execute(&cell.job)?;
            let guided = &decoded.trace.guided;
            let mean_accepted_prefix =
                (!guided.is_empty()).then(|| guided.iter().map(|g| g.k as f64).sum::<f64>() / guided.len() as f64);
            Ok(BenchRecord {
                speedup: ref_report.dlm_passes as f64 / report.dlm_passes as f64,
                flop_speedup: if report.total_flops == 0 {
                    1.0
                } else {
                    ref_report.total_flops as f64 / report.total_flops as f64
                },
                heuristic: cell.job.heuristic.name().to_string(),
                schedule_steps: cell.job.steps,
                block_size: cell.job.block_size.unwrap_or(report.gen_len),
                topk_match: cell.job.guidance.topk_match,
                tau: cell.job.guidance.tau,
                agreement: cell.agreement,
                mean_accepted_prefix,
                report,
            })
        })
        .collect()
}
