use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dlmfp_core::denoise::{DenoiseConfig, Heuristic};
use dlmfp_core::diagnostics::{flops_analytic, kv_similarity_heatmap, memory_estimate, FlopMode, Projection};
use dlmfp_core::guided::{FallbackSource, GuidanceConfig, MatchRule};
use dlmfp_core::model::{init_weights, save_weights, Attention, ModelSpec};

mod config;
mod models;
mod report;
mod run;

use config::{parse_list, ConfigFile};
use models::{load_model, parse_spec};
use report::{emit, Format};
use run::{Job, Policy, Sweep};

/// Diffusion language-model decoding on toy models.
#[derive(Parser)]
#[command(name = "dlmfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded transformer weight file.
    MakeModel(MakeModelArgs),
    /// Decode one prompt and print a report.
    Decode(DecodeArgs),
    /// Sweep decode settings and print one record per cell.
    Bench(BenchArgs),
    /// K/V cosine-similarity heatmap of an uncached decode.
    Heatmap(HeatmapArgs),
    /// Analytic FLOPs and memory for one step.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct MakeModelArgs {
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    d_ff: usize,
    #[arg(long, default_value_t = 11)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    /// Causal attention (for guiders); bidirectional otherwise.
    #[arg(long)]
    causal: bool,
    #[arg(long, env = config::SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by `decode`, `bench` and `heatmap`. Unset flags fall
/// back to the `--config` file, then to defaults.
#[derive(Args, Clone)]
struct RunArgs {
    /// `key=value` file supplying any flag not given on the command line.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Diffusion model: weight file, `rule:<p>` or `spec:...`.
    #[arg(long)]
    dlm: Option<String>,
    /// Causal guider for guided policies.
    #[arg(long)]
    guider: Option<String>,
    /// Prompt file, one token id per line.
    #[arg(long)]
    prompt: Option<PathBuf>,
    /// Use a seeded recurrence prompt and score the output against it.
    #[arg(long)]
    rule_task: bool,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long)]
    heuristic: Option<String>,
    /// Denoising steps; defaults to one token per step.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    speculation_block: Option<usize>,
    #[arg(long)]
    topk_match: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// `dlm` or `ar`.
    #[arg(long)]
    fallback: Option<String>,
    /// `prefix` or `count`.
    #[arg(long = "match")]
    matching: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `json` (one object per line) or `csv`.
    #[arg(long)]
    format: Option<String>,
    /// Append the report here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// baseline, freecache, guided or guided_stochastic.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    policies: Option<String>,
    #[arg(long)]
    steps_list: Option<String>,
    #[arg(long)]
    block_sizes: Option<String>,
    #[arg(long)]
    topk_list: Option<String>,
    #[arg(long)]
    taus: Option<String>,
    /// Competences of a rule guider replacing `--guider`.
    #[arg(long)]
    agreements: Option<String>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// `K` or `V`.
    #[arg(long, default_value = "K")]
    kind: String,
}

#[derive(Args)]
struct FlopsArgs {
    /// Weight file or `spec:...`.
    #[arg(long)]
    model: String,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    /// `dlm`, `windowed` or `ar`.
    #[arg(long, default_value = "dlm")]
    mode: String,
    #[arg(long)]
    window: Option<usize>,
    /// Guider weight file or `spec:...`, counted in the memory estimate.
    #[arg(long)]
    guider: Option<String>,
    #[arg(long)]
    kv_cache: bool,
}

/// `RunArgs` merged with the config file.
struct Resolved {
    file: ConfigFile,
    args: RunArgs,
    seed: u64,
}

impl Resolved {
    fn new(args: RunArgs) -> Result<Self> {
        let file = match &args.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let seed = file.seed(args.seed)?;
        Ok(Self { file, args, seed })
    }

    fn format(&self) -> Result<Format> {
        self.file.pick(self.args.format.clone(), "format")?.as_deref().unwrap_or("json").parse()
    }

    fn out(&self) -> Result<Option<PathBuf>> {
        self.file.pick(self.args.out.clone(), "out")
    }

    fn policy(&self, flag: Option<String>) -> Result<Policy> {
        self.file.pick(flag, "policy")?.as_deref().unwrap_or("baseline").parse()
    }

    fn job(&self, policy: Policy) -> Result<Job> {
        let (f, a) = (&self.file, &self.args);
        let dlm_src: String = f.pick(a.dlm.clone(), "dlm")?.context("no diffusion model: pass --dlm")?;
        let dlm = load_model(&dlm_src, Attention::Bidirectional, self.seed)?;
        let guider = f
            .pick(a.guider.clone(), "guider")?
            .map(|src| load_model(&src, Attention::Causal, self.seed))
            .transpose()?;
        let rule_task = f.flag(a.rule_task, "rule-task")?;
        let prompt_file: Option<PathBuf> = f.pick(a.prompt.clone(), "prompt")?;
        let prompt = match (prompt_file, rule_task) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading prompt {}", path.display()))?;
                run::parse_prompt(&text)?
            }
            (None, true) => {
                let len = f.pick(a.prompt_len, "prompt-len")?.unwrap_or(8);
                run::rule_prompt(self.seed, len, dlm.vocab_size())
            }
            (None, false) => bail!("no prompt: pass --prompt FILE or --rule-task"),
        };
        let gen_len = f.pick(a.gen_len, "gen-len")?.unwrap_or(policy.default_gen_len());
        let heuristic: Heuristic = f.pick(a.heuristic.clone(), "heuristic")?.as_deref().unwrap_or("maskgit_confidence").parse()?;
        let steps = f.pick(a.steps, "steps")?.unwrap_or(gen_len);
        let block_size = f.pick(a.block_size, "block-size")?;
        let defaults = GuidanceConfig::default();
        let guidance = GuidanceConfig {
            speculation_block: f.pick(a.speculation_block, "speculation-block")?.unwrap_or(defaults.speculation_block),
            topk_match: f.pick(a.topk_match, "topk-match")?.unwrap_or(defaults.topk_match),
            tau: f.pick(a.tau, "tau")?.unwrap_or(defaults.tau),
            fallback: match f.pick(a.fallback.clone(), "fallback")? {
                Some(s) => s.parse::<FallbackSource>()?,
                None => defaults.fallback,
            },
            matching: match f.pick(a.matching.clone(), "match")? {
                Some(s) => s.parse::<MatchRule>()?,
                None => defaults.matching,
            },
            ..defaults
        };
        guidance.validate()?;
        Ok(Job {
            dlm,
            guider,
            prompt,
            rule_task,
            gen_len,
            policy,
            heuristic,
            steps,
            block_size,
            guidance,
        })
    }
}

fn make_model(a: MakeModelArgs) -> Result<()> {
    let spec = ModelSpec {
        d_model: a.d_model,
        n_heads: a.heads,
        n_layers: a.layers,
        d_ff: a.d_ff,
        vocab: a.vocab,
        max_len: a.max_len,
        attention: if a.causal { Attention::Causal } else { Attention::Bidirectional },
    };
    spec.validate()?;
    let weights = init_weights(&spec, a.seed)?;
    let checksum = save_weights(&weights, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let summary = json!({
        "path": a.out,
        "checksum": checksum,
        "params": weights.param_count(),
        "seed": a.seed,
    });
    println!("{summary}");
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let r = Resolved::new(a.run)?;
    let job = r.job(r.policy(a.policy)?)?;
    let (report, _) = run::execute(&job)?;
    emit(&[report], r.format()?, r.out()?.as_deref(), None)
}

fn bench(a: BenchArgs) -> Result<()> {
    let r = Resolved::new(a.run)?;
    let f = &r.file;
    let list = |flag: Option<String>, key: &str| f.pick(flag, key);
    let policies: Vec<Policy> = match list(a.policies, "policies")? {
        Some(s) => parse_list(&s)?,
        None => vec![Policy::Baseline, Policy::Freecache, Policy::Guided],
    };
    let first = *policies.first().context("no policies")?;
    let base = r.job(first)?;
    let sweep = Sweep {
        policies,
        steps: list(a.steps_list, "steps-list")?.map_or(Ok(vec![base.steps]), |s| parse_list(&s))?,
        block_sizes: list(a.block_sizes, "block-sizes")?.map_or_else(
            || Ok(vec![base.block_size.unwrap_or(dlmfp_core::freecache::DEFAULT_BLOCK_SIZE)]),
            |s| parse_list(&s),
        )?,
        topk: list(a.topk_list, "topk-list")?.map_or(Ok(vec![base.guidance.topk_match]), |s| parse_list(&s))?,
        taus: list(a.taus, "taus")?.map_or(Ok(vec![base.guidance.tau]), |s| parse_list(&s))?,
        agreements: list(a.agreements, "agreements")?.map_or(Ok(Vec::new()), |s| parse_list(&s))?,
    };
    let header = json!({
        "bench": {
            "seed": r.seed,
            "gen_len": base.gen_len,
            "prompt_len": base.prompt.len(),
            "heuristic": base.heuristic.name(),
            "defaults": {
                "block_size": dlmfp_core::freecache::DEFAULT_BLOCK_SIZE,
                "guided_max_output": run::GUIDED_MAX_OUTPUT,
                "speculation_block": base.guidance.speculation_block,
                "topk_match": GuidanceConfig::default().topk_match,
                "tau": GuidanceConfig::default().tau,
            },
            "sweep": sweep,
        }
    });
    let records = run::bench(&base, &sweep, r.seed)?;
    emit(&records, r.format()?, r.out()?.as_deref(), Some(&header))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let r = Resolved::new(a.run)?;
    let job = r.job(Policy::Baseline)?;
    let kind: Projection = a.kind.parse()?;
    let mut cfg = DenoiseConfig::new(job.steps, job.heuristic);
    cfg.block_size = job.block_size;
    let map = kv_similarity_heatmap(job.dlm.as_ref(), &job.prompt, job.gen_len, &cfg, a.layer, kind)?;
    match r.out()? {
        Some(path) => {
            let meta = map.save(&path)?;
            let (clean, masked) = map.class_means();
            println!(
                "{}",
                json!({ "csv": path, "metadata": meta, "steps": map.steps(), "positions": map.positions(),
                        "clean_mean": clean, "masked_mean": masked })
            );
        }
        None => map.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let (spec, _) = load_spec(&a.model, Attention::Bidirectional)?;
    let guider = a.guider.as_deref().map(|g| load_spec(g, Attention::Causal)).transpose()?;
    let seq_len = a.seq_len.unwrap_or(spec.max_len);
    let prefix_len = a.prefix_len.unwrap_or(seq_len);
    let mode = match a.mode.as_str() {
        "dlm" => FlopMode::DlmStep,
        "ar" => FlopMode::ArDecodeStep,
        "windowed" => FlopMode::DlmWindowedStep(a.window.context("windowed mode needs --window")?),
        other => bail!("unknown flop mode {other:?}"),
    };
    let f = flops_analytic(&spec, seq_len, prefix_len, mode);
    let sites: serde_json::Map<String, serde_json::Value> = f.iter().map(|(s, n)| (s.name().to_string(), json!(n))).collect();
    let memory = memory_estimate(&spec, seq_len, a.kv_cache, guider.as_ref().map(|(g, _)| g));
    println!(
        "{}",
        json!({ "mode": mode, "seq_len": seq_len, "prefix_len": prefix_len, "sites": sites,
                "total": f.total(), "memory": memory })
    );
    Ok(())
}

fn load_spec(source: &str, attention: Attention) -> Result<(ModelSpec, u64)> {
    match source.strip_prefix("spec:") {
        Some(rest) => parse_spec(rest, attention, 0),
        None => {
            let w = dlmfp_core::model::load_weights(source).with_context(|| format!("loading weights from {source}"))?;
            Ok((w.spec, 0))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeModel(a) => make_model(a),
        Command::Decode(a) => decode(a),
        Command::Bench(a) => bench(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Flops(a) => flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
