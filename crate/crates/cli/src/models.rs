//! Model sources: a weight file path, `rule:<p>[,vocab=N][,seed=S]`, or
//! `spec:d=..,h=..,layers=..,d_ff=..,vocab=..,max_len=..[,seed=S]`.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use dlmfp_core::model::{init_weights, load_weights, Attention, ModelSpec, Rule, RuleModel, TokenModel, Transformer};

/// Default vocabulary of rule models (ten tokens plus MASK).
pub const RULE_VOCAB: usize = 11;

pub type SharedModel = Arc<dyn TokenModel>;

/// Build the model named by `source`. Rule and spec sources take their
/// attention from `attention`; weight files carry their own.
pub fn load_model(source: &str, attention: Attention, seed: u64) -> Result<SharedModel> {
    if let Some(rest) = source.strip_prefix("rule:") {
        let mut parts = rest.split(',');
        let p: f64 = parts
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .with_context(|| format!("competence in {source:?}"))?;
        let (mut vocab, mut rule_seed) = (RULE_VOCAB, seed);
        for kv in parts {
            match kv.split_once('=') {
                Some(("vocab", v)) => vocab = v.trim().parse().context("rule vocab")?,
                Some(("seed", v)) => rule_seed = v.trim().parse().context("rule seed")?,
                _ => bail!("unknown rule option {kv:?}"),
            }
        }
        return Ok(Arc::new(RuleModel::new(Rule::Fibonacci, p, rule_seed, vocab, attention)?));
    }
    if let Some(rest) = source.strip_prefix("spec:") {
        let (spec, spec_seed) = parse_spec(rest, attention, seed)?;
        return Ok(Arc::new(Transformer::new(init_weights(&spec, spec_seed)?)?));
    }
    let weights = load_weights(source).with_context(|| format!("loading weights from {source}"))?;
    Ok(Arc::new(Transformer::new(weights)?))
}

/// `d=..,h=..,layers=..,d_ff=..,vocab=..,max_len=..[,seed=S][,causal]`.
pub fn parse_spec(text: &str, attention: Attention, seed: u64) -> Result<(ModelSpec, u64)> {
    let mut spec = ModelSpec {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        vocab: 11,
        max_len: 32,
        attention,
    };
    let mut seed = seed;
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if item == "causal" {
            spec.attention = Attention::Causal;
            continue;
        }
        if item == "bidirectional" {
            spec.attention = Attention::Bidirectional;
            continue;
        }
        let Some((key, value)) = item.split_once('=') else {
            bail!("spec item {item:?} is not key=value");
        };
        let n: u64 = value.trim().parse().with_context(|| format!("spec value {item:?}"))?;
        match key.trim() {
            "d" | "d_model" => spec.d_model = n as usize,
            "h" | "heads" => spec.n_heads = n as usize,
            "layers" => spec.n_layers = n as usize,
            "d_ff" => spec.d_ff = n as usize,
            "vocab" | "V" => spec.vocab = n as usize,
            "max_len" | "L" => spec.max_len = n as usize,
            "seed" => seed = n,
            other => bail!("unknown spec key {other:?}"),
        }
    }
    spec.validate()?;
    Ok((spec, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources() {
        let r = load_model("rule:0.9,vocab=7", Attention::Causal, 1).unwrap();
        assert_eq!((r.vocab_size(), r.attention()), (7, Attention::Causal));
        let t = load_model("spec:d=4,h=2,layers=2,d_ff=8,vocab=9,max_len=16", Attention::Bidirectional, 3).unwrap();
        assert_eq!(t.flop_spec().unwrap().n_layers, 2);
        assert!(load_model("rule:x", Attention::Causal, 0).is_err());
        assert!(load_model("spec:d=3,h=2", Attention::Causal, 0).is_err());
        assert!(load_model("/nonexistent/file.dlmw", Attention::Causal, 0).is_err());
    }
}
