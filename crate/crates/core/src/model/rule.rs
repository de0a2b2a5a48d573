//! Rule-based stand-in for a pretrained model.
//!
//! The "language" is a deterministic recurrence over the non-mask tokens.
//! A [`RuleModel`] knows the recurrence but is only right with probability
//! `competence` per hop; a prediction that has to chain through `k` masked
//! positions is right with probability `competence^k` and is emitted with
//! proportionally lower confidence. Every draw is a pure function of
//! `(seed, position, prefix)`, so identical inputs give identical outputs
//! and causal models never look past the position they predict.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cache::KvCache;
use crate::model::spec::{Attention, ModelSpec};
use crate::model::{check_window, TokenModel};
use crate::rng::{counter_u64, unit_f64};
use crate::tensor::{FlopCounter, Tensor2D};

/// Logit of the emitted token for a prediction one hop from clean context.
const CONFIDENCE: f32 = 8.0;
/// Logit given to MASK so it is never emitted.
const MASK_LOGIT: f32 = -1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `t[i] = (t[i-1] + t[i-2]) mod m`
    #[default]
    Fibonacci,
    /// `t[i] = (t[i-1] + 1) mod m`
    Successor,
}

impl Rule {
    /// Next token given the two predecessors (`prev1 = t[i-1]`).
    pub fn next(self, prev1: u32, prev2: u32, modulus: u32) -> u32 {
        match self {
            Rule::Fibonacci => ((prev1 as u64 + prev2 as u64) % modulus as u64) as u32,
            Rule::Successor => ((prev1 as u64 + 1) % modulus as u64) as u32,
        }
    }

    /// `len` tokens following the recurrence from `(a, b)`.
    pub fn sequence(self, a: u32, b: u32, len: usize, modulus: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let t = match i {
                0 => a % modulus,
                1 => b % modulus,
                _ => self.next(out[i - 1], out[i - 2], modulus),
            };
            out.push(t);
        }
        out
    }

    fn at(self, seq: &[u32], i: usize, modulus: u32) -> u32 {
        let p1 = if i >= 1 { seq[i - 1] } else { 0 };
        let p2 = if i >= 2 { seq[i - 2] } else { 0 };
        self.next(p1, p2, modulus)
    }
}

/// Fraction of positions in `range` whose token follows the rule from its
/// two predecessors.
pub fn rule_match_rate(rule: Rule, tokens: &[u32], range: Range<usize>, vocab: usize) -> f64 {
    if range.is_empty() {
        return 1.0;
    }
    let m = (vocab - 1) as u32;
    let hits = range
        .clone()
        .filter(|&i| tokens[i] == rule.at(tokens, i, m))
        .count();
    hits as f64 / range.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleModel {
    pub rule: Rule,
    pub competence: f64,
    pub seed: u64,
    pub vocab: usize,
    pub attention: Attention,
}

/// One prediction: what the model emits, what the rule says, and how many
/// masked hops it chained through.
#[derive(Debug, Clone, Copy)]
struct Guess {
    chosen: u32,
    runner_up: Option<u32>,
    depth: u32,
}

impl RuleModel {
    pub fn new(rule: Rule, competence: f64, seed: u64, vocab: usize, attention: Attention) -> Result<Self> {
        if !(0.0..=1.0).contains(&competence) {
            return Err(Error::config(format!("competence {competence} outside [0, 1]")));
        }
        if vocab < 2 {
            return Err(Error::config("vocab must hold at least one token plus MASK"));
        }
        Ok(Self {
            rule,
            competence,
            seed,
            vocab,
            attention,
        })
    }

    fn modulus(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    fn prefix_key(&self) -> u64 {
        counter_u64(self.seed, 0x5eed)
    }

    fn extend_key(key: u64, token: u32) -> u64 {
        counter_u64(key, token as u64)
    }

    /// Draw for position `pos` whose prefix hashes to `key`.
    fn guess(&self, key: u64, pos: usize, correct: u32, depth: u32) -> Guess {
        let m = self.modulus();
        let bits = counter_u64(key, pos as u64);
        let right = unit_f64(bits) < self.competence.powi(depth as i32);
        let chosen = if right { correct } else { (correct + 1) % m };
        let runner_up = (m >= 3).then(|| {
            // uniform over tokens other than `chosen` and `correct`
            let mut excluded = vec![chosen.min(correct), chosen.max(correct)];
            excluded.dedup();
            let pool = m - excluded.len() as u32;
            let mut r = (counter_u64(bits, 1) % pool as u64) as u32;
            for e in excluded {
                if r >= e {
                    r += 1;
                }
            }
            r
        });
        Guess {
            chosen,
            runner_up,
            depth,
        }
    }

    /// Proposed tokens at `positions` of `sequence`, each correct with
    /// probability `competence`.
    pub fn rule_predict(&self, sequence: &[u32], positions: &[usize]) -> Result<Vec<u32>> {
        let m = self.modulus();
        positions
            .iter()
            .map(|&pos| {
                if pos > sequence.len() {
                    return Err(Error::input(format!("position {pos} past end of sequence")));
                }
                let key = sequence[..pos]
                    .iter()
                    .fold(self.prefix_key(), |k, &t| Self::extend_key(k, t));
                let correct = self.rule.at(sequence, pos, m);
                Ok(self.guess(key, pos, correct, 1).chosen)
            })
            .collect()
    }

    /// Left-to-right beliefs: clean tokens as-is, masked tokens replaced by
    /// the model's own chained guesses. Returns guesses for every position
    /// `0..=len` (the last one is the continuation past the end).
    fn beliefs(&self, tokens: &[u32]) -> Vec<Guess> {
        let mask = self.mask_id();
        let m = self.modulus();
        let mut belief: Vec<u32> = Vec::with_capacity(tokens.len() + 1);
        let mut depth: Vec<u32> = Vec::with_capacity(tokens.len() + 1);
        let mut guesses = Vec::with_capacity(tokens.len() + 1);
        let mut key = self.prefix_key();
        for pos in 0..=tokens.len() {
            let d1 = if pos >= 1 { depth[pos - 1] } else { 0 };
            let d2 = if pos >= 2 { depth[pos - 2] } else { 0 };
            let correct = self.rule.at(&belief, pos, m);
            let g = self.guess(key, pos, correct, 1 + d1.max(d2));
            guesses.push(g);
            if pos == tokens.len() {
                break;
            }
            let (b, dp) = if tokens[pos] == mask {
                (g.chosen, g.depth)
            } else {
                (tokens[pos], 0)
            };
            belief.push(b);
            depth.push(dp);
            key = Self::extend_key(key, b);
        }
        guesses
    }

    fn write_guess(&self, row: &mut [f32], g: Guess) {
        let margin = CONFIDENCE / g.depth as f32;
        row.iter_mut().for_each(|x| *x = 0.0);
        row[g.chosen as usize] = margin;
        if let Some(r) = g.runner_up {
            row[r as usize] = margin / 2.0;
        }
        row[self.mask_id() as usize] = MASK_LOGIT;
    }
}

impl TokenModel for RuleModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn attention(&self) -> Attention {
        self.attention
    }

    fn max_len(&self) -> usize {
        usize::MAX
    }

    fn flop_spec(&self) -> Option<&ModelSpec> {
        None
    }

    fn new_cache(&self) -> KvCache {
        KvCache::new(0, 0)
    }

    fn forward_windowed(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        window: Range<usize>,
        _flops: &mut FlopCounter,
    ) -> Result<Tensor2D> {
        check_window(tokens, cache, &window)?;
        if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= self.vocab) {
            return Err(Error::input(format!("token {t} at position {i} outside vocabulary")));
        }
        let guesses = self.beliefs(tokens);
        let mask = self.mask_id();
        let mut logits = Tensor2D::zeros(window.len(), self.vocab);
        for (r, pos) in window.enumerate() {
            let row = logits.row_mut(r);
            match self.attention {
                Attention::Causal => self.write_guess(row, guesses[pos + 1]),
                Attention::Bidirectional if tokens[pos] == mask => self.write_guess(row, guesses[pos]),
                Attention::Bidirectional => {
                    let clean = Guess {
                        chosen: tokens[pos],
                        runner_up: None,
                        depth: 1,
                    };
                    self.write_guess(row, clean);
                }
            }
        }
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::{argmax, top_k};

    fn model(p: f64, attention: Attention) -> RuleModel {
        RuleModel::new(Rule::Fibonacci, p, 7, 11, attention).unwrap()
    }

    #[test]
    fn competence_limits() {
        let seq = Rule::Fibonacci.sequence(1, 2, 40, 10);
        let positions: Vec<usize> = (2..40).collect();
        let perfect = model(1.0, Attention::Causal).rule_predict(&seq, &positions).unwrap();
        assert_eq!(perfect, seq[2..].to_vec());
        let hopeless = model(0.0, Attention::Causal).rule_predict(&seq, &positions).unwrap();
        assert!(hopeless.iter().zip(&seq[2..]).all(|(a, b)| a != b));
    }

    #[test]
    fn half_competence_monte_carlo() {
        let m = model(0.5, Attention::Causal);
        let mut rng = SplitMix64::new(2024);
        let mut hits = 0;
        let n = 10_000;
        for _ in 0..n {
            let len = 3 + rng.below(20) as usize;
            let seq: Vec<u32> = (0..len).map(|_| rng.below(10) as u32).collect();
            let pos = 2 + rng.below(len as u64 - 2) as usize;
            let want = Rule::Fibonacci.next(seq[pos - 1], seq[pos - 2], 10);
            if m.rule_predict(&seq, &[pos]).unwrap()[0] == want {
                hits += 1;
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 0.02, "agreement {rate}");
    }

    #[test]
    fn never_emits_mask_and_is_deterministic() {
        let m = model(0.6, Attention::Bidirectional);
        let mut tokens = Rule::Fibonacci.sequence(3, 4, 6, 10);
        tokens.extend([10; 10]);
        let a = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
        let b = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
        assert_eq!(a, b);
        for r in 0..a.rows() {
            assert_ne!(argmax(a.row(r)), 10);
            assert!(a.row(r).iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn confidence_decays_with_masked_hops() {
        let m = model(1.0, Attention::Bidirectional);
        let mut tokens = Rule::Fibonacci.sequence(3, 4, 4, 10);
        tokens.extend([10; 5]);
        let logits = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
        let maxes: Vec<f32> = (4..9).map(|r| logits.row(r).iter().cloned().fold(f32::MIN, f32::max)).collect();
        assert!(maxes.windows(2).all(|w| w[0] > w[1]), "{maxes:?}");
        // perfect competence chains the rule through the masks
        let drafts: Vec<u32> = (4..9).map(|r| argmax(logits.row(r)) as u32).collect();
        assert_eq!(drafts, Rule::Fibonacci.sequence(3, 4, 9, 10)[4..].to_vec());
    }

    #[test]
    fn causal_rows_predict_next_and_ignore_suffix() {
        let m = model(0.7, Attention::Causal);
        let seq = Rule::Fibonacci.sequence(5, 1, 12, 10);
        let a = m.forward_full(&seq, &mut FlopCounter::new()).unwrap();
        let mut edited = seq.clone();
        edited[9] = 0;
        edited[11] = 3;
        let b = m.forward_full(&edited, &mut FlopCounter::new()).unwrap();
        for r in 0..9 {
            assert_eq!(a.row(r), b.row(r));
        }
        for r in 1..11 {
            let next = m.rule_predict(&seq, &[r + 1]).unwrap()[0];
            assert_eq!(argmax(a.row(r)) as u32, next);
        }
    }

    #[test]
    fn runner_up_is_never_the_rule_token() {
        // so a hopeless guider agrees nowhere within its top-2
        let m = model(0.0, Attention::Causal);
        let seq = Rule::Fibonacci.sequence(2, 7, 30, 10);
        let logits = m.forward_full(&seq, &mut FlopCounter::new()).unwrap();
        for r in 1..29 {
            let top = top_k(logits.row(r), 2).unwrap();
            assert!(!top.contains(&(seq[r + 1] as usize)));
        }
    }

    #[test]
    fn match_rate() {
        let seq = Rule::Fibonacci.sequence(1, 1, 10, 10);
        assert_eq!(rule_match_rate(Rule::Fibonacci, &seq, 2..10, 11), 1.0);
        let mut bad = seq.clone();
        bad[5] = (bad[5] + 1) % 10;
        // position 5 breaks, and so do 6 and 7 which read it
        assert!((rule_match_rate(Rule::Fibonacci, &bad, 2..10, 11) - 5.0 / 8.0).abs() < 1e-12);
    }
}
