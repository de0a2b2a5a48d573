use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::cache::KvCache;
use crate::model::spec::{Attention, ModelSpec};
use crate::model::weights::Weights;
use crate::model::{check_window, TokenModel};
use crate::tensor::{gelu, matmul, rms_norm_rows, softmax_prefix, FlopCounter, Site, Tensor2D};

/// Pre-norm transformer over [`Weights`].
#[derive(Debug, Clone)]
pub struct Transformer {
    weights: Weights,
}

/// Logits for every position plus the K/V it produced.
#[derive(Debug, Clone)]
pub struct FullForward {
    pub logits: Tensor2D,
    pub cache: KvCache,
}

impl Transformer {
    pub fn new(weights: Weights) -> Result<Self> {
        weights.spec.validate()?;
        if !weights.all_finite() {
            return Err(Error::config("weights contain non-finite entries"));
        }
        Ok(Self { weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.weights.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Full pass returning the per-layer K/V alongside the logits.
    pub fn forward_with_cache(&self, tokens: &[u32], flops: &mut FlopCounter) -> Result<FullForward> {
        let mut cache = self.new_cache();
        let logits = self.forward_windowed(tokens, &mut cache, 0..tokens.len(), flops)?;
        Ok(FullForward { logits, cache })
    }

    /// Attention probabilities of one layer, one `L × L` matrix per head.
    pub fn attention_probs(&self, tokens: &[u32], layer: usize) -> Result<Vec<Tensor2D>> {
        if layer >= self.spec().n_layers {
            return Err(Error::config(format!("layer {layer} out of range")));
        }
        let mut cache = self.new_cache();
        let mut sink = Vec::new();
        self.run(
            tokens,
            &mut cache,
            0..tokens.len(),
            &mut FlopCounter::new(),
            Some((layer, &mut sink)),
        )?;
        Ok(sink)
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        let spec = self.spec();
        if tokens.len() > spec.max_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                spec.max_len
            )));
        }
        if let Some((i, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= spec.vocab) {
            return Err(Error::input(format!(
                "token {t} at position {i} outside vocabulary of {}",
                spec.vocab
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32], window: &Range<usize>) -> Tensor2D {
        let d = self.spec().d_model;
        let mut x = Tensor2D::zeros(window.len(), d);
        for (r, pos) in window.clone().enumerate() {
            let tok = self.weights.tok_emb.row(tokens[pos] as usize);
            let p = self.weights.pos_emb.row(pos);
            for ((o, &a), &b) in x.row_mut(r).iter_mut().zip(tok).zip(p) {
                *o = a + b;
            }
        }
        x
    }

    fn run(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        window: Range<usize>,
        flops: &mut FlopCounter,
        mut capture: Option<(usize, &mut Vec<Tensor2D>)>,
    ) -> Result<Tensor2D> {
        self.validate_tokens(tokens)?;
        check_window(tokens, cache, &window)?;
        let spec = *self.spec();
        let len = tokens.len();
        let start = window.start;
        let n = window.len();
        let dh = spec.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        cache.ensure_rows(len);

        let mut x = self.embed(tokens, &window);
        for (li, layer) in self.weights.layers.iter().enumerate() {
            let h = rms_norm_rows(&x, &layer.attn_norm)?;
            let q = matmul(&h, &layer.wq, flops, Site::QProj)?;
            let k = matmul(&h, &layer.wk, flops, Site::KProj)?;
            let v = matmul(&h, &layer.wv, flops, Site::VProj)?;
            cache.write(li, start, &k, &v);
            let keys = cache.keys(li).slice_rows(0, len);
            let values = cache.values(li).slice_rows(0, len);

            let mut mixed = Tensor2D::zeros(n, spec.d_model);
            for head in 0..spec.n_heads {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.slice_cols(cols.start, cols.end);
                let kt = keys.slice_cols(cols.start, cols.end).transpose();
                let vh = values.slice_cols(cols.start, cols.end);
                let mut scores = matmul(&qh, &kt, flops, Site::Scores)?;
                for r in 0..n {
                    let visible = match spec.attention {
                        Attention::Bidirectional => len,
                        Attention::Causal => start + r + 1,
                    };
                    let row = scores.row_mut(r);
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_prefix(row, visible);
                }
                let out = matmul(&scores, &vh, flops, Site::Mix)?;
                for r in 0..n {
                    mixed.row_mut(r)[cols.clone()].copy_from_slice(out.row(r));
                }
                if let Some((target, sink)) = capture.as_mut() {
                    if *target == li {
                        sink.push(scores);
                    }
                }
            }
            let attn = matmul(&mixed, &layer.wo, flops, Site::OutProj)?;
            add_in_place(&mut x, &attn);

            let h2 = rms_norm_rows(&x, &layer.ffn_norm)?;
            let mut hidden = matmul(&h2, &layer.w1, flops, Site::Ffn1)?;
            hidden.data_mut().iter_mut().for_each(|a| *a = gelu(*a));
            let ffn = matmul(&hidden, &layer.w2, flops, Site::Ffn2)?;
            add_in_place(&mut x, &ffn);
        }
        let normed = rms_norm_rows(&x, &self.weights.final_norm)?;
        let logits = matmul(&normed, &self.weights.head, flops, Site::Head)?;
        debug_assert!(logits.all_finite());
        Ok(logits)
    }
}

fn add_in_place(x: &mut Tensor2D, y: &Tensor2D) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

impl TokenModel for Transformer {
    fn vocab_size(&self) -> usize {
        self.spec().vocab
    }

    fn attention(&self) -> Attention {
        self.spec().attention
    }

    fn max_len(&self) -> usize {
        self.spec().max_len
    }

    fn flop_spec(&self) -> Option<&ModelSpec> {
        Some(self.spec())
    }

    fn new_cache(&self) -> KvCache {
        KvCache::new(self.spec().n_layers, self.spec().d_model)
    }

    fn forward_windowed(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        window: Range<usize>,
        flops: &mut FlopCounter,
    ) -> Result<Tensor2D> {
        self.run(tokens, cache, window, flops, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;
    use crate::rng::SplitMix64;
    use crate::tensor::{rms_norm, softmax_row};

    fn spec(layers: usize, attention: Attention) -> ModelSpec {
        ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_layers: layers,
            d_ff: 16,
            vocab: 11,
            max_len: 32,
            attention,
        }
    }

    fn model(layers: usize, attention: Attention, seed: u64) -> Transformer {
        Transformer::new(init_weights(&spec(layers, attention), seed).unwrap()).unwrap()
    }

    fn random_tokens(n: usize, vocab: u64, seed: u64) -> Vec<u32> {
        let mut r = SplitMix64::new(seed);
        (0..n).map(|_| r.below(vocab) as u32).collect()
    }

    /// Per-position loops over plain `f64` vectors; shares nothing with `run`
    /// beyond the weights.
    fn naive_one_layer(w: &Weights, tokens: &[u32]) -> Vec<Vec<f64>> {
        let s = w.spec;
        let (d, dh, l) = (s.d_model, s.head_dim(), tokens.len());
        let vecmat = |v: &[f64], m: &Tensor2D| -> Vec<f64> {
            (0..m.cols())
                .map(|j| (0..m.rows()).map(|i| v[i] * m.get(i, j) as f64).sum())
                .collect()
        };
        let norm = |v: &[f64], g: &[f32]| -> Vec<f64> {
            let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
            v.iter().zip(g).map(|(x, &g)| x / (ms + 1e-6).sqrt() * g as f64).collect()
        };
        let layer = &w.layers[0];
        let x: Vec<Vec<f64>> = (0..l)
            .map(|i| {
                (0..d)
                    .map(|c| w.tok_emb.get(tokens[i] as usize, c) as f64 + w.pos_emb.get(i, c) as f64)
                    .collect()
            })
            .collect();
        let h: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &layer.attn_norm)).collect();
        let q: Vec<_> = h.iter().map(|r| vecmat(r, &layer.wq)).collect();
        let k: Vec<_> = h.iter().map(|r| vecmat(r, &layer.wk)).collect();
        let v: Vec<_> = h.iter().map(|r| vecmat(r, &layer.wv)).collect();
        let mut out = Vec::new();
        for i in 0..l {
            let mut mixed = vec![0f64; d];
            for hd in 0..s.n_heads {
                let c0 = hd * dh;
                let visible = if s.attention == Attention::Causal { i + 1 } else { l };
                let sc: Vec<f64> = (0..visible)
                    .map(|j| (0..dh).map(|c| q[i][c0 + c] * k[j][c0 + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|s| (s - m).exp()).sum();
                for j in 0..visible {
                    let p = (sc[j] - m).exp() / z;
                    for c in 0..dh {
                        mixed[c0 + c] += p * v[j][c0 + c];
                    }
                }
            }
            let attn = vecmat(&mixed, &layer.wo);
            let x1: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let h2 = norm(&x1, &layer.ffn_norm);
            let hidden: Vec<f64> = vecmat(&h2, &layer.w1)
                .into_iter()
                .map(|a| {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    0.5 * a * (1.0 + (c * (a + 0.044715 * a * a * a)).tanh())
                })
                .collect();
            let f = vecmat(&hidden, &layer.w2);
            let x2: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
            out.push(vecmat(&norm(&x2, &w.final_norm), &w.head));
        }
        out
    }

    #[test]
    fn single_position_is_finite() {
        let m = model(2, Attention::Bidirectional, 1);
        let logits = m.forward_full(&[3], &mut FlopCounter::new()).unwrap();
        assert_eq!((logits.rows(), logits.cols()), (1, 11));
        assert!(logits.all_finite());
    }

    #[test]
    fn matches_naive_oracle() {
        for attention in [Attention::Bidirectional, Attention::Causal] {
            let m = model(1, attention, 21);
            let tokens = [4, 10, 0, 7];
            let got = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
            let want = naive_one_layer(m.weights(), &tokens);
            for i in 0..4 {
                for j in 0..11 {
                    let (g, w) = (got.get(i, j) as f64, want[i][j]);
                    assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{attention:?} ({i},{j}) {g} vs {w}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = model(1, Attention::Bidirectional, 0);
        assert!(matches!(m.forward_full(&[11], &mut FlopCounter::new()), Err(Error::Input(_))));
        let long = vec![0; 33];
        assert!(matches!(m.forward_full(&long, &mut FlopCounter::new()), Err(Error::Input(_))));
    }

    #[test]
    fn causal_prefix_is_suffix_invariant() {
        let m = model(3, Attention::Causal, 5);
        let a = random_tokens(12, 11, 1);
        let full_a = m.forward_full(&a, &mut FlopCounter::new()).unwrap();
        for i in 0..11 {
            let mut b = a.clone();
            for t in b.iter_mut().skip(i + 1) {
                *t = (*t + 3) % 11;
            }
            let full_b = m.forward_full(&b, &mut FlopCounter::new()).unwrap();
            for r in 0..=i {
                let bits = |t: &Tensor2D| t.row(r).iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&full_a), bits(&full_b), "row {r} changed after editing > {i}");
            }
        }
    }

    #[test]
    fn bidirectional_sees_the_future() {
        let m = model(2, Attention::Bidirectional, 9);
        let a = random_tokens(8, 10, 4);
        let base = m.forward_full(&a, &mut FlopCounter::new()).unwrap();
        let mut b = a.clone();
        b[7] = (b[7] + 1) % 10;
        let other = m.forward_full(&b, &mut FlopCounter::new()).unwrap();
        assert_ne!(base.row(0), other.row(0));
    }

    #[test]
    fn layer0_kv_is_position_local() {
        let m = model(2, Attention::Bidirectional, 2);
        let a = random_tokens(10, 11, 8);
        let mut b = a.clone();
        b[3] = (b[3] + 5) % 11;
        b[9] = (b[9] + 1) % 11;
        let fa = m.forward_with_cache(&a, &mut FlopCounter::new()).unwrap();
        let fb = m.forward_with_cache(&b, &mut FlopCounter::new()).unwrap();
        for pos in [0, 1, 2, 4, 5, 6, 7, 8] {
            assert_eq!(fa.cache.keys(0).row(pos), fb.cache.keys(0).row(pos));
            assert_eq!(fa.cache.values(0).row(pos), fb.cache.values(0).row(pos));
        }
        // and matches the direct projection of the embedding
        let w = m.weights();
        let mut emb = w.tok_emb.row(a[5] as usize).to_vec();
        for (e, p) in emb.iter_mut().zip(w.pos_emb.row(5)) {
            *e += p;
        }
        let h = Tensor2D::from_vec(1, 8, rms_norm(&emb, &w.layers[0].attn_norm).unwrap()).unwrap();
        let k = matmul(&h, &w.layers[0].wk, &mut FlopCounter::new(), Site::KProj).unwrap();
        assert_eq!(k.row(0), fa.cache.keys(0).row(5));
    }

    #[test]
    fn attention_rows_are_distributions() {
        for attention in [Attention::Bidirectional, Attention::Causal] {
            let m = model(2, attention, 13);
            let tokens = random_tokens(9, 11, 2);
            for layer in 0..2 {
                for probs in m.attention_probs(&tokens, layer).unwrap() {
                    for r in 0..probs.rows() {
                        let sum: f64 = probs.row(r).iter().map(|&p| p as f64).sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                        if attention == Attention::Causal {
                            assert!(probs.row(r)[r + 1..].iter().all(|&p| p == 0.0));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn windowed_full_window_equals_full() {
        let m = model(2, Attention::Bidirectional, 4);
        let tokens = random_tokens(10, 11, 6);
        let full = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
        let mut cache = m.new_cache();
        let win = m.forward_windowed(&tokens, &mut cache, 0..10, &mut FlopCounter::new()).unwrap();
        assert_eq!(full, win);
    }

    #[test]
    fn one_layer_window_over_clean_prefix_is_exact() {
        let m = model(1, Attention::Bidirectional, 17);
        let tokens = random_tokens(12, 11, 3);
        let full = m.forward_with_cache(&tokens, &mut FlopCounter::new()).unwrap();
        for frozen in 0..12 {
            let mut cache = full.cache.clone();
            cache.freeze_to(frozen).unwrap();
            let win = m
                .forward_windowed(&tokens, &mut cache, frozen..12, &mut FlopCounter::new())
                .unwrap();
            for r in 0..12 - frozen {
                for (a, b) in win.row(r).iter().zip(full.logits.row(frozen + r)) {
                    assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn window_must_start_at_frozen_prefix() {
        let m = model(1, Attention::Bidirectional, 0);
        let tokens = random_tokens(6, 11, 0);
        let mut cache = m.forward_with_cache(&tokens, &mut FlopCounter::new()).unwrap().cache;
        cache.freeze_to(2).unwrap();
        let err = m.forward_windowed(&tokens, &mut cache, 3..6, &mut FlopCounter::new());
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = m.forward_windowed(&tokens, &mut cache, 2..5, &mut FlopCounter::new());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_used_by_attention_agrees_with_public_kernel() {
        let mut row = vec![0.3f32, -1.0, 2.0, 0.0];
        softmax_prefix(&mut row, 3);
        let want = softmax_row(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(&row[..3], &want[..]);
        assert_eq!(row[3], 0.0);
    }
}
