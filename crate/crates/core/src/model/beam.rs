use std::cmp::Ordering;

use super::Model;
use crate::data::{TokenBatch, BOS, EOS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor};

/// Next-token log-probabilities for a batch of equal-length prefixes.
pub trait TokenScorer {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_len: 64,
            length_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, excluding the start symbol and the end symbol.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, including the end symbol if emitted.
    pub log_prob: f64,
    /// `log_prob / length^penalty`.
    pub score: f64,
    /// False when `max_len` was reached before the end symbol.
    pub finished: bool,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

/// Beam search from `BOS`. Candidates are ranked by cumulative
/// log-probability, ties broken by lower token id and then by parent beam
/// order; finished hypotheses compete on length-normalized score.
pub fn beam_search<S: TokenScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|(p, _)| p.clone()).collect();
        let scores = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, ((_, lp), row)) in alive.iter().zip(&scores).enumerate() {
            cands.extend(row.iter().enumerate().map(|(tok, &s)| (lp + s, tok, bi)));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.width);
        for &(lp, tok, bi) in cands.iter().take(cfg.width) {
            let prefix = &alive[bi].0;
            if tok == EOS {
                let tokens = prefix[1..].to_vec();
                finished.push(Hypothesis {
                    score: normalized(lp, tokens.len() + 1, cfg.length_penalty),
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                next.push((p, lp));
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= cfg.width {
            break;
        }
    }
    let best = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
    };
    if let Some(h) = best(finished) {
        return Ok(h);
    }
    let unfinished = alive
        .into_iter()
        .map(|(p, lp)| Hypothesis {
            score: normalized(lp, p.len() - 1, cfg.length_penalty),
            tokens: p[1..].to_vec(),
            log_prob: lp,
            finished: false,
        })
        .collect();
    best(unfinished).ok_or_else(|| Error::Usage("beam search produced no hypothesis".into()))
}

/// Scores prefixes with a model's decoder against fixed encoder states of one lane.
pub struct ModelScorer<'a, F: Scalar> {
    model: &'a Model<F>,
    states: Tensor<F>,
    src_valid: Vec<bool>,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    /// `states` is `[1×n×d]`, `src_valid` has `n` entries.
    pub fn new(model: &'a Model<F>, states: Tensor<F>, src_valid: Vec<bool>) -> Self {
        Self {
            model,
            states,
            src_valid,
        }
    }
}

impl<F: Scalar> TokenScorer for ModelScorer<'_, F> {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let p = prefixes.len();
        let mut g = Graph::no_grad();
        let sh = self.states.shape();
        let tiled: Vec<F> = (0..p).flat_map(|_| self.states.data().iter().copied()).collect();
        let enc = g.constant(Tensor::new(vec![p, sh[1], sh[2]], tiled)?)?;
        let valid: Vec<bool> = (0..p).flat_map(|_| self.src_valid.iter().copied()).collect();
        let tgt = TokenBatch::from_rows(prefixes);
        let logits = self.model.decode(&mut g, &tgt, enc, &valid)?;
        let lv = g.value(logits);
        let vocab = lv.shape()[2];
        let m = tgt.len;
        Ok((0..p)
            .map(|b| {
                let row: Vec<f64> = lv.data()[(b * m + m - 1) * vocab..(b * m + m) * vocab]
                    .iter()
                    .map(|x| x.as_f64())
                    .collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.into_iter().map(|x| x - lse).collect()
            })
            .collect())
    }
}

impl<F: Scalar> Model<F> {
    /// Encodes one lane and beam-decodes from it. Returns the best hypothesis
    /// and the memory for the next timestep.
    pub fn generate(
        &self,
        src: &[usize],
        memory: &Tensor<F>,
        reset: bool,
        cfg: &BeamConfig,
    ) -> Result<(Hypothesis, Tensor<F>)> {
        let mut g = Graph::no_grad();
        let batch = TokenBatch::from_rows(&[src.to_vec()]);
        let m = g.constant(memory.clone())?;
        let enc = self.encode(&mut g, &batch, m, &crate::data::ResetFlags(vec![reset]))?;
        let mut scorer = ModelScorer::new(self, g.value(enc.states).clone(), batch.valid.clone());
        let hyp = beam_search(&mut scorer, cfg)?;
        Ok((hyp, g.value(enc.next_memory).clone()))
    }
}
