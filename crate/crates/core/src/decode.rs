//! Beam-search caption generation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::tokenize::{BOS, EOS, PAD};

/// Anything that can score the next token given a prefix.
pub trait NextToken {
    fn vocab_size(&self) -> usize;

    /// Natural-log probabilities over the vocabulary after `prefix`.
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A trained model conditioned on one encoded group.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub enc: &'a EncoderOutput,
}

impl NextToken for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(self.enc, prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens before EOS.
    pub max_len: usize,
    pub bos: u32,
    pub eos: u32,
    /// Ids that are never generated.
    pub banned: Vec<u32>,
    /// Rank finished hypotheses by mean per-token log-prob instead of the sum.
    pub length_normalize: bool,
}

impl BeamConfig {
    /// Settings for the caption model: BOS/PAD are never emitted.
    pub fn captioning(beam: usize, max_len: usize) -> Self {
        BeamConfig {
            beam,
            max_len,
            bos: BOS,
            eos: EOS,
            banned: vec![PAD, BOS],
            length_normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished early.
    pub ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, without BOS or EOS.
    pub fn content(&self) -> &[u32] {
        let end = if self.ids.last() == Some(&EOS) && self.ids.len() > 1 {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[1..end]
    }

    fn generated(&self) -> usize {
        self.ids.len() - 1
    }

    fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.log_prob / self.generated().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Higher score first; ties go to the lexicographically smaller id
/// sequence (lower token id), then the shorter hypothesis.
fn rank(a: &Hypothesis, b: &Hypothesis, length_normalize: bool) -> Ordering {
    b.score(length_normalize)
        .total_cmp(&a.score(length_normalize))
        .then_with(|| a.ids.cmp(&b.ids))
        .then_with(|| a.ids.len().cmp(&b.ids.len()))
}

/// Keeps the `beam` best expansions per step; those ending in EOS (or at
/// `max_len`) move to the finished pool. Stops once no live hypothesis can
/// beat the best finished one, or every beam has finished.
pub fn beam_search<S: NextToken + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam < 1 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        ids: vec![cfg.bos],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut candidates = Vec::with_capacity(live.len() * v);
        for hyp in &live {
            let lp = scorer.log_probs(&hyp.ids)?;
            if lp.len() != v {
                return Err(Error::dim("beam_search", &[v], &[lp.len()]));
            }
            for (tok, &l) in lp.iter().enumerate() {
                let tok = tok as u32;
                if cfg.banned.contains(&tok) || l == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis {
                    finished: tok == cfg.eos || ids.len() > cfg.max_len,
                    ids,
                    log_prob: hyp.log_prob + l,
                });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, false));
        candidates.truncate(cfg.beam);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if !cfg.length_normalize {
            // Log-probs only decrease, so a live beam can no longer win.
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.log_prob < best_done) {
                break;
            }
        }
    }

    finished
        .into_iter()
        .chain(live)
        .min_by(|a, b| rank(a, b, cfg.length_normalize))
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))
}

/// Argmax decoding (lowest id on ties).
pub fn greedy<S: NextToken + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<Hypothesis> {
    let mut ids = vec![cfg.bos];
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.log_probs(&ids)?;
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|(t, l)| !cfg.banned.contains(&(*t as u32)) && **l > f64::NEG_INFINITY)
            .fold(None, |best: Option<(usize, f64)>, (t, &l)| match best {
                Some((_, bl)) if bl >= l => best,
                _ => Some((t, l)),
            })
            .ok_or_else(|| Error::Contract("no token can be generated".into()))?;
        ids.push(tok as u32);
        log_prob += l;
        if tok as u32 == cfg.eos || ids.len() > cfg.max_len {
            return Ok(Hypothesis {
                ids,
                log_prob,
                finished: true,
            });
        }
    }
}

impl Model {
    /// Encodes a group and beam-decodes its caption ids.
    pub fn caption_ids(&self, group: &crate::aggregate::ImageGroup, beam: usize) -> Result<Hypothesis> {
        let enc = self.encode(group)?;
        let scorer = ModelScorer { model: self, enc: &enc };
        beam_search(&scorer, &BeamConfig::captioning(beam, self.config.max_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First-order chain over {a=0, b=1, EOS=2}; BOS is 3.
    struct Chain {
        start: [f64; 3],
        after: [[f64; 3]; 2],
    }

    impl NextToken for Chain {
        fn vocab_size(&self) -> usize {
            3
        }

        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let p = match prefix.last() {
                Some(3) => self.start,
                Some(&t) => self.after[t as usize],
                None => unreachable!(),
            };
            Ok(p.iter().map(|x| x.ln()).collect())
        }
    }

    fn toy_cfg(beam: usize) -> BeamConfig {
        BeamConfig {
            beam,
            max_len: 3,
            bos: 3,
            eos: 2,
            banned: vec![],
            length_normalize: false,
        }
    }

    #[test]
    fn deterministic_chain_is_followed() {
        let chain = Chain {
            start: [1.0, 0.0, 0.0],
            after: [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
        for beam in [1, 2, 3, 5] {
            let h = beam_search(&chain, &toy_cfg(beam)).unwrap();
            assert_eq!(h.ids, vec![3, 0, 1, 2]);
            assert_eq!(h.log_prob, 0.0);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let chain = Chain {
            start: [0.5, 0.3, 0.2],
            after: [[0.1, 0.5, 0.4], [0.3, 0.3, 0.4]],
        };
        let b = beam_search(&chain, &toy_cfg(1)).unwrap();
        let g = greedy(&chain, &toy_cfg(1)).unwrap();
        assert_eq!(b.ids, g.ids);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let chain = Chain {
            start: [0.5, 0.3, 0.2],
            after: [[0.1, 0.5, 0.4], [0.3, 0.3, 0.4]],
        };
        assert!(matches!(beam_search(&chain, &toy_cfg(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn max_len_finishes_without_eos() {
        let chain = Chain {
            start: [0.9, 0.05, 0.05],
            after: [[0.9, 0.05, 0.05], [0.9, 0.05, 0.05]],
        };
        let h = beam_search(&chain, &toy_cfg(2)).unwrap();
        assert_eq!(h.ids, vec![3, 0, 0, 0]);
        assert!(h.finished);
        assert_eq!(h.content(), &[0, 0, 0]);
    }

    #[test]
    fn length_normalization_prefers_longer() {
        // "EOS now" has 0.4; "a EOS" has 0.6 * 0.6 = 0.36 but a better mean.
        let chain = Chain {
            start: [0.6, 0.0, 0.4],
            after: [[0.2, 0.2, 0.6], [0.2, 0.2, 0.6]],
        };
        let mut cfg = toy_cfg(3);
        assert_eq!(beam_search(&chain, &cfg).unwrap().ids, vec![3, 2]);
        cfg.length_normalize = true;
        assert_eq!(beam_search(&chain, &cfg).unwrap().ids, vec![3, 0, 2]);
    }
}
