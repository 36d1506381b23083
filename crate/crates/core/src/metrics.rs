//! Captioning metrics: CIDEr-D, BLEU-4 and ROUGE-L.
//!
//! Captions are lowercased and split on whitespace. Each example has one
//! reference. Corpus averages sum per-example scores in sorted order so the
//! result does not depend on example order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::words;

const MAX_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;
const ROUGE_BETA: f64 = 1.2;

type NGram = Vec<String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub n_examples: usize,
    /// Add-one smoothed BLEU-4, only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4_smoothed: Option<f64>,
}

impl MetricReport {
    pub fn compute<C: AsRef<str>, R: AsRef<str>>(
        candidates: &[C],
        references: &[R],
        smoothed_bleu: bool,
    ) -> Result<Self> {
        Ok(MetricReport {
            cider: cider(candidates, references)?,
            bleu4: bleu4(candidates, references)?,
            rouge_l: rouge_l(candidates, references)?,
            n_examples: candidates.len(),
            bleu4_smoothed: if smoothed_bleu {
                Some(bleu4_with(candidates, references, true)?)
            } else {
                None
            },
        })
    }
}

/// Counts of every n-gram of order 1..=4.
pub fn ngram_counts(tokens: &[String]) -> BTreeMap<NGram, usize> {
    let mut out = BTreeMap::new();
    for n in 1..=MAX_N {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_default() += 1;
        }
    }
    out
}

type Tokenized = Vec<Vec<String>>;

fn tokenize_pairs<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<(Tokenized, Tokenized)> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok((
        candidates.iter().map(|c| words(c.as_ref())).collect(),
        references.iter().map(|r| words(r.as_ref())).collect(),
    ))
}

fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Corpus BLEU-4 without smoothing.
pub fn bleu4<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64> {
    bleu4_with(candidates, references, false)
}

/// Corpus BLEU-4. With `smoothed`, orders 2..4 add one to both matched and
/// total counts.
pub fn bleu4_with<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R], smoothed: bool) -> Result<f64> {
    let (cands, refs) = tokenize_pairs(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in cands.iter().zip(&refs) {
        cand_len += c.len();
        ref_len += r.len();
        let rc = ngram_counts(r);
        for (g, &k) in &ngram_counts(c) {
            matched[g.len() - 1] += k.min(rc.get(g).copied().unwrap_or(0));
        }
        for n in 1..=MAX_N {
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        let add = if smoothed && n > 0 { 1.0 } else { 0.0 };
        let (m, t) = (matched[n] as f64 + add, total[n] as f64 + add);
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / MAX_N as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / cand.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Mean LCS F-measure with beta 1.2.
pub fn rouge_l<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64> {
    let (cands, refs) = tokenize_pairs(candidates, references)?;
    Ok(sorted_mean(
        cands.iter().zip(&refs).map(|(c, r)| rouge_l_pair(c, r)).collect(),
    ))
}

struct TfIdf {
    vecs: [BTreeMap<NGram, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

fn tfidf(tokens: &[String], df: &BTreeMap<NGram, usize>, log_docs: f64) -> TfIdf {
    let mut vecs: [BTreeMap<NGram, f64>; MAX_N] = Default::default();
    let mut norms = [0.0; MAX_N];
    for (g, tf) in ngram_counts(tokens) {
        let n = g.len() - 1;
        let idf = log_docs - (df.get(&g).copied().unwrap_or(0).max(1) as f64).ln();
        let w = tf as f64 * idf;
        norms[n] += w * w;
        vecs[n].insert(g, w);
    }
    TfIdf {
        vecs,
        norms: norms.map(f64::sqrt),
        len: tokens.len(),
    }
}

fn cider_pair(hyp: &TfIdf, reference: &TfIdf) -> f64 {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..MAX_N {
        let mut val = 0.0;
        for (g, &h) in &hyp.vecs[n] {
            if let Some(&r) = reference.vecs[n].get(g) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        total += val * penalty;
    }
    10.0 * total / MAX_N as f64
}

/// Corpus CIDEr-D. Document frequencies come from the references.
pub fn cider<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64> {
    let (cands, refs) = tokenize_pairs(candidates, references)?;
    if refs.len() < 2 {
        return Err(Error::Contract(format!(
            "CIDEr needs at least 2 references for document frequencies, got {}",
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("reference {i} is empty")));
    }
    let mut df: BTreeMap<NGram, usize> = BTreeMap::new();
    for r in &refs {
        let seen: BTreeSet<NGram> = ngram_counts(r).into_keys().collect();
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let log_docs = (refs.len() as f64).ln();
    let scores = cands
        .iter()
        .zip(&refs)
        .map(|(c, r)| cider_pair(&tfidf(c, &df, log_docs), &tfidf(r, &df, log_docs)))
        .collect();
    Ok(sorted_mean(scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_hand_example() {
        let b = bleu4(&["a b c d e"], &["a b c d f"]).unwrap();
        assert!((b - 0.2f64.powf(0.25)).abs() < 1e-12);
        assert!((b - 0.66874).abs() < 1e-5);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        assert_eq!(
            bleu4(&["gold ring with stones"], &["gold ring with stones"]).unwrap(),
            1.0
        );
        assert_eq!(bleu4(&["x y z w"], &["a b c d"]).unwrap(), 0.0);
        assert_eq!(bleu4(&[""], &["a b"]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_short_caption_zeroes_without_smoothing() {
        assert_eq!(bleu4(&["gold ring"], &["gold ring"]).unwrap(), 0.0);
        let s = bleu4_with(&["gold ring"], &["gold ring"], true).unwrap();
        assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Candidate is a prefix of the reference: all precisions 1.
        let b = bleu4(&["a b c d"], &["a b c d e f g h"]).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_asymmetric() {
        let c = ["the cat sat on the mat today"];
        let r = ["the cat sat on the mat"];
        assert_ne!(bleu4(&c, &r).unwrap(), bleu4(&r, &c).unwrap());
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        assert!(matches!(bleu4(&["a"], &["a", "b"]), Err(Error::Contract(_))));
        assert!(matches!(rouge_l(&["a"], &["a", "b"]), Err(Error::Contract(_))));
        assert!(matches!(cider(&["a"], &["a", "b"]), Err(Error::Contract(_))));
    }

    #[test]
    fn rouge_hand_example() {
        let r = rouge_l(&["a b c"], &["a c"]).unwrap();
        let expected = 2.44 * (2.0 / 3.0) / (1.0 + 1.44 * 2.0 / 3.0);
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.82993).abs() < 1e-5);
    }

    #[test]
    fn rouge_identity_disjoint_empty() {
        assert_eq!(rouge_l(&["Gold ring"], &["gold ring"]).unwrap(), 1.0);
        assert_eq!(rouge_l(&["x"], &["a b"]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[""], &["a b"]).unwrap(), 0.0);
    }

    #[test]
    fn cider_identity_is_ten() {
        let refs = ["gold ring with blue stones", "copper kettle for the stove"];
        let c = cider(&refs, &refs).unwrap();
        assert!((c - 10.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let c = cider(&["x y z", "p q r"], &["gold ring", "copper kettle"]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cider_requires_two_nonempty_references() {
        assert!(matches!(cider(&["a"], &["a"]), Err(Error::Contract(_))));
        assert!(matches!(cider(&["a", "b"], &["a", ""]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_serializes() {
        let refs = ["gold ring with blue stones", "copper kettle for the stove"];
        let r = MetricReport::compute(&refs, &refs, false).unwrap();
        assert_eq!(r.n_examples, 2);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("smoothed"));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
