//! Helpers and independent oracles shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mism::aggregate::{
    dense_avg_on, fixed_avg_on, self_attn_avg_on, std_dev_on, Averaging, FeatureConfig, ImageGroup, ImageMeta,
};
use mism::decode::{beam_search, BeamConfig, ModelScorer, NextToken};
use mism::model::{Example, Model, ModelConfig};
use mism::tensor::{check_gradients, Tape, Tensor, Var};
use mism::tokenize::{TokenSeq, BOS, EOS};
use mism::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_group(rng: &mut ChaCha8Rng, id: &str, n: usize, k: usize) -> ImageGroup {
    let e = normal_tensor(rng, &[n, k], 1.0);
    let meta = vec![
        ImageMeta {
            width: 400,
            height: 300,
            tags: vec![]
        };
        n
    ];
    ImageGroup::new(id, e, meta, "x").unwrap()
}

pub fn tiny_config(feature_config: FeatureConfig) -> ModelConfig {
    ModelConfig {
        k: 4,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        d_ff: 16,
        vocab_size: 11,
        max_len: 6,
        n_model: 3,
        m: 4,
        feature_config,
    }
}

/// A tiny model with every weight redrawn from N(0, scale²), so that the
/// output distributions are far from uniform.
pub fn random_model(config: ModelConfig, seed: u64, scale: f64) -> Model {
    let mut model = Model::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for (_, p) in model.params.iter_mut() {
        *p = normal_tensor(&mut r, p.shape(), scale);
    }
    model
}

/// Weighted sum so that every output coordinate gets a distinct gradient.
pub fn probe(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Worst relative gradient error over the four aggregation ops for one seed.
pub fn aggregation_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng(seed);
    let (n, k, m) = (3 + (seed % 3) as usize, 4, 5);
    let e = normal_tensor(&mut r, &[n, k], 1.0);
    let w_row = normal_tensor(&mut r, &[k], 1.0);
    let h_dense = normal_tensor(&mut r, &[n, k * n], 0.5);
    let h1 = normal_tensor(&mut r, &[k, m], 0.5);
    let h2 = normal_tensor(&mut r, &[k, m], 0.5);
    let wr = w_row.clone();
    let fixed = check_gradients(
        |t, v| {
            let o = fixed_avg_on(t, v[0])?;
            probe(t, o, &wr)
        },
        std::slice::from_ref(&e),
        GRAD_EPS,
    )?;
    let wr = w_row.clone();
    let sigma = check_gradients(
        |t, v| {
            let o = std_dev_on(t, v[0])?;
            probe(t, o, &wr)
        },
        std::slice::from_ref(&e),
        GRAD_EPS,
    )?;
    let wr = w_row.clone();
    let dense = check_gradients(
        |t, v| {
            let o = dense_avg_on(t, v[0], v[1])?;
            probe(t, o, &wr)
        },
        &[e.clone(), h_dense],
        GRAD_EPS,
    )?;
    let wr = w_row;
    let self_attn = check_gradients(
        |t, v| {
            let o = self_attn_avg_on(t, v[0], v[1], v[2])?;
            probe(t, o, &wr)
        },
        &[e, h1, h2],
        GRAD_EPS,
    )?;
    Ok(vec![
        ("fixed_avg", fixed),
        ("std_dev", sigma),
        ("dense_avg", dense),
        ("self_attn_avg", self_attn),
    ])
}

pub fn grad_feature_config(seed: u64) -> FeatureConfig {
    match seed % 3 {
        0 => FeatureConfig::new(true, Averaging::Dense, true),
        1 => FeatureConfig::new(false, Averaging::SelfAttn, true),
        _ => FeatureConfig::new(true, Averaging::Fixed, true),
    }
}

fn grad_example(seed: u64, config: &ModelConfig) -> Example {
    let mut r = rng(seed.wrapping_add(77));
    let group = random_group(&mut r, &format!("grad{seed}"), 3 + (seed % 2) as usize, config.k);
    let len = 2 + (seed % 3) as usize;
    let mut ids = vec![BOS];
    ids.extend((0..len).map(|_| r.random_range(4..config.vocab_size as u32)));
    ids.push(EOS);
    Example {
        group,
        target: TokenSeq { ids },
    }
}

/// Gradient check of the teacher-forced loss with respect to the named
/// parameters; all other parameters are held fixed.
pub fn model_grad_error(model: &Model, ex: &Example, names: &[String]) -> Result<f64> {
    let values: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    check_gradients(
        |t, vars| {
            let mut b = model.bind(t, false)?;
            for (n, &v) in names.iter().zip(vars) {
                b.replace(n, v)?;
            }
            Ok(model.example_nll_on(t, &b, ex)?.0)
        },
        &values,
        GRAD_EPS,
    )
}

/// Parameter groups, one per transformer sub-block plus embeddings, keyed
/// by prefix.
pub fn block_groups(model: &Model) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in model.params.names() {
        let parts: Vec<&str> = name.split('.').collect();
        let key = if parts.len() >= 3 && parts[1].starts_with('L') {
            parts[..3].join(".")
        } else {
            parts[..2].join(".")
        };
        out.entry(key).or_default().push(name.to_string());
    }
    out
}

/// Per-block and end-to-end gradient errors for the tiny model.
pub fn model_grad_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let config = tiny_config(grad_feature_config(seed));
    let model = random_model(config.clone(), seed, 0.4);
    let ex = grad_example(seed, &config);
    let mut out = Vec::new();
    for (block, names) in block_groups(&model) {
        out.push((block, model_grad_error(&model, &ex, &names)?));
    }
    let all: Vec<String> = model.params.names().map(String::from).collect();
    out.push(("end_to_end".to_string(), model_grad_error(&model, &ex, &all)?));
    Ok(out)
}

fn ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return vec![];
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].join(" ")).collect()
}

/// CIDEr-D computed by materializing dense TF-IDF vectors over every
/// n-gram that occurs anywhere in the corpus.
pub fn cider_oracle(cands: &[String], refs: &[String]) -> f64 {
    let tok = |s: &String| s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = cands.iter().map(tok).collect();
    let refs: Vec<Vec<String>> = refs.iter().map(tok).collect();
    let docs = refs.len() as f64;
    let mut total = 0.0;
    let mut per_example = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut space: Vec<String> = cands.iter().chain(&refs).flat_map(|t| ngrams(t, n)).collect();
        space.sort();
        space.dedup();
        let df: Vec<f64> = space
            .iter()
            .map(|g| refs.iter().filter(|r| ngrams(r, n).contains(g)).count() as f64)
            .collect();
        let vector = |t: &[String]| -> Vec<f64> {
            let grams = ngrams(t, n);
            space
                .iter()
                .zip(&df)
                .map(|(g, &d)| {
                    let tf = grams.iter().filter(|x| *x == g).count() as f64;
                    tf * (docs.ln() - d.max(1.0).ln())
                })
                .collect()
        };
        for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
            let vc = vector(c);
            let vr = vector(r);
            let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
            let delta = c.len() as f64 - r.len() as f64;
            per_example[i] += cos * (-delta * delta / 72.0).exp();
        }
    }
    for s in &per_example {
        total += 10.0 * s / 4.0;
    }
    total / cands.len() as f64
}

/// Random corpus over a small vocabulary so that n-grams repeat.
pub fn random_corpus(rng: &mut ChaCha8Rng, n_examples: usize) -> (Vec<String>, Vec<String>) {
    const WORDS: [&str; 6] = ["gold", "ring", "red", "mug", "glass", "vase"];
    let sentence = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(1..=7);
        (0..len)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let cands = (0..n_examples).map(|_| sentence(rng)).collect();
    let refs = (0..n_examples).map(|_| sentence(rng)).collect();
    (cands, refs)
}

/// Tokens a=0, b=1, EOS=2; BOS=3. Greedy takes "a" first and is stuck
/// with a flat continuation; the best sequence is "b EOS".
pub struct GardenPath;

impl NextToken for GardenPath {
    fn vocab_size(&self) -> usize {
        3
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match prefix {
            [3] => [0.55, 0.4, 0.05],
            [3, 0] => [0.34, 0.33, 0.33],
            [3, 1] => [0.05, 0.05, 0.9],
            [3, 0, 0] => [0.5, 0.1, 0.4],
            [3, 0, 1] => [0.2, 0.2, 0.6],
            [3, 1, _] => [0.3, 0.3, 0.4],
            _ => [0.4, 0.3, 0.3],
        };
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

pub const TOY_BOS: u32 = 3;
pub const TOY_EOS: u32 = 2;

/// Best total log-prob over every sequence of at most `max_len` tokens
/// that ends in EOS or has exactly `max_len` tokens.
pub fn exhaustive_best<S: NextToken>(scorer: &S, max_len: usize) -> f64 {
    fn go<S: NextToken>(s: &S, prefix: &mut Vec<u32>, lp: f64, max_len: usize, best: &mut f64) {
        let probs = s.log_probs(prefix).unwrap();
        for (t, &l) in probs.iter().enumerate() {
            let t = t as u32;
            let total = lp + l;
            prefix.push(t);
            if t == TOY_EOS || prefix.len() - 1 == max_len {
                *best = best.max(total);
            } else {
                go(s, prefix, total, max_len, best);
            }
            prefix.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(scorer, &mut vec![TOY_BOS], 0.0, max_len, &mut best);
    best
}

pub fn toy_beam(beam: usize) -> mism::decode::BeamConfig {
    mism::decode::BeamConfig {
        beam,
        max_len: 3,
        bos: TOY_BOS,
        eos: TOY_EOS,
        banned: vec![],
        length_normalize: false,
    }
}

/// Toy model where the two children of `b` crowd the greedy path out of a
/// width-2 beam. Width 1 keeps it and width 4 also keeps `EOS` at step one.
pub struct Crowding;

impl NextToken for Crowding {
    fn vocab_size(&self) -> usize {
        3
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match prefix {
            [3] => [0.4, 0.35, 0.25],
            [3, 0] => [0.4, 0.3, 0.3],
            [3, 1] => [0.49, 0.49, 0.02],
            [3, 0, 0] => [0.01, 0.01, 0.98],
            _ => [1.0 / 3.0; 3],
        };
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

/// Best log-prob found by beam search at each width on a toy scorer.
pub fn toy_scores<S: NextToken>(scorer: &S, widths: &[usize], max_len: usize) -> Vec<f64> {
    widths
        .iter()
        .map(|&b| {
            let cfg = BeamConfig { max_len, ..toy_beam(b) };
            beam_search(scorer, &cfg).unwrap().log_prob
        })
        .collect()
}

/// Width pairs (narrow, wide) from `widths` where the wider beam scored lower,
/// over random models.
pub fn beam_width_violations(seeds: std::ops::Range<u64>, widths: &[usize]) -> Vec<(u64, usize, usize)> {
    let mut out = Vec::new();
    for seed in seeds {
        let fc = FeatureConfig::all_valid()[seed as usize % 14];
        let model = random_model(tiny_config(fc), seed, 0.7);
        let group = random_group(&mut rng(seed + 1000), &format!("d{seed}"), 2 + seed as usize % 5, 4);
        let enc = model.encode(&group).unwrap();
        let scorer = ModelScorer {
            model: &model,
            enc: &enc,
        };
        let scores: Vec<f64> = widths
            .iter()
            .map(|&b| {
                beam_search(&scorer, &BeamConfig::captioning(b, model.config.max_len))
                    .unwrap()
                    .log_prob
            })
            .collect();
        for i in 0..widths.len() {
            for j in i + 1..widths.len() {
                if scores[j] < scores[i] - 1e-12 {
                    out.push((seed, widths[i], widths[j]));
                }
            }
        }
    }
    out
}
