//! Adam, the training loop with CIDEr-based checkpoint selection, and the
//! experiment harnesses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{FeatureConfig, ImageGroup};
use crate::error::{Error, Result};
use crate::metrics::{cider, MetricReport};
use crate::model::{Example, Model, ModelConfig, ModelParameters};
use crate::tensor::Tensor;
use crate::tokenize::Vocab;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_FILE: &str = "log.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Adam moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ModelParameters, lr: f64) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, p)| (n.to_string(), Tensor::zeros(p.shape())))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    strict: bool,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if strict && !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience_steps: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Beam width for validation and test decoding.
    pub beam: usize,
    pub min_token_freq: usize,
    pub max_vocab: usize,
    /// Trap NaN/Inf during training.
    pub strict: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            patience_steps: 2000,
            eval_every: 200,
            max_steps: 20_000,
            seed: 0,
            beam: 4,
            min_token_freq: crate::tokenize::DEFAULT_MIN_FREQ,
            max_vocab: 10_000,
            strict: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size),
            ("patience_steps", self.patience_steps),
            ("eval_every", self.eval_every),
            ("max_steps", self.max_steps),
            ("beam", self.beam),
            ("min_token_freq", self.min_token_freq),
            ("max_vocab", self.max_vocab),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be positive")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be a non-negative number, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub cider: f64,
    /// Mean per-token training loss since the previous evaluation.
    pub train_loss: f64,
    /// File name, relative to the run directory, when this evaluation set a
    /// new best.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLog {
    pub entries: Vec<LogEntry>,
    /// Index into `entries` of the highest validation CIDEr.
    pub best: Option<usize>,
    pub initial_loss: f64,
    pub stopped_early: bool,
}

impl CheckpointLog {
    pub fn best_entry(&self) -> Option<&LogEntry> {
        self.best.map(|i| &self.entries[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CheckpointLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Result of a training run. `model` is the best checkpoint as stored on
/// disk.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: CheckpointLog,
    pub model: Model,
    pub vocab: Vocab,
    pub dir: PathBuf,
}

pub fn train_vocab<'a, I>(captions: I, cfg: &TrainConfig) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    Vocab::train(captions, cfg.min_token_freq, cfg.max_vocab)
}

/// Fills in or checks the vocabulary size.
fn with_vocab(mut config: ModelConfig, vocab: &Vocab) -> Result<ModelConfig> {
    if config.vocab_size == 0 {
        config.vocab_size = vocab.len();
    } else if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the trained vocabulary has {} tokens",
            config.vocab_size,
            vocab.len()
        )));
    }
    config.validate()?;
    Ok(config)
}

pub fn make_examples(groups: &[ImageGroup], vocab: &Vocab, max_len: usize) -> Vec<Example> {
    groups
        .iter()
        .map(|g| Example {
            group: g.clone(),
            target: vocab.encode(&g.caption, max_len),
        })
        .collect()
}

/// Beam-decodes every group, in parallel, preserving order.
pub fn decode_groups(model: &Model, vocab: &Vocab, groups: &[ImageGroup], beam: usize) -> Result<Vec<String>> {
    groups
        .par_iter()
        .map(|g| {
            let h = model.caption_ids(g, beam)?;
            vocab.decode(h.content())
        })
        .collect()
}

/// Decodes `groups` and scores against their captions.
pub fn evaluate(model: &Model, vocab: &Vocab, groups: &[ImageGroup], beam: usize) -> Result<MetricReport> {
    let hyps = decode_groups(model, vocab, groups, beam)?;
    let refs: Vec<&str> = groups.iter().map(|g| g.caption.as_str()).collect();
    MetricReport::compute(&hyps, &refs, false)
}

fn check_sets(train: &[ImageGroup], valid: &[ImageGroup]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if valid.len() < 2 {
        return Err(Error::Data("validation needs at least 2 groups to score CIDEr".into()));
    }
    Ok(())
}

/// Optimizes `model` from its current weights and writes checkpoints into
/// `dir`. Returns the log and the best model as reloaded from disk.
pub fn fit(
    mut model: Model,
    vocab: &Vocab,
    train: &[ImageGroup],
    valid: &[ImageGroup],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<(CheckpointLog, Model)> {
    cfg.validate()?;
    check_sets(train, valid)?;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary of {} does not match tokenizer of {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.strict = cfg.strict;
    let examples = make_examples(train, vocab, model.config.max_len);
    let refs: Vec<&str> = valid.iter().map(|g| g.caption.as_str()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut opt = OptimState::new(&model.params, cfg.lr);

    let mut log = CheckpointLog {
        entries: Vec::new(),
        best: None,
        initial_loss: f64::NAN,
        stopped_early: false,
    };
    let mut best_cider = f64::NEG_INFINITY;
    let mut best_step = 0;
    let (mut window_loss, mut window_steps) = (0.0, 0usize);

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let bg = model.loss_and_grads(&batch)?;
        if step == 1 {
            log.initial_loss = bg.mean_loss();
        }
        window_loss += bg.mean_loss();
        window_steps += 1;
        adam_step(&mut model.params, &bg.grads, &mut opt, cfg.strict)?;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let hyps = decode_groups(&model, vocab, valid, cfg.beam)?;
            let score = cider(&hyps, &refs)?;
            let mut entry = LogEntry {
                step,
                cider: score,
                train_loss: window_loss / window_steps as f64,
                checkpoint: None,
            };
            (window_loss, window_steps) = (0.0, 0);
            if score > best_cider {
                best_cider = score;
                best_step = step;
                let name = format!("step-{step:06}.ckpt");
                model.save(&dir.join(&name))?;
                model.save(&dir.join(BEST_CHECKPOINT))?;
                entry.checkpoint = Some(name);
                log.best = Some(log.entries.len());
            }
            log.entries.push(entry);
            if step - best_step >= cfg.patience_steps {
                log.stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }
    model.save(&dir.join(LAST_CHECKPOINT))?;
    log.save(&dir.join(LOG_FILE))?;
    let mut best = Model::load(&dir.join(BEST_CHECKPOINT))?;
    best.strict = cfg.strict;
    Ok((log, best))
}

/// Trains a tokenizer on the training captions and a fresh model from
/// `cfg.seed`.
pub fn train_loop(
    model_config: &ModelConfig,
    train: &[ImageGroup],
    valid: &[ImageGroup],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<TrainOutcome> {
    check_sets(train, valid)?;
    let vocab = train_vocab(train.iter().map(|g| g.caption.as_str()), cfg)?;
    let config = with_vocab(model_config.clone(), &vocab)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let model = Model::init(config, cfg.seed)?;
    let (log, model) = fit(model, &vocab, train, valid, cfg, dir)?;
    Ok(TrainOutcome {
        log,
        model,
        vocab,
        dir: dir.to_path_buf(),
    })
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub pretrain: CheckpointLog,
    pub finetune: CheckpointLog,
    /// Parameters of the finetuned model that were freshly initialized.
    pub skipped: Vec<String>,
    pub model: Model,
    pub vocab: Vocab,
}

/// Phase 1 trains on single-image groups (validated on single-image
/// pairs); phase 2 starts from the best phase-1 checkpoint with fresh Adam
/// moments. One vocabulary covers both phases.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_then_finetune(
    model_config: &ModelConfig,
    single_train: &[ImageGroup],
    single_valid: &[ImageGroup],
    multi_train: &[ImageGroup],
    multi_valid: &[ImageGroup],
    pretrain_cfg: &TrainConfig,
    finetune_cfg: &TrainConfig,
    dir: &Path,
) -> Result<PretrainOutcome> {
    check_sets(single_train, single_valid)?;
    check_sets(multi_train, multi_valid)?;
    let vocab = train_vocab(
        single_train.iter().chain(multi_train).map(|g| g.caption.as_str()),
        finetune_cfg,
    )?;
    let config = with_vocab(model_config.clone(), &vocab)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;

    let pre = Model::init(config.clone(), pretrain_cfg.seed)?;
    let (pre_log, pre_best) = fit(
        pre,
        &vocab,
        single_train,
        single_valid,
        pretrain_cfg,
        &dir.join("pretrain"),
    )?;

    let mut model = Model::init(config, finetune_cfg.seed)?;
    let skipped = model.transfer_from(&pre_best)?;
    let (ft_log, best) = fit(
        model,
        &vocab,
        multi_train,
        multi_valid,
        finetune_cfg,
        &dir.join("finetune"),
    )?;
    Ok(PretrainOutcome {
        pretrain: pre_log,
        finetune: ft_log,
        skipped,
        model: best,
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub features: FeatureConfig,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Rejected configurations and why.
    pub skipped: Vec<(FeatureConfig, String)>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("indiv,averaging,sigma,cider,bleu4,rougel\n");
        for r in &self.rows {
            let f = r.features;
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                if f.use_individual { "Y" } else { "N" },
                f.averaging.as_str(),
                if f.use_sigma { "Y" } else { "N" },
                r.report.cider,
                r.report.bleu4,
                r.report.rouge_l
            )
            .unwrap();
        }
        out
    }
}

/// Trains one model per feature configuration and scores its best
/// checkpoint on `test`. Invalid configurations are skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_grid(
    base: &ModelConfig,
    configs: &[FeatureConfig],
    train: &[ImageGroup],
    valid: &[ImageGroup],
    test: &[ImageGroup],
    cfg: &TrainConfig,
    dir: &Path,
    parallel: bool,
) -> Result<GridReport> {
    let (valid_cfgs, skipped): (Vec<_>, Vec<_>) =
        configs.iter().map(|f| (*f, f.validate())).partition(|(_, r)| r.is_ok());
    let skipped = skipped
        .into_iter()
        .map(|(f, r)| (f, r.unwrap_err().to_string()))
        .collect();
    let run = |(i, (f, _)): (usize, &(FeatureConfig, Result<()>))| -> Result<GridRow> {
        let mut config = base.clone();
        config.feature_config = *f;
        let out = train_loop(&config, train, valid, cfg, &dir.join(format!("row-{i:02}")))?;
        Ok(GridRow {
            features: *f,
            report: evaluate(&out.model, &out.vocab, test, cfg.beam)?,
        })
    };
    let rows: Result<Vec<GridRow>> = if parallel {
        valid_cfgs.par_iter().enumerate().map(run).collect()
    } else {
        valid_cfgs.iter().enumerate().map(run).collect()
    };
    Ok(GridReport { rows: rows?, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutation {
    /// Seeded random order per example.
    Shuffle,
    /// Original order; a control that must give zero delta.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub n_examples: usize,
    pub cider_original: f64,
    pub cider_shuffled: f64,
    /// Original minus shuffled.
    pub delta: f64,
    /// Set when the requested subset exceeded the test set.
    pub clipped: bool,
}

/// Decodes the first `subset` test groups in their original and in a
/// permuted image order.
pub fn ordering_ablation(
    model: &Model,
    vocab: &Vocab,
    test: &[ImageGroup],
    subset: usize,
    seed: u64,
    permutation: Permutation,
    beam: usize,
) -> Result<OrderingReport> {
    let clipped = subset > test.len();
    let groups = &test[..subset.min(test.len())];
    let shuffled: Vec<ImageGroup> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut perm: Vec<usize> = (0..g.n()).collect();
            if permutation == Permutation::Shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                perm.shuffle(&mut rng);
            }
            g.permuted(&perm)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&str> = groups.iter().map(|g| g.caption.as_str()).collect();
    let original = cider(&decode_groups(model, vocab, groups, beam)?, &refs)?;
    let permuted = cider(&decode_groups(model, vocab, &shuffled, beam)?, &refs)?;
    Ok(OrderingReport {
        n_examples: groups.len(),
        cider_original: original,
        cider_shuffled: permuted,
        delta: original - permuted,
        clipped,
    })
}
