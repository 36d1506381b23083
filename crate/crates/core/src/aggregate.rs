//! Group-level input representations for the encoder.
//!
//! A group of `N` image embeddings (an `N × K` matrix `E`) can be fed to
//! the encoder as its individual rows, as one averaged vector (uniform,
//! dense-layer weighted, or self-attention weighted), and optionally with
//! the element-wise standard deviation across the group.
//!
//! Every function comes in two flavours: `*_on` records onto a [`Tape`] so
//! gradients flow into the learned matrices, and a plain version that
//! evaluates on [`Tensor`]s.

use std::cmp::Ordering;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    pub tags: Vec<String>,
}

impl ImageMeta {
    /// Width over height.
    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// `N` embeddings of dimension `K` sharing one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroup {
    pub group_id: String,
    /// Row `i` is the embedding of image `i`.
    pub embeddings: Tensor,
    pub image_meta: Vec<ImageMeta>,
    pub caption: String,
}

impl ImageGroup {
    pub fn new(
        group_id: impl Into<String>,
        embeddings: Tensor,
        image_meta: Vec<ImageMeta>,
        caption: impl Into<String>,
    ) -> Result<Self> {
        let group = ImageGroup {
            group_id: group_id.into(),
            embeddings,
            image_meta,
            caption: caption.into(),
        };
        group.validate()?;
        Ok(group)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.rank() != 2 {
            return Err(Error::Data(format!(
                "group {}: embeddings must be an N x K matrix, got shape {:?}",
                self.group_id,
                self.embeddings.shape()
            )));
        }
        if !self.embeddings.is_finite() {
            return Err(Error::Data(format!("group {}: non-finite embedding", self.group_id)));
        }
        if self.image_meta.len() != self.n() {
            return Err(Error::Data(format!(
                "group {}: {} embeddings but {} image_meta entries",
                self.group_id,
                self.n(),
                self.image_meta.len()
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Reorders images; `perm[i]` is the old index of the new row `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ImageGroup> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.n()).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.n()
            )));
        }
        Ok(self.select(perm))
    }

    fn select(&self, rows: &[usize]) -> ImageGroup {
        let k = self.k();
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            data.extend_from_slice(self.embeddings.row(r));
        }
        ImageGroup {
            group_id: self.group_id.clone(),
            embeddings: Tensor::new(vec![rows.len(), k], data).expect("row selection keeps K"),
            image_meta: rows.iter().map(|&r| self.image_meta[r].clone()).collect(),
            caption: self.caption.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    None,
    Fixed,
    Dense,
    SelfAttn,
}

impl Averaging {
    pub const ALL: [Averaging; 4] = [Averaging::None, Averaging::Fixed, Averaging::Dense, Averaging::SelfAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            Averaging::None => "none",
            Averaging::Fixed => "fixed",
            Averaging::Dense => "dense",
            Averaging::SelfAttn => "selfattn",
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which representations the encoder receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub use_individual: bool,
    pub averaging: Averaging,
    pub use_sigma: bool,
}

impl FeatureConfig {
    pub const fn new(use_individual: bool, averaging: Averaging, use_sigma: bool) -> Self {
        FeatureConfig {
            use_individual,
            averaging,
            use_sigma,
        }
    }

    /// σ is never the only input, and something must be fed.
    pub fn validate(&self) -> Result<()> {
        if !self.use_individual && self.averaging == Averaging::None {
            let what = if self.use_sigma {
                "the standard-deviation feature cannot be the only encoder input"
            } else {
                "feature config selects no encoder input"
            };
            return Err(Error::Config(what.into()));
        }
        Ok(())
    }

    /// Whether groups must be resampled to the model's fixed size first.
    pub fn needs_fixed_size(&self) -> bool {
        self.use_individual || self.averaging == Averaging::Dense
    }

    /// Every legal combination, in grid order.
    pub fn all_valid() -> Vec<FeatureConfig> {
        let mut out = Vec::new();
        for use_sigma in [false, true] {
            for use_individual in [true, false] {
                for averaging in Averaging::ALL {
                    let cfg = FeatureConfig::new(use_individual, averaging, use_sigma);
                    if cfg.validate().is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for FeatureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.use_individual {
            parts.push("indiv");
        }
        if self.averaging != Averaging::None {
            parts.push(self.averaging.as_str());
        }
        if self.use_sigma {
            parts.push("sigma");
        }
        f.write_str(&parts.join("+"))
    }
}

/// Learned aggregation matrices. Only the ones the feature config uses are set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregationParams {
    /// `(N_model, K * N_model)`.
    pub h_dense: Option<Tensor>,
    /// `(K, M)`.
    pub h1: Option<Tensor>,
    /// `(K, M)`.
    pub h2: Option<Tensor>,
}

/// Tape handles for [`AggregationParams`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AggregationVars {
    pub h_dense: Option<Var>,
    pub h1: Option<Var>,
    pub h2: Option<Var>,
}

impl AggregationParams {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<AggregationVars> {
        let mut leaf = |t: &Option<Tensor>| -> Result<Option<Var>> {
            t.as_ref().map(|t| tape.leaf(t.clone(), requires_grad)).transpose()
        };
        Ok(AggregationVars {
            h_dense: leaf(&self.h_dense)?,
            h1: leaf(&self.h1)?,
            h2: leaf(&self.h2)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Individual = 0,
    Aggregate = 1,
    Sigma = 2,
}

impl FeatureKind {
    pub const COUNT: usize = 3;
}

/// Aggregated views of one group, for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregatedFeatures {
    pub sigma: Option<Vec<f64>>,
    pub a_fixed: Option<Vec<f64>>,
    pub a_dense: Option<Vec<f64>>,
    pub a_selfattn: Option<Vec<f64>>,
    pub individual: Option<Tensor>,
}

/// Encoder input rows recorded on a tape, in canonical order
/// (individual, then aggregate, then σ).
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    /// `S × K`.
    pub values: Var,
    pub kinds: Vec<FeatureKind>,
}

/// Row order that sorts rows lexicographically. Summing in this order makes
/// symmetric reductions bit-identical under any permutation of the rows.
fn canonical_order(e: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..e.rows()).collect();
    idx.sort_by(|&a, &b| {
        e.row(a)
            .iter()
            .zip(e.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn check_group_matrix(op: &'static str, tape: &Tape, e: Var) -> Result<(usize, usize)> {
    match tape.shape(e) {
        [n, k] => Ok((*n, *k)),
        other => Err(Error::dim(op, other, &[])),
    }
}

/// Element-wise population standard deviation across rows. Rows are first
/// shifted by the leading row, so identical rows give exactly zero.
pub fn std_dev_on(tape: &mut Tape, e: Var) -> Result<Var> {
    let (n, _) = check_group_matrix("std_dev_feature", tape, e)?;
    let order = canonical_order(tape.value(e));
    let sorted = tape.gather_rows(e, &order)?;
    let first = tape.gather_rows(e, &vec![order[0]; n])?;
    let sorted = tape.sub(sorted, first)?;
    let mean = tape.mean_rows(sorted)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let centered = tape.add_row(sorted, neg_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    tape.sqrt(var)
}

/// Uniform average of the rows.
pub fn fixed_avg_on(tape: &mut Tape, e: Var) -> Result<Var> {
    check_group_matrix("fixed_avg", tape, e)?;
    let order = canonical_order(tape.value(e));
    let sorted = tape.gather_rows(e, &order)?;
    tape.mean_rows(sorted)
}

/// Convex combination of the rows with weights `softmax(H · vec(E))`.
pub fn dense_avg_on(tape: &mut Tape, e: Var, h_dense: Var) -> Result<Var> {
    let (n, k) = check_group_matrix("dense_avg", tape, e)?;
    let h_shape = tape.shape(h_dense).to_vec();
    if h_shape.len() != 2 || !h_shape[1].is_multiple_of(k) || h_shape[0] * k != h_shape[1] {
        return Err(Error::dim("dense_avg", &[n, k], &h_shape));
    }
    if h_shape[0] != n {
        return Err(Error::Contract(format!(
            "dense averaging expects groups of exactly {} images but got {n}; \
             normalize the group size first",
            h_shape[0]
        )));
    }
    let flat = tape.reshape(e, &[n * k, 1])?;
    let logits = tape.matmul(h_dense, flat)?;
    let logits = tape.reshape(logits, &[n])?;
    let w = tape.softmax(logits)?;
    let w = tape.reshape(w, &[1, n])?;
    let avg = tape.matmul(w, e)?;
    tape.reshape(avg, &[k])
}

/// Scaled dot-product attention over the rows, then the row mean of
/// `W ⊙ E`, where `W = softmax(E H1 (E H2)ᵀ / √M) E`.
pub fn self_attn_avg_on(tape: &mut Tape, e: Var, h1: Var, h2: Var) -> Result<Var> {
    let (_, k) = check_group_matrix("self_attn_avg", tape, e)?;
    let (s1, s2) = (tape.shape(h1).to_vec(), tape.shape(h2).to_vec());
    if s1.len() != 2 || s1[0] != k || s1 != s2 {
        return Err(Error::dim("self_attn_avg", &s1, &s2));
    }
    let m = s1[1];
    let q = tape.matmul(e, h1)?;
    let key = tape.matmul(e, h2)?;
    let key_t = tape.transpose(key)?;
    let scores = tape.matmul(q, key_t)?;
    let scores = tape.scale(scores, 1.0 / (m as f64).sqrt())?;
    let attn = tape.softmax(scores)?;
    let w = tape.matmul(attn, e)?;
    let prod = tape.mul(w, e)?;
    tape.mean_rows(prod)
}

/// Stacks the configured encoder inputs for one group.
pub fn build_encoder_features_on(
    tape: &mut Tape,
    e: Var,
    config: &FeatureConfig,
    params: &AggregationVars,
) -> Result<EncoderFeatures> {
    config.validate()?;
    let (n, _) = check_group_matrix("build_encoder_features", tape, e)?;
    let mut parts = Vec::new();
    let mut kinds = Vec::new();
    if config.use_individual {
        parts.push(e);
        kinds.extend(std::iter::repeat_n(FeatureKind::Individual, n));
    }
    let missing = |what: &str| Error::Config(format!("{what} averaging needs its learned matrices"));
    let aggregate = match config.averaging {
        Averaging::None => None,
        Averaging::Fixed => Some(fixed_avg_on(tape, e)?),
        Averaging::Dense => Some(dense_avg_on(tape, e, params.h_dense.ok_or_else(|| missing("dense"))?)?),
        Averaging::SelfAttn => {
            let h1 = params.h1.ok_or_else(|| missing("self-attention"))?;
            let h2 = params.h2.ok_or_else(|| missing("self-attention"))?;
            Some(self_attn_avg_on(tape, e, h1, h2)?)
        }
    };
    if let Some(a) = aggregate {
        parts.push(a);
        kinds.push(FeatureKind::Aggregate);
    }
    if config.use_sigma {
        parts.push(std_dev_on(tape, e)?);
        kinds.push(FeatureKind::Sigma);
    }
    let values = tape.concat_rows(&parts)?;
    Ok(EncoderFeatures { values, kinds })
}

fn eval_vector(e: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Vec<f64>> {
    let mut tape = Tape::new(true);
    let ev = tape.constant(e.clone())?;
    let out = f(&mut tape, ev)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn std_dev_feature(e: &Tensor) -> Result<Vec<f64>> {
    eval_vector(e, std_dev_on)
}

pub fn fixed_avg(e: &Tensor) -> Result<Vec<f64>> {
    eval_vector(e, fixed_avg_on)
}

pub fn dense_avg(e: &Tensor, h_dense: &Tensor) -> Result<Vec<f64>> {
    eval_vector(e, |tape, ev| {
        let h = tape.constant(h_dense.clone())?;
        dense_avg_on(tape, ev, h)
    })
}

pub fn self_attn_avg(e: &Tensor, h1: &Tensor, h2: &Tensor) -> Result<Vec<f64>> {
    eval_vector(e, |tape, ev| {
        let (a, b) = (tape.constant(h1.clone())?, tape.constant(h2.clone())?);
        self_attn_avg_on(tape, ev, a, b)
    })
}

/// Every aggregate the parameters allow, for inspection and reports.
pub fn aggregate_all(e: &Tensor, params: &AggregationParams) -> Result<AggregatedFeatures> {
    Ok(AggregatedFeatures {
        sigma: Some(std_dev_feature(e)?),
        a_fixed: Some(fixed_avg(e)?),
        a_dense: params.h_dense.as_ref().map(|h| dense_avg(e, h)).transpose()?,
        a_selfattn: match (&params.h1, &params.h2) {
            (Some(h1), Some(h2)) => Some(self_attn_avg(e, h1, h2)?),
            _ => None,
        },
        individual: Some(e.clone()),
    })
}

/// Plain-value version of [`build_encoder_features_on`].
pub fn build_encoder_features(
    group: &ImageGroup,
    config: &FeatureConfig,
    params: &AggregationParams,
) -> Result<Vec<(FeatureKind, Vec<f64>)>> {
    let mut tape = Tape::new(true);
    let e = tape.constant(group.embeddings.clone())?;
    let vars = params.bind(&mut tape, false)?;
    let feats = build_encoder_features_on(&mut tape, e, config, &vars)?;
    let values = tape.value(feats.values);
    Ok(feats
        .kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, values.row(i).to_vec()))
        .collect())
}

/// Resamples a group to exactly `n_model` images: a uniform,
/// order-preserving subset when larger, or rows drawn with replacement
/// appended when smaller.
pub fn normalize_group_size(group: &ImageGroup, n_model: usize, seed: u64) -> Result<ImageGroup> {
    let n = group.n();
    if n == 0 || n_model == 0 {
        return Err(Error::Contract("group sizes must be positive".into()));
    }
    if n == n_model {
        return Ok(group.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = if n > n_model {
        let mut keep = index::sample(&mut rng, n, n_model).into_vec();
        keep.sort_unstable();
        keep
    } else {
        (0..n).chain((n..n_model).map(|_| rng.random_range(0..n))).collect()
    };
    Ok(group.select(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn group(e: Tensor) -> ImageGroup {
        let meta = (0..e.rows())
            .map(|_| ImageMeta {
                width: 200,
                height: 200,
                tags: vec![],
            })
            .collect();
        ImageGroup::new("g", e, meta, "cap").unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(
            std_dev_feature(&m(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap(),
            vec![0.0, 0.0]
        );
        let s = std_dev_feature(&m(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);
        assert_eq!(std_dev_feature(&m(&[&[3.0, -4.0]])).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fixed_avg_examples() {
        assert_eq!(fixed_avg(&m(&[&[1.5, -2.0]])).unwrap(), vec![1.5, -2.0]);
        assert_eq!(fixed_avg(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn dense_avg_examples() {
        let e = m(&[&[2.0], &[4.0]]);
        let a = dense_avg(&e, &Tensor::eye(2)).unwrap();
        // w = softmax(2, 4)
        let w1 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((a[0] - (2.0 * (1.0 - w1) + 4.0 * w1)).abs() < 1e-12);
        assert!((a[0] - 3.76159).abs() < 1e-5);

        let e = m(&[&[1.0, 5.0, -2.0], &[0.5, 1.0, 3.0], &[2.0, 2.0, 2.0]]);
        let a = dense_avg(&e, &Tensor::zeros(&[3, 9])).unwrap();
        let f = fixed_avg(&e).unwrap();
        for (x, y) in a.iter().zip(&f) {
            assert!((x - y).abs() < 1e-12);
        }

        let single = m(&[&[0.25, 7.0]]);
        assert_eq!(dense_avg(&single, &Tensor::zeros(&[1, 2])).unwrap(), vec![0.25, 7.0]);
    }

    #[test]
    fn dense_avg_requires_model_group_size() {
        let e = m(&[&[1.0], &[2.0], &[3.0]]);
        let err = dense_avg(&e, &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }), "{err}");
        let e2 = m(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]]);
        let err = dense_avg(&e2, &Tensor::zeros(&[2, 4])).unwrap_err();
        assert!(err.to_string().contains("normalize"), "{err}");
    }

    #[test]
    fn self_attn_zero_weights() {
        let z = Tensor::zeros(&[1, 1]);
        assert_eq!(self_attn_avg(&m(&[&[2.0], &[0.0]]), &z, &z).unwrap(), vec![1.0]);
        let z2 = Tensor::zeros(&[2, 3]);
        let out = self_attn_avg(&m(&[&[1.5, -3.0]]), &z2, &z2).unwrap();
        assert!((out[0] - 2.25).abs() < 1e-15 && (out[1] - 9.0).abs() < 1e-15);
    }

    #[test]
    fn self_attn_shape_mismatch() {
        let e = m(&[&[1.0, 2.0]]);
        assert!(self_attn_avg(&e, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3, 2])).is_err());
        assert!(self_attn_avg(&e, &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn encoder_feature_layouts() {
        let rows: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64, 1.0]).collect();
        let g = group(Tensor::from_rows(&rows).unwrap());
        let none = AggregationParams::default();

        let f = build_encoder_features(&g, &FeatureConfig::new(true, Averaging::None, false), &none).unwrap();
        assert_eq!(f.len(), 16);
        assert!(f.iter().all(|(k, _)| *k == FeatureKind::Individual));

        let g8 = normalize_group_size(&g, 8, 1).unwrap();
        let dense = AggregationParams {
            h_dense: Some(Tensor::zeros(&[8, 16])),
            ..Default::default()
        };
        let f = build_encoder_features(&g8, &FeatureConfig::new(false, Averaging::Dense, true), &dense).unwrap();
        assert_eq!(
            f.iter().map(|(k, _)| *k).collect::<Vec<_>>(),
            vec![FeatureKind::Aggregate, FeatureKind::Sigma]
        );

        let err = build_encoder_features(&g, &FeatureConfig::new(false, Averaging::None, true), &none);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn grid_has_fourteen_configs() {
        let all = FeatureConfig::all_valid();
        assert_eq!(all.len(), 14);
        assert!(all.contains(&FeatureConfig::new(false, Averaging::Dense, true)));
    }

    #[test]
    fn normalize_sizes() {
        let rows: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let g = group(Tensor::from_rows(&rows).unwrap());
        assert_eq!(normalize_group_size(&g, 3, 9).unwrap(), g);

        let up = normalize_group_size(&g, 5, 9).unwrap();
        assert_eq!(up.n(), 5);
        assert_eq!(&up.embeddings.data()[..3], g.embeddings.data());
        assert!(up.embeddings.data()[3..]
            .iter()
            .all(|v| g.embeddings.data().contains(v)));

        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let big = group(Tensor::from_rows(&rows).unwrap());
        let down = normalize_group_size(&big, 4, 2).unwrap();
        let kept = down.embeddings.data();
        assert_eq!(kept.len(), 4);
        assert!(kept.windows(2).all(|w| w[0] < w[1]), "order preserved: {kept:?}");
    }
}
