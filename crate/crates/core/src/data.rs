//! Synthetic multi-image caption data.
//!
//! Every image is the sum of one attribute direction per concept axis plus
//! Gaussian noise. A group shares the attributes of one to three axes and
//! its caption names those shared attributes. The remaining axes vary from
//! image to image, so the shared concept is what survives averaging.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{ImageGroup, ImageMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenize::words;

pub const BRANDS: [&str; 3] = ["acme", "globex", "initech"];

/// Axes in caption order: "vintage red gold ring".
const STANDARD_AXES: [(&str, [&str; 8]); 4] = [
    (
        "style",
        [
            "vintage",
            "modern",
            "rustic",
            "minimalist",
            "classic",
            "industrial",
            "bohemian",
            "retro",
        ],
    ),
    (
        "color",
        ["red", "blue", "green", "black", "white", "yellow", "pink", "gray"],
    ),
    (
        "material",
        [
            "gold", "silver", "copper", "wooden", "leather", "ceramic", "glass", "cotton",
        ],
    ),
    (
        "category",
        ["ring", "mug", "lamp", "chair", "bag", "kettle", "vase", "shirt"],
    ),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub attributes: Vec<String>,
    /// Unit vectors, one per attribute, orthonormal within the axis.
    pub directions: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of the noise this axis adds to
    /// each image, relative to the unit attribute norm.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpace {
    pub k: usize,
    pub axes: Vec<Axis>,
}

impl ConceptSpace {
    /// Random orthonormal directions per axis (Gram-Schmidt on Gaussian
    /// draws).
    pub fn new(k: usize, axes: &[(&str, &[&str])], noise: f64, seed: u64) -> Result<ConceptSpace> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise must be a non-negative number, got {noise}"
            )));
        }
        let mut seen = HashSet::new();
        for (_, attrs) in axes {
            for a in *attrs {
                if a.split_whitespace().count() != 1 || !seen.insert(*a) {
                    return Err(Error::Config(format!(
                        "attribute {a:?} is duplicated or not a single word"
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::with_capacity(axes.len());
        for (name, attrs) in axes {
            if attrs.len() > k {
                return Err(Error::Config(format!(
                    "axis {name} has {} attributes but K = {k}; directions cannot be independent",
                    attrs.len()
                )));
            }
            let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(attrs.len());
            while dirs.len() < attrs.len() {
                let mut v: Vec<f64> = (0..k).map(|_| std_normal.sample(&mut rng)).collect();
                for d in &dirs {
                    let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    dirs.push(v);
                }
            }
            out.push(Axis {
                name: name.to_string(),
                attributes: attrs.iter().map(|s| s.to_string()).collect(),
                directions: dirs,
                noise,
            });
        }
        Ok(ConceptSpace { k, axes: out })
    }

    /// Style, color, material and category axes of eight attributes each.
    pub fn standard(k: usize, noise: f64, seed: u64) -> Result<ConceptSpace> {
        let axes: Vec<(&str, &[&str])> = STANDARD_AXES.iter().map(|(n, a)| (*n, &a[..])).collect();
        ConceptSpace::new(k, &axes, noise, seed)
    }

    /// Sum of the directions of `(axis, attribute)` choices.
    pub fn point(&self, choices: &[(usize, usize)]) -> Vec<f64> {
        let mut p = vec![0.0; self.k];
        for &(axis, attr) in choices {
            for (x, d) in p.iter_mut().zip(&self.axes[axis].directions[attr]) {
                *x += d;
            }
        }
        p
    }

    /// Attribute names of `choices` in axis order.
    pub fn phrase(&self, choices: &[(usize, usize)]) -> String {
        let mut sorted = choices.to_vec();
        sorted.sort_unstable();
        sorted
            .iter()
            .map(|&(axis, attr)| self.axes[axis].attributes[attr].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub group: ImageGroup,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub k: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_images: usize,
    pub max_images: usize,
    pub min_shared_axes: usize,
    pub max_shared_axes: usize,
    pub noise: f64,
    /// Chance that an image is too small or too elongated.
    pub bad_image_rate: f64,
    /// Chance that a caption starts with a brand name.
    pub brand_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            k: 16,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            min_images: 5,
            max_images: 20,
            min_shared_axes: 1,
            max_shared_axes: 3,
            noise: 0.1,
            bad_image_rate: 0.005,
            brand_rate: 0.1,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, space: &ConceptSpace) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k != space.k {
            return bad(format!("generator K = {} but concept space K = {}", self.k, space.k));
        }
        if self.min_images == 0 || self.min_images > self.max_images {
            return bad(format!(
                "bad images-per-group range {}..={}",
                self.min_images, self.max_images
            ));
        }
        if self.min_shared_axes == 0
            || self.min_shared_axes > self.max_shared_axes
            || self.max_shared_axes > space.axes.len()
        {
            return bad(format!(
                "bad shared-axes range {}..={} for {} axes",
                self.min_shared_axes,
                self.max_shared_axes,
                space.axes.len()
            ));
        }
        for (name, p) in [("bad_image_rate", self.bad_image_rate), ("brand_rate", self.brand_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    pub fn total_groups(&self) -> usize {
        self.n_train + self.n_valid + self.n_test
    }
}

/// Width and height around 542 x 494 pixels.
fn sample_size(rng: &mut ChaCha8Rng, bad_rate: f64) -> (u32, u32) {
    let w = Normal::new(542.0f64, 120.0).unwrap().sample(rng).clamp(150.0, 1200.0);
    let h = Normal::new(494.0f64, 110.0).unwrap().sample(rng).clamp(150.0, 1200.0);
    let (w, h) = (w.round() as u32, h.round() as u32);
    if rng.random::<f64>() >= bad_rate {
        return (w, h);
    }
    match rng.random_range(0..3) {
        0 => (rng.random_range(20..100), h),
        1 => (w, (w / 4).max(1)),
        _ => ((h / 4).max(1), h),
    }
}

fn generate_group(space: &ConceptSpace, cfg: &GeneratorConfig, index: usize) -> DatasetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let k = space.k;
    let n = rng.random_range(cfg.min_images..=cfg.max_images);
    let n_shared = rng.random_range(cfg.min_shared_axes..=cfg.max_shared_axes);
    let mut axes: Vec<usize> = (0..space.axes.len()).collect();
    axes.shuffle(&mut rng);
    let shared: BTreeMap<usize, usize> = axes[..n_shared]
        .iter()
        .map(|&a| (a, rng.random_range(0..space.axes[a].attributes.len())))
        .collect();

    let mut data = Vec::with_capacity(n * k);
    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        let choices: Vec<(usize, usize)> = (0..space.axes.len())
            .map(|a| {
                let attr = shared
                    .get(&a)
                    .copied()
                    .unwrap_or_else(|| rng.random_range(0..space.axes[a].attributes.len()));
                (a, attr)
            })
            .collect();
        let mut e = space.point(&choices);
        for axis in &space.axes {
            let noise = Normal::new(0.0, axis.noise).unwrap();
            e.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
        }
        data.extend(e);
        let (width, height) = sample_size(&mut rng, cfg.bad_image_rate);
        meta.push(ImageMeta {
            width,
            height,
            tags: choices
                .iter()
                .map(|&(a, attr)| space.axes[a].attributes[attr].clone())
                .collect(),
        });
    }

    let shared: Vec<(usize, usize)> = shared.into_iter().collect();
    let mut caption = space.phrase(&shared);
    if rng.random::<f64>() < cfg.brand_rate {
        caption = format!("{} {caption}", BRANDS.choose(&mut rng).unwrap());
    }
    let split = if index < cfg.n_train {
        Split::Train
    } else if index < cfg.n_train + cfg.n_valid {
        Split::Valid
    } else {
        Split::Test
    };
    DatasetRecord {
        group: ImageGroup {
            group_id: format!("g{index:06}"),
            embeddings: Tensor::new(vec![n, k], data).expect("n x k data"),
            image_meta: meta,
            caption,
        },
        split,
    }
}

/// Train, then valid, then test groups. Each group draws from its own
/// ChaCha stream, so the output does not depend on thread scheduling.
pub fn generate_synthetic_dataset(space: &ConceptSpace, cfg: &GeneratorConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate(space)?;
    Ok((0..cfg.total_groups())
        .into_par_iter()
        .map(|i| generate_group(space, cfg, i))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_images: usize,
    /// Bound on the longer side over the shorter side.
    pub max_aspect_ratio: f64,
    /// Both sides must be strictly larger.
    pub min_dimension_px: u32,
    pub entity_stoplist: Vec<String>,
    pub require_label_tag_match: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_images: 5,
            max_aspect_ratio: 3.0,
            min_dimension_px: 100,
            entity_stoplist: BRANDS.iter().map(|s| s.to_string()).collect(),
            require_label_tag_match: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_images == 0
            || self.min_dimension_px == 0
            || self.max_aspect_ratio.is_nan()
            || self.max_aspect_ratio <= 0.0
        {
            return Err(Error::Config("filter thresholds must be positive".into()));
        }
        if self.entity_stoplist.iter().any(|s| s.is_empty()) {
            return Err(Error::Config("stoplist entries must be non-empty".into()));
        }
        Ok(())
    }

    pub fn image_ok(&self, m: &ImageMeta) -> bool {
        let (w, h) = (m.width as f64, m.height as f64);
        m.width > self.min_dimension_px
            && m.height > self.min_dimension_px
            && (w / h).max(h / w) <= self.max_aspect_ratio
    }

    /// Deletes stoplist substrings and collapses whitespace.
    pub fn clean_caption(&self, caption: &str) -> String {
        let mut c = caption.to_string();
        for s in &self.entity_stoplist {
            c = c.replace(s.as_str(), " ");
        }
        c.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    /// Whether an already-cleaned group passes every filter.
    pub fn accepts(&self, g: &ImageGroup) -> bool {
        if g.n() < self.min_images || !g.image_meta.iter().all(|m| self.image_ok(m)) {
            return false;
        }
        if g.caption.trim().is_empty() {
            return false;
        }
        if self.require_label_tag_match {
            let tags: HashSet<String> = g
                .image_meta
                .iter()
                .flat_map(|m| m.tags.iter().map(|t| t.to_lowercase()))
                .collect();
            return words(&g.caption).iter().any(|w| tags.contains(w));
        }
        true
    }
}

pub fn apply_group_filters(records: Vec<DatasetRecord>, cfg: &FilterConfig) -> Vec<DatasetRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            r.group.caption = cfg.clean_caption(&r.group.caption);
            cfg.accepts(&r.group).then_some(r)
        })
        .collect()
}

/// One 1-image group per image, captioned with its full tag phrase.
pub fn make_single_image_dataset(records: &[DatasetRecord]) -> Vec<DatasetRecord> {
    records
        .iter()
        .flat_map(|r| {
            let g = &r.group;
            (0..g.n()).map(move |i| DatasetRecord {
                group: ImageGroup {
                    group_id: format!("{}/{i}", g.group_id),
                    embeddings: Tensor::new(vec![1, g.k()], g.embeddings.row(i).to_vec()).expect("one row"),
                    image_meta: vec![g.image_meta[i].clone()],
                    caption: g.image_meta[i].tags.join(" "),
                },
                split: r.split,
            })
        })
        .collect()
}

pub fn split_of(records: &[DatasetRecord], split: Split) -> Vec<ImageGroup> {
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| r.group.clone())
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    group_id: String,
    split: Split,
    caption: String,
    embeddings: Vec<Vec<f64>>,
    image_meta: Vec<ImageMeta>,
}

impl DatasetRecord {
    pub fn to_json_line(&self) -> String {
        let g = &self.group;
        let rec = RecordJson {
            group_id: g.group_id.clone(),
            split: self.split,
            caption: g.caption.clone(),
            embeddings: (0..g.n()).map(|i| g.embeddings.row(i).to_vec()).collect(),
            image_meta: g.image_meta.clone(),
        };
        serde_json::to_string(&rec).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<DatasetRecord> {
        let rec: RecordJson = serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
        let n = rec.embeddings.len();
        let k = rec.embeddings.first().map_or(0, Vec::len);
        if let Some(bad) = rec.embeddings.iter().find(|r| r.len() != k) {
            return Err(Error::Data(format!(
                "group {}: ragged embeddings ({} vs {k} values)",
                rec.group_id,
                bad.len()
            )));
        }
        let embeddings = Tensor::new(vec![n, k], rec.embeddings.concat())?;
        Ok(DatasetRecord {
            group: ImageGroup::new(rec.group_id, embeddings, rec.image_meta, rec.caption)?,
            split: rec.split,
        })
    }
}

pub fn save_jsonl(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = DatasetRecord::from_json_line(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-split averages with the columns of a dataset statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub size: usize,
    pub avg_aspect_ratio: f64,
    pub avg_height: f64,
    pub avg_width: f64,
    pub avg_caption_bytes: f64,
    pub avg_caption_tokens: f64,
    pub avg_num_images: f64,
}

fn mean_of(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Keyed by split name. Values are sorted before summing, so record order
/// does not matter.
pub fn dataset_stats(records: &[DatasetRecord]) -> Result<BTreeMap<String, SplitStats>> {
    if records.is_empty() {
        return Err(Error::Data("no records to summarize".into()));
    }
    let mut by_split: BTreeMap<Split, Vec<&ImageGroup>> = BTreeMap::new();
    for r in records {
        by_split.entry(r.split).or_default().push(&r.group);
    }
    Ok(by_split
        .into_iter()
        .map(|(split, groups)| {
            let images = || groups.iter().flat_map(|g| g.image_meta.iter());
            let stats = SplitStats {
                size: groups.len(),
                avg_aspect_ratio: mean_of(images().map(ImageMeta::aspect_ratio).collect()),
                avg_height: mean_of(images().map(|m| m.height as f64).collect()),
                avg_width: mean_of(images().map(|m| m.width as f64).collect()),
                avg_caption_bytes: mean_of(groups.iter().map(|g| g.caption.len() as f64).collect()),
                avg_caption_tokens: mean_of(groups.iter().map(|g| words(&g.caption).len() as f64).collect()),
                avg_num_images: mean_of(groups.iter().map(|g| g.n() as f64).collect()),
            };
            (split.as_str().to_string(), stats)
        })
        .collect())
}
