//! Dataset loading, synthesis, normalization, and splits.
//!
//! Series live in a [`LabeledSeriesSet`]: an `[n, L]` feature tensor with one
//! integer label per row. Sets are immutable once built (normalization
//! replaces the whole set), so they can be shared freely across workers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Global normalization statistics, always computed on a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// A set of univariate series with class labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabeledSeriesSet {
    name: String,
    /// [n, L]
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    /// Original file labels by class index, when loaded from disk.
    original_labels: Option<Vec<i64>>,
    /// Stats that have been applied to these features, if any.
    stats: Option<NormStats>,
}

impl LabeledSeriesSet {
    pub fn from_parts(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape(
                "series set",
                "[n,L]".to_string(),
                format!("{:?}", features.shape()),
            ));
        }
        let name = name.into();
        if features.shape()[0] == 0 {
            return Err(Error::EmptyDataset(name));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "series set",
                format!("{} labels", features.shape()[0]),
                format!("{}", labels.len()),
            ));
        }
        for &label in &labels {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    n_classes,
                });
            }
        }
        Ok(Self {
            name,
            features,
            labels,
            n_classes,
            original_labels: None,
            stats: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Number of series.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Series length L.
    pub fn series_length(&self) -> usize {
        self.features.shape()[1]
    }

    /// Labels as they appeared in the source file, when loaded from one.
    pub fn original_labels(&self) -> Option<&[i64]> {
        self.original_labels.as_deref()
    }

    pub fn stats(&self) -> Option<NormStats> {
        self.stats
    }

    /// Labels as one-hot rows, [n, n_classes].
    pub fn one_hot_labels(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.len(), self.n_classes]);
        for (i, &label) in self.labels.iter().enumerate() {
            t.values_mut()[i * self.n_classes + label] = 1.0;
        }
        t
    }

    /// New set restricted to `indices`, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let length = self.series_length();
        let mut values = Vec::with_capacity(indices.len() * length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        let features = Tensor::new(vec![indices.len(), length], values)?;
        let mut out = Self::from_parts(name, features, labels, self.n_classes)?;
        out.stats = self.stats;
        Ok(out)
    }

    /// Seeded shuffle split: first `hold_frac` of the permutation is held
    /// out, the rest is kept. Returns (kept, held_out).
    pub fn split_holdout(&self, hold_frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&hold_frac) {
            return Err(Error::InvalidConfig(format!(
                "holdout fraction {hold_frac} not in [0,1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng::rng_from(seed, rng::streams::SPLIT);
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_hold = ((self.len() as f64) * hold_frac).round() as usize;
        let held = self.subset(format!("{}-holdout", self.name), &order[..n_hold])?;
        let kept = self.subset(format!("{}-kept", self.name), &order[n_hold..])?;
        Ok((kept, held))
    }

    /// Replace features with `(x - mean) / std`. Composing two applications
    /// is not the same as one; freeze stats on the training set first.
    pub fn apply_stats(&mut self, stats: NormStats) {
        let std = stats.std.max(1e-8);
        for v in self.features.values_mut() {
            *v = (*v - stats.mean) / std;
        }
        self.stats = Some(stats);
    }

    /// Serialize in the same TSV layout `load_ucr_tsv` reads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let label = match &self.original_labels {
                Some(map) => map[self.labels[i]],
                None => self.labels[i] as i64,
            };
            out.push_str(&label.to_string());
            for v in self.features.row(i) {
                out.push('\t');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Compute global mean/std over every value of `train`, floor the std, and
/// apply the frozen stats to the training set and all `others`.
pub fn zscore_normalize(
    train: &mut LabeledSeriesSet,
    others: &mut [&mut LabeledSeriesSet],
) -> NormStats {
    let values = train.features().values();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let stats = NormStats {
        mean,
        std: var.sqrt().max(1e-8),
    };
    train.apply_stats(stats);
    for set in others {
        set.apply_stats(stats);
    }
    stats
}

/// Which synthetic generator to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Class 0: sin(2*pi*t/L); class 1: sin(4*pi*t/L); additive noise.
    TwoSine,
    /// Gaussian bump with jittered centre; class 1 is twice as wide.
    WarpedBump,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_per_class: usize,
    pub length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_per_class < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 series per class, got {}",
                self.n_per_class
            )));
        }
        if self.length < 4 {
            return Err(Error::InvalidConfig(format!(
                "series length {} too short",
                self.length
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Generate a two-class synthetic set; deterministic in the spec seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledSeriesSet> {
    spec.validate()?;
    let length = spec.length;
    let n = 2 * spec.n_per_class;
    let mut rng = rng::rng_from(spec.seed, rng::streams::DATA);
    let mut values = Vec::with_capacity(n * length);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2usize {
        for _ in 0..spec.n_per_class {
            match spec.kind {
                SyntheticKind::TwoSine => {
                    let cycles = (class + 1) as f64;
                    for t in 0..length {
                        let base =
                            (2.0 * std::f64::consts::PI * cycles * t as f64 / length as f64).sin();
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        values.push(base + spec.noise_std * noise);
                    }
                }
                SyntheticKind::WarpedBump => {
                    let centre = length as f64 * rng.gen_range(0.35..0.65);
                    let width = length as f64 / if class == 0 { 16.0 } else { 8.0 };
                    for t in 0..length {
                        let z = (t as f64 - centre) / width;
                        let base = (-0.5 * z * z).exp();
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        values.push(base + spec.noise_std * noise);
                    }
                }
            }
            labels.push(class);
        }
    }
    let name = match spec.kind {
        SyntheticKind::TwoSine => "two_sine",
        SyntheticKind::WarpedBump => "warped_bump",
    };
    LabeledSeriesSet::from_parts(name, Tensor::new(vec![n, length], values)?, labels, 2)
}

/// Load a UCR-archive-style TSV: one series per line, tab-separated, class
/// label in the first column. Labels are remapped to contiguous 0-based
/// integers in ascending order of the original values.
pub fn load_ucr_tsv(path: &Path) -> Result<LabeledSeriesSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_ucr_tsv(&text, &name, &path.display().to_string())
}

fn parse_ucr_tsv(text: &str, name: &str, path: &str) -> Result<LabeledSeriesSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut length: Option<usize> = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let label_cell = cells.next().expect("split yields at least one cell");
        let label: f64 = label_cell
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("non-numeric label `{label_cell}`")))?;
        if label.fract() != 0.0 {
            return Err(parse_err(lineno, format!("non-integer label {label}")));
        }
        let mut row_len = 0usize;
        for cell in cells {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("non-numeric cell `{cell}`")))?;
            values.push(v);
            row_len += 1;
        }
        match length {
            None => {
                if row_len == 0 {
                    return Err(parse_err(lineno, "row has no feature columns".to_string()));
                }
                length = Some(row_len);
            }
            Some(expected) if expected != row_len => {
                return Err(parse_err(
                    lineno,
                    format!("ragged row: expected {expected} values, got {row_len}"),
                ));
            }
            Some(_) => {}
        }
        raw_labels.push(label as i64);
    }
    let Some(length) = length else {
        return Err(Error::EmptyDataset(path.to_string()));
    };

    let mut class_of: BTreeMap<i64, usize> = BTreeMap::new();
    for &raw in &raw_labels {
        class_of.entry(raw).or_insert(0);
    }
    for (next, slot) in class_of.values_mut().enumerate() {
        *slot = next;
    }
    let labels: Vec<usize> = raw_labels.iter().map(|raw| class_of[raw]).collect();
    let original: Vec<i64> = class_of.keys().copied().collect();

    let n = labels.len();
    let features = Tensor::new(vec![n, length], values)?;
    let mut set = LabeledSeriesSet::from_parts(name, features, labels, class_of.len())?;
    set.original_labels = Some(original);
    Ok(set)
}
