//! Synthetic bimodal datasets, similarity-set construction, and dataset
//! file I/O.
//!
//! The generator stands in for web-scale tagged-image corpora: each class
//! gets an image prototype (Gaussian) and a text prototype of tag
//! probabilities; items carry one or occasionally two class labels, with
//! image features near the mean of their class prototypes and text features
//! drawn as per-tag Bernoulli occurrences.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::losses::SimilaritySet;
use crate::matrix::{dot, Matrix};
use crate::{Error, Result};

pub const IMAGE_FEATURES_FILE: &str = "image_features.tsv";
pub const TEXT_FEATURES_FILE: &str = "text_features.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const SPLIT_FILE: &str = "split.txt";

/// A collection of bimodal items: image features, text features, and
/// multi-hot labels, all row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct BimodalDataset {
    pub image_features: Matrix,
    pub text_features: Matrix,
    pub labels: Matrix,
}

impl BimodalDataset {
    pub fn new(image_features: Matrix, text_features: Matrix, labels: Matrix) -> Result<Self> {
        let n = image_features.rows();
        if text_features.rows() != n || labels.rows() != n {
            return Err(Error::Shape(format!(
                "row counts differ: {} image, {} text, {} label rows",
                n,
                text_features.rows(),
                labels.rows()
            )));
        }
        if !image_features.is_finite() || !text_features.is_finite() {
            return Err(Error::Input("non-finite feature values".into()));
        }
        Ok(BimodalDataset {
            image_features,
            text_features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.image_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows of a feature matrix restricted to `indices`.
    pub fn select(matrix: &Matrix, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), matrix.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(matrix.row(i));
        }
        out
    }
}

/// Parameters for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub classes: usize,
    /// Standard deviation of the Gaussian added to image features.
    pub noise: f64,
    pub seed: u64,
    /// Probability that an item carries a second, distinct class label.
    pub second_label_prob: f64,
}

impl SyntheticConfig {
    pub fn new(
        n: usize,
        image_dim: usize,
        text_dim: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            n,
            image_dim,
            text_dim,
            classes,
            noise,
            seed,
            second_label_prob: 0.2,
        }
    }
}

/// Deterministically generates a labeled bimodal dataset.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<BimodalDataset> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.noise < 0.0 || !cfg.noise.is_finite() {
        return Err(Error::Config(format!(
            "noise must be >= 0, got {}",
            cfg.noise
        )));
    }
    if cfg.n == 0 || cfg.image_dim == 0 || cfg.text_dim == 0 {
        return Err(Error::Config("n and feature dims must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.second_label_prob) {
        return Err(Error::Config(format!(
            "second_label_prob must lie in [0, 1), got {}",
            cfg.second_label_prob
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;

    // Class prototypes.
    let mut image_protos = Matrix::zeros(cfg.classes, cfg.image_dim);
    for c in 0..cfg.classes {
        for v in image_protos.row_mut(c) {
            *v = normal.sample(&mut rng);
        }
    }
    let mut text_protos = Matrix::zeros(cfg.classes, cfg.text_dim);
    for c in 0..cfg.classes {
        for v in text_protos.row_mut(c) {
            *v = rng.random::<f64>();
        }
    }

    let mut image_features = Matrix::zeros(cfg.n, cfg.image_dim);
    let mut text_features = Matrix::zeros(cfg.n, cfg.text_dim);
    let mut labels = Matrix::zeros(cfg.n, cfg.classes);

    for i in 0..cfg.n {
        let first = rng.random_range(0..cfg.classes);
        let mut item_classes = vec![first];
        if rng.random::<f64>() < cfg.second_label_prob {
            let mut second = rng.random_range(0..cfg.classes - 1);
            if second >= first {
                second += 1;
            }
            item_classes.push(second);
        }
        for &c in &item_classes {
            labels.set(i, c, 1.0);
        }

        let k = item_classes.len() as f64;
        for (d, v) in image_features.row_mut(i).iter_mut().enumerate() {
            let mean: f64 = item_classes
                .iter()
                .map(|&c| image_protos.get(c, d))
                .sum::<f64>()
                / k;
            let noise: f64 = normal.sample(&mut rng);
            *v = mean + cfg.noise * noise;
        }
        for (d, v) in text_features.row_mut(i).iter_mut().enumerate() {
            let p: f64 = item_classes
                .iter()
                .map(|&c| text_protos.get(c, d))
                .sum::<f64>()
                / k;
            *v = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        }
    }

    BimodalDataset::new(image_features, text_features, labels)
}

/// Whether two label rows share at least one set label.
pub fn share_label(a: &[f64], b: &[f64]) -> bool {
    dot(a, b) != 0.0
}

/// Output of [`build_similarity`]: the sampled pairs plus how well the
/// requested positive/negative balance was met.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBuild {
    pub set: SimilaritySet,
    pub positive_fraction: f64,
    /// True when the achieved balance deviates more than 0.05 from the
    /// target (e.g. every item shares a label, so negatives do not exist).
    pub balance_warning: bool,
}

/// Samples up to `pair_budget` distinct labeled pairs, aiming for the given
/// fraction of positives. Pairs are canonicalized to `i < j`; self-pairs and
/// duplicates never occur. When the target balance is infeasible the budget
/// is still filled best-effort and a warning flag is raised.
pub fn build_similarity(
    labels: &Matrix,
    pair_budget: usize,
    balance: f64,
    seed: u64,
) -> Result<SimilarityBuild> {
    let n = labels.rows();
    if pair_budget == 0 {
        return Err(Error::Config("pair budget must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Config(format!(
            "balance must lie in [0, 1], got {balance}"
        )));
    }
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 items to form pairs, got {n}"
        )));
    }

    let total_pairs = n * (n - 1) / 2;
    let budget = pair_budget.min(total_pairs);
    let target_pos = (budget as f64 * balance).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::with_capacity(budget * 2);
    let mut chosen: Vec<(usize, usize, i8)> = Vec::with_capacity(budget);
    let mut positives = 0usize;

    // Phase 1: rejection sampling with class quotas.
    let mut attempts = 0usize;
    let max_attempts = 200 * budget + 10_000;
    while chosen.len() < budget && attempts < max_attempts {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let (i, j) = (a.min(b), a.max(b));
        if seen.contains(&(i, j)) {
            continue;
        }
        let positive = share_label(labels.row(i), labels.row(j));
        let want = if positive {
            positives < target_pos
        } else {
            chosen.len() - positives < budget - target_pos
        };
        if !want {
            continue;
        }
        seen.insert((i, j));
        positives += usize::from(positive);
        chosen.push((i, j, if positive { 1 } else { -1 }));
    }

    // Phase 2: fill remaining slots with whatever pairs exist, in shuffled
    // deterministic order, ignoring the quota.
    if chosen.len() < budget {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .collect();
        all.shuffle(&mut rng);
        for (i, j) in all {
            if chosen.len() >= budget {
                break;
            }
            if seen.contains(&(i, j)) {
                continue;
            }
            let positive = share_label(labels.row(i), labels.row(j));
            seen.insert((i, j));
            positives += usize::from(positive);
            chosen.push((i, j, if positive { 1 } else { -1 }));
        }
    }

    let positive_fraction = positives as f64 / chosen.len() as f64;
    let balance_warning = (positive_fraction - balance).abs() > 0.05 || pair_budget > total_pairs;
    Ok(SimilarityBuild {
        set: SimilaritySet::new(chosen)?,
        positive_fraction,
        balance_warning,
    })
}

/// Disjoint train/query/validation index lists over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub val: Vec<usize>,
}

impl SplitSpec {
    pub fn new(train: Vec<usize>, query: Vec<usize>, val: Vec<usize>) -> Result<Self> {
        let spec = SplitSpec { train, query, val };
        spec.validate(usize::MAX)?;
        Ok(spec)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, list) in [
            ("train", &self.train),
            ("query", &self.query),
            ("val", &self.val),
        ] {
            for &i in list.iter() {
                if n != usize::MAX && i >= n {
                    return Err(Error::Index(format!(
                        "{name} index {i} out of range for {n} items"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Index(format!(
                        "index {i} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Randomly partitions `0..n` into train / query / validation.
pub fn make_split(n: usize, query: usize, val: usize, seed: u64) -> Result<SplitSpec> {
    if query + val >= n {
        return Err(Error::Config(format!(
            "query ({query}) + val ({val}) must leave at least one training item out of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let query_list = order[..query].to_vec();
    let val_list = order[query..query + val].to_vec();
    let train_list = order[query + val..].to_vec();
    SplitSpec::new(train_list, query_list, val_list)
}

// --- file I/O ---------------------------------------------------------------

/// Writes a feature matrix as UTF-8 text, one item per line, tab-separated
/// full-precision decimals.
pub fn save_features(path: &Path, matrix: &Matrix) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    for i in 0..matrix.rows() {
        let mut first = true;
        for v in matrix.row(i) {
            if first {
                write!(out, "{v}")?;
                first = false;
            } else {
                write!(out, "\t{v}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Matrix> {
    let file = crate::error::open_file(path)?;
    parse_tsv(BufReader::new(file), |_, v| Ok(v))
}

/// Labels use the same layout with entries restricted to 0 or 1.
pub fn save_labels(path: &Path, labels: &Matrix) -> Result<()> {
    save_features(path, labels)
}

pub fn load_labels(path: &Path) -> Result<Matrix> {
    let file = crate::error::open_file(path)?;
    parse_tsv(BufReader::new(file), |line, v| {
        if v != 0.0 && v != 1.0 {
            return Err(Error::parse(
                line,
                format!("label value '{v}' is not 0 or 1"),
            ));
        }
        Ok(v)
    })
}

fn parse_tsv(
    reader: impl BufRead,
    mut check: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut cols: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for token in line.split('\t') {
            let v: f64 = token
                .trim()
                .parse()
                .map_err(|_| Error::parse(line_no, format!("non-numeric token '{token}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(line_no, format!("non-finite value '{token}'")));
            }
            row.push(check(line_no, v)?);
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("row has {} fields, expected {c}", row.len()),
                ));
            }
            _ => {}
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Writes the split as three lines `train:`, `query:`, `val:` followed by
/// space-separated indices.
pub fn save_split(path: &Path, split: &SplitSpec) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    for (name, list) in [
        ("train", &split.train),
        ("query", &split.query),
        ("val", &split.val),
    ] {
        write!(out, "{name}:")?;
        for i in list.iter() {
            write!(out, " {i}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let file = crate::error::open_file(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let mut parse_section = |expected: &str, line_no: usize| -> Result<Vec<usize>> {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, format!("missing '{expected}:' line")))??;
        let rest = line
            .strip_prefix(expected)
            .and_then(|r| r.strip_prefix(':'))
            .ok_or_else(|| {
                Error::parse(line_no, format!("expected line to start '{expected}:'"))
            })?;
        rest.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::parse(line_no, format!("bad index '{tok}'")))
            })
            .collect()
    };
    let train = parse_section("train", 1)?;
    let query = parse_section("query", 2)?;
    let val = parse_section("val", 3)?;
    SplitSpec::new(train, query, val)
}

/// Writes all four dataset files into a directory.
pub fn save_dataset(dir: &Path, dataset: &BimodalDataset, split: &SplitSpec) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_features(&dir.join(IMAGE_FEATURES_FILE), &dataset.image_features)?;
    save_features(&dir.join(TEXT_FEATURES_FILE), &dataset.text_features)?;
    save_labels(&dir.join(LABELS_FILE), &dataset.labels)?;
    save_split(&dir.join(SPLIT_FILE), split)
}

/// Loads the four dataset files written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(BimodalDataset, SplitSpec)> {
    let image = load_features(&dir.join(IMAGE_FEATURES_FILE))?;
    let text = load_features(&dir.join(TEXT_FEATURES_FILE))?;
    let labels = load_labels(&dir.join(LABELS_FILE))?;
    let dataset = BimodalDataset::new(image, text, labels)?;
    let split = load_split(&dir.join(SPLIT_FILE))?;
    split.validate(dataset.len())?;
    Ok((dataset, split))
}
