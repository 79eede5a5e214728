//! Joint optimization of both modality networks, ablation variants, the
//! encode step, and the (lambda, gamma) validation sweep.
//!
//! Each epoch shuffles the training indices with the run's seeded RNG,
//! walks mini-batches of objects, builds the similarity set over all labeled
//! pairs inside the batch, computes the masked joint loss and its exact
//! output residuals, backpropagates through both networks, and applies one
//! momentum-SGD step per network per batch. Given identical inputs and
//! configuration the final parameters are bit-identical.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{share_label, BimodalDataset, SplitSpec};
use crate::eval::{map_at_r, RelevanceJudge};
use crate::hashing::{binarize, search, HashCodeMatrix};
use crate::losses::{
    accumulate_gradients, embed_batch, joint_loss_weighted, output_residuals_weighted, LossReport,
    LossWeights, SimilaritySet,
};
use crate::matrix::Matrix;
use crate::net::{
    init_network, sgd_step, Activation, ForwardMode, LayerSpec, ModalityNet, OptimizerState,
};
use crate::{Error, Result};

/// Objective variants: the full model and its three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Full objective: cross-modal + within-modal + quantization.
    Chn,
    /// Within-modal correlation only.
    ChnW,
    /// Cross-modal correlation only.
    ChnC,
    /// Both correlation terms, no quantization loss.
    ChnQ,
}

impl Variant {
    /// Effective loss weights for this variant given the configured
    /// (lambda, gamma).
    pub fn loss_weights(self, lambda: f64, gamma: f64) -> LossWeights {
        match self {
            Variant::Chn => LossWeights {
                include_cross: true,
                lambda,
                gamma,
            },
            Variant::ChnW => LossWeights {
                include_cross: false,
                lambda,
                gamma: 0.0,
            },
            Variant::ChnC => LossWeights {
                include_cross: true,
                lambda: 0.0,
                gamma: 0.0,
            },
            Variant::ChnQ => LossWeights {
                include_cross: true,
                lambda,
                gamma: 0.0,
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Chn => "chn",
            Variant::ChnW => "chn-w",
            Variant::ChnC => "chn-c",
            Variant::ChnQ => "chn-q",
        };
        write!(f, "{name}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chn" => Ok(Variant::Chn),
            "chn-w" => Ok(Variant::ChnW),
            "chn-c" => Ok(Variant::ChnC),
            "chn-q" => Ok(Variant::ChnQ),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected chn, chn-w, chn-c, chn-q)"
            ))),
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub bits: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Hidden-layer widths of the image network (input and output dims are
    /// implied by the data and `bits`).
    pub image_layer_dims: Vec<usize>,
    /// Hidden-layer widths of the text network.
    pub text_layer_dims: Vec<usize>,
    pub image_dropout: f64,
    pub text_dropout: f64,
    /// Learning-rate multiplier for the final hashing layer.
    pub fch_lr_multiplier: f64,
    /// Multiply the learning rate by 0.1 every this many epochs; 0 disables.
    pub lr_decay_every: usize,
}

impl TrainConfig {
    pub fn new(bits: usize, epochs: usize) -> Self {
        TrainConfig {
            bits,
            lambda: 1.0,
            gamma: 0.1,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs,
            seed: 0,
            variant: Variant::Chn,
            image_layer_dims: vec![256],
            text_layer_dims: vec![256, 256],
            image_dropout: 0.0,
            text_dropout: 0.5,
            fch_lr_multiplier: 1.0,
            lr_decay_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::Config("bits must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("lambda and gamma must be nonnegative".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.image_dropout) || !(0.0..1.0).contains(&self.text_dropout) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if self.fch_lr_multiplier <= 0.0 {
            return Err(Error::Config(
                "fch learning-rate multiplier must be positive".into(),
            ));
        }
        Ok(())
    }

    fn specs(&self, input_dim: usize, hidden: &[usize], dropout: f64) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &width in hidden {
            specs.push(LayerSpec::new(prev, width, Activation::Relu).with_dropout(dropout));
            prev = width;
        }
        specs.push(LayerSpec::new(prev, self.bits, Activation::Tanh));
        specs
    }

    pub fn image_specs(&self, input_dim: usize) -> Vec<LayerSpec> {
        self.specs(input_dim, &self.image_layer_dims, self.image_dropout)
    }

    pub fn text_specs(&self, input_dim: usize) -> Vec<LayerSpec> {
        self.specs(input_dim, &self.text_layer_dims, self.text_dropout)
    }
}

/// Per-epoch record: mean batch loss, wall time, optional validation MAP@50
/// in both retrieval directions.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub loss: LossReport,
    pub wall_time_secs: f64,
    pub val_map_i2t: Option<f64>,
    pub val_map_t2i: Option<f64>,
}

/// Loss/metric trajectory of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Writes one CSV row per epoch. Wall time is deliberately left out so
    /// identical runs produce byte-identical files.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(
            out,
            "epoch,c_xy,c_xx,c_yy,q_x,q_y,total,val_map_i2t,val_map_t2i"
        )?;
        for (i, rec) in self.epochs.iter().enumerate() {
            let l = &rec.loss;
            let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                i + 1,
                l.c_xy,
                l.c_xx,
                l.c_yy,
                l.q_x,
                l.q_y,
                l.total,
                fmt_opt(rec.val_map_i2t),
                fmt_opt(rec.val_map_t2i),
            )?;
        }
        Ok(())
    }
}

/// Trained networks plus the per-epoch history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub image_net: ModalityNet,
    pub text_net: ModalityNet,
    pub history: TrainHistory,
}

/// Training failure. Divergence carries the last state that was still
/// finite so callers can checkpoint it.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
        checkpoint: Box<TrainOutput>,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

/// All labeled pairs among the items of one mini-batch, with batch-local
/// indices; `s = +1` iff the items share a label.
fn batch_pairs(labels: &Matrix, chunk: &[usize]) -> Result<SimilaritySet> {
    let mut pairs = Vec::with_capacity(chunk.len() * chunk.len().saturating_sub(1) / 2);
    for a in 0..chunk.len() {
        for b in (a + 1)..chunk.len() {
            let s = if share_label(labels.row(chunk[a]), labels.row(chunk[b])) {
                1
            } else {
                -1
            };
            pairs.push((a, b, s));
        }
    }
    SimilaritySet::new(pairs)
}

fn mean_loss_report(sums: &LossReport, batches: usize) -> LossReport {
    let n = batches.max(1) as f64;
    LossReport {
        c_xy: sums.c_xy / n,
        c_xx: sums.c_xx / n,
        c_yy: sums.c_yy / n,
        q_x: sums.q_x / n,
        q_y: sums.q_y / n,
        total: sums.total / n,
        lambda: sums.lambda,
        gamma: sums.gamma,
    }
}

/// Cross-modal MAP@`r` in both directions: image queries against the text
/// codes of the database items, and text queries against the image codes.
pub fn cross_modal_map(
    image_net: &ModalityNet,
    text_net: &ModalityNet,
    dataset: &BimodalDataset,
    query_indices: &[usize],
    db_indices: &[usize],
    r: usize,
) -> Result<(f64, f64)> {
    let query_labels = BimodalDataset::select(&dataset.labels, query_indices);
    let db_labels = BimodalDataset::select(&dataset.labels, db_indices);
    let judge = RelevanceJudge::new(query_labels, db_labels)?;

    let (_, img_query_codes) = encode(
        image_net,
        &BimodalDataset::select(&dataset.image_features, query_indices),
    )?;
    let (_, txt_query_codes) = encode(
        text_net,
        &BimodalDataset::select(&dataset.text_features, query_indices),
    )?;
    let (_, img_db_codes) = encode(
        image_net,
        &BimodalDataset::select(&dataset.image_features, db_indices),
    )?;
    let (_, txt_db_codes) = encode(
        text_net,
        &BimodalDataset::select(&dataset.text_features, db_indices),
    )?;

    let rank_all = |queries: &HashCodeMatrix, db: &HashCodeMatrix| -> Result<Vec<_>> {
        (0..queries.len())
            .map(|q| search(db, queries.item(q), db.len()))
            .collect()
    };

    let i2t = map_at_r(&rank_all(&img_query_codes, &txt_db_codes)?, &judge, r)?;
    let t2i = map_at_r(&rank_all(&txt_query_codes, &img_db_codes)?, &judge, r)?;
    Ok((i2t.mean, t2i.mean))
}

/// Trains both networks jointly. Deterministic per configuration; NaN losses
/// abort with the state from the last completed epoch.
pub fn train(
    dataset: &BimodalDataset,
    split: &SplitSpec,
    config: &TrainConfig,
) -> std::result::Result<TrainOutput, TrainError> {
    train_with_progress(dataset, split, config, |_, _| {})
}

/// [`train`] with a per-epoch callback (epoch index, record), for callers
/// that log progress line by line.
pub fn train_with_progress(
    dataset: &BimodalDataset,
    split: &SplitSpec,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, &EpochRecord),
) -> std::result::Result<TrainOutput, TrainError> {
    config.validate().map_err(TrainError::Core)?;
    split.validate(dataset.len()).map_err(TrainError::Core)?;
    if split.train.is_empty() {
        return Err(TrainError::Core(Error::Config(
            "training split is empty".into(),
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut image_net = init_network(
        &config.image_specs(dataset.image_features.cols()),
        rng.next_u64(),
    )
    .map_err(TrainError::Core)?;
    let mut text_net = init_network(
        &config.text_specs(dataset.text_features.cols()),
        rng.next_u64(),
    )
    .map_err(TrainError::Core)?;

    let mut image_opt = OptimizerState::new(&image_net, config.learning_rate, config.momentum)
        .map_err(TrainError::Core)?
        .with_output_lr_multiplier(config.fch_lr_multiplier);
    let mut text_opt = OptimizerState::new(&text_net, config.learning_rate, config.momentum)
        .map_err(TrainError::Core)?
        .with_output_lr_multiplier(config.fch_lr_multiplier);

    let weights = config.variant.loss_weights(config.lambda, config.gamma);
    let mut history = TrainHistory::default();
    let mut checkpoint = TrainOutput {
        image_net: image_net.clone(),
        text_net: text_net.clone(),
        history: history.clone(),
    };

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if config.lr_decay_every > 0 && epoch > 0 && epoch % config.lr_decay_every == 0 {
            image_opt.learning_rate *= 0.1;
            text_opt.learning_rate *= 0.1;
        }

        let mut order = split.train.clone();
        order.shuffle(&mut rng);

        let mut sums = LossReport {
            c_xy: 0.0,
            c_xx: 0.0,
            c_yy: 0.0,
            q_x: 0.0,
            q_y: 0.0,
            total: 0.0,
            lambda: weights.lambda,
            gamma: weights.gamma,
        };
        let mut batches = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let image_batch = BimodalDataset::select(&dataset.image_features, chunk);
            let text_batch = BimodalDataset::select(&dataset.text_features, chunk);
            let image_seed = rng.next_u64();
            let text_seed = rng.next_u64();

            let step = (|| -> Result<LossReport> {
                let (u, img_traces) = embed_batch(
                    &image_net,
                    &image_batch,
                    ForwardMode::Train {
                        dropout_seed: image_seed,
                    },
                )?;
                let (v, txt_traces) = embed_batch(
                    &text_net,
                    &text_batch,
                    ForwardMode::Train {
                        dropout_seed: text_seed,
                    },
                )?;
                let pairs = batch_pairs(&dataset.labels, chunk)?;
                let report = joint_loss_weighted(&u, &v, &pairs, weights)?;
                if !report.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss became non-finite ({})",
                        report.total
                    )));
                }
                if pairs.is_empty() {
                    return Ok(report);
                }
                // Per-pair mean gradients: batch pair counts scale with
                // batch_size^2, so stepping on raw sums would make the
                // learning rate depend on the batch size.
                let pair_scale = 1.0 / pairs.len() as f64;
                let residuals = output_residuals_weighted(&u, &v, &pairs, weights)?;
                let mut img_grads =
                    accumulate_gradients(&image_net, &img_traces, &residuals.image)?;
                let mut txt_grads = accumulate_gradients(&text_net, &txt_traces, &residuals.text)?;
                img_grads.scale(pair_scale);
                txt_grads.scale(pair_scale);
                sgd_step(&mut image_net, &img_grads, &mut image_opt)?;
                sgd_step(&mut text_net, &txt_grads, &mut text_opt)?;
                let mut per_pair = report;
                per_pair.c_xy *= pair_scale;
                per_pair.c_xx *= pair_scale;
                per_pair.c_yy *= pair_scale;
                per_pair.q_x *= pair_scale;
                per_pair.q_y *= pair_scale;
                per_pair.total *= pair_scale;
                Ok(per_pair)
            })();

            match step {
                Ok(report) => {
                    sums.c_xy += report.c_xy;
                    sums.c_xx += report.c_xx;
                    sums.c_yy += report.c_yy;
                    sums.q_x += report.q_x;
                    sums.q_y += report.q_y;
                    sums.total += report.total;
                    batches += 1;
                }
                Err(Error::Divergence(detail)) => {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                        detail,
                        checkpoint: Box::new(checkpoint),
                    });
                }
                Err(other) => return Err(TrainError::Core(other)),
            }
        }

        let (val_map_i2t, val_map_t2i) = if split.val.is_empty() {
            (None, None)
        } else {
            let (i2t, t2i) =
                cross_modal_map(&image_net, &text_net, dataset, &split.val, &split.train, 50)
                    .map_err(TrainError::Core)?;
            (Some(i2t), Some(t2i))
        };

        let record = EpochRecord {
            loss: mean_loss_report(&sums, batches),
            wall_time_secs: started.elapsed().as_secs_f64(),
            val_map_i2t,
            val_map_t2i,
        };
        progress(epoch, &record);
        history.epochs.push(record);

        checkpoint = TrainOutput {
            image_net: image_net.clone(),
            text_net: text_net.clone(),
            history: history.clone(),
        };
    }

    Ok(TrainOutput {
        image_net,
        text_net,
        history,
    })
}

/// Eval-mode embeddings plus their sign codes for every feature row.
pub fn encode(net: &ModalityNet, features: &Matrix) -> Result<(Matrix, HashCodeMatrix)> {
    if features.cols() != net.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, network expects {}",
            features.cols(),
            net.input_dim()
        )));
    }
    let (embeddings, _) = embed_batch(net, features, ForwardMode::Eval)?;
    let codes = binarize(&embeddings)?;
    Ok((embeddings, codes))
}

/// One cell of a hyperparameter sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub gamma: f64,
    pub map_i2t: f64,
    pub map_t2i: f64,
    pub map_mean: f64,
}

/// Validation MAP@50 over a (lambda, gamma) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub best_lambda: f64,
    pub best_gamma: f64,
}

/// Trains one model per grid cell and evaluates validation MAP@50. Grids are
/// sorted ascending and deduplicated; ties at the top score resolve toward
/// the smaller lambda, then the smaller gamma.
pub fn sweep(
    dataset: &BimodalDataset,
    split: &SplitSpec,
    base: &TrainConfig,
    lambda_grid: &[f64],
    gamma_grid: &[f64],
) -> std::result::Result<SweepTable, TrainError> {
    if lambda_grid.is_empty() || gamma_grid.is_empty() {
        return Err(TrainError::Core(Error::Config(
            "sweep grids must be nonempty".into(),
        )));
    }
    if split.val.is_empty() {
        return Err(TrainError::Core(Error::Config(
            "sweep needs a nonempty validation split".into(),
        )));
    }

    let prepare = |grid: &[f64]| -> Vec<f64> {
        let mut g = grid.to_vec();
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        g.dedup();
        g
    };
    let lambdas = prepare(lambda_grid);
    let gammas = prepare(gamma_grid);

    let mut cells = Vec::with_capacity(lambdas.len() * gammas.len());
    let mut best: Option<SweepCell> = None;
    for &lambda in &lambdas {
        for &gamma in &gammas {
            let mut config = base.clone();
            config.lambda = lambda;
            config.gamma = gamma;
            let out = train(dataset, split, &config)?;
            let (map_i2t, map_t2i) = cross_modal_map(
                &out.image_net,
                &out.text_net,
                dataset,
                &split.val,
                &split.train,
                50,
            )
            .map_err(TrainError::Core)?;
            let cell = SweepCell {
                lambda,
                gamma,
                map_i2t,
                map_t2i,
                map_mean: (map_i2t + map_t2i) / 2.0,
            };
            if best.is_none_or(|b| cell.map_mean > b.map_mean) {
                best = Some(cell);
            }
            cells.push(cell);
        }
    }
    let best = best.unwrap();
    Ok(SweepTable {
        cells,
        best_lambda: best.lambda,
        best_gamma: best.gamma,
    })
}

/// Values parsed from a `key = value` config file; every field is optional
/// so CLI flags can override whatever the file does not pin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialConfig {
    pub bits: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub image_layer_dims: Option<Vec<usize>>,
    pub text_layer_dims: Option<Vec<usize>>,
    pub image_dropout: Option<f64>,
    pub text_dropout: Option<f64>,
    pub fch_lr_multiplier: Option<f64>,
    pub lr_decay_every: Option<usize>,
}

impl PartialConfig {
    /// Copies every present field onto `config`.
    pub fn apply_to(&self, config: &mut TrainConfig) {
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    config.$field = v.clone();
                }
            };
        }
        take!(bits);
        take!(lambda);
        take!(gamma);
        take!(learning_rate);
        take!(momentum);
        take!(batch_size);
        take!(epochs);
        take!(seed);
        take!(variant);
        take!(image_layer_dims);
        take!(text_layer_dims);
        take!(image_dropout);
        take!(text_dropout);
        take!(fch_lr_multiplier);
        take!(lr_decay_every);
    }
}

/// Parses a `key = value` config file. Keys mirror [`TrainConfig`] fields;
/// layer-dim lists are comma-separated. Blank lines and `#` comments are
/// skipped; unknown keys are errors.
pub fn parse_config_file(path: &Path) -> Result<PartialConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<PartialConfig> {
    let mut out = PartialConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(line_no, "expected 'key = value'"))?;
        let key = key.trim();
        let value = value.trim();

        fn num<T: FromStr>(line_no: usize, key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad value '{value}' for {key}")))
        }
        fn dims(line_no: usize, value: &str) -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse()
                        .map_err(|_| Error::parse(line_no, format!("bad layer width '{tok}'")))
                })
                .collect()
        }

        match key {
            "bits" => out.bits = Some(num(line_no, key, value)?),
            "lambda" => out.lambda = Some(num(line_no, key, value)?),
            "gamma" => out.gamma = Some(num(line_no, key, value)?),
            "learning_rate" => out.learning_rate = Some(num(line_no, key, value)?),
            "momentum" => out.momentum = Some(num(line_no, key, value)?),
            "batch_size" => out.batch_size = Some(num(line_no, key, value)?),
            "epochs" => out.epochs = Some(num(line_no, key, value)?),
            "seed" => out.seed = Some(num(line_no, key, value)?),
            "variant" => {
                out.variant = Some(value.parse().map_err(|e| match e {
                    Error::Config(msg) => Error::parse(line_no, msg),
                    other => other,
                })?)
            }
            "image_layer_dims" => out.image_layer_dims = Some(dims(line_no, value)?),
            "text_layer_dims" => out.text_layer_dims = Some(dims(line_no, value)?),
            "image_dropout" => out.image_dropout = Some(num(line_no, key, value)?),
            "text_dropout" => out.text_dropout = Some(num(line_no, key, value)?),
            "fch_lr_multiplier" => out.fch_lr_multiplier = Some(num(line_no, key, value)?),
            "lr_decay_every" => out.lr_decay_every = Some(num(line_no, key, value)?),
            unknown => {
                return Err(Error::parse(line_no, format!("unknown key '{unknown}'")));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_split, SyntheticConfig};

    fn tiny_dataset(seed: u64) -> (BimodalDataset, SplitSpec) {
        let data = generate_synthetic(&SyntheticConfig::new(60, 8, 16, 3, 0.1, seed)).unwrap();
        let split = make_split(data.len(), 8, 8, seed).unwrap();
        (data, split)
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        let mut config = TrainConfig::new(8, epochs);
        config.image_layer_dims = vec![16];
        config.text_layer_dims = vec![16];
        config.text_dropout = 0.0;
        config.batch_size = 16;
        config.learning_rate = 0.02;
        config
    }

    #[test]
    fn zero_epochs_returns_initialized_networks() {
        let (data, split) = tiny_dataset(1);
        let config = tiny_config(0);
        let a = train(&data, &split, &config).unwrap();
        let b = train(&data, &split, &config).unwrap();
        assert!(a.history.epochs.is_empty());
        assert_eq!(a.image_net, b.image_net);
        assert_eq!(a.text_net, b.text_net);

        let trained = train(&data, &split, &tiny_config(1)).unwrap();
        assert_ne!(a.image_net, trained.image_net);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, split) = tiny_dataset(2);
        let config = tiny_config(3);
        let a = train(&data, &split, &config).unwrap();
        let b = train(&data, &split, &config).unwrap();
        assert_eq!(a.image_net, b.image_net);
        assert_eq!(a.text_net, b.text_net);
        // History matches except for wall time.
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.val_map_i2t, y.val_map_i2t);
            assert_eq!(x.val_map_t2i, y.val_map_t2i);
        }
    }

    #[test]
    fn loss_decreases_on_small_separable_data() {
        let (data, split) = tiny_dataset(3);
        let out = train(&data, &split, &tiny_config(8)).unwrap();
        let first = out.history.epochs.first().unwrap().loss.total;
        let last = out.history.epochs.last().unwrap().loss.total;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn cross_only_variant_masks_other_terms() {
        let (data, split) = tiny_dataset(4);
        let mut config = tiny_config(2);
        config.variant = Variant::ChnC;
        let out = train(&data, &split, &config).unwrap();
        for rec in &out.history.epochs {
            assert_eq!(rec.loss.lambda, 0.0);
            assert_eq!(rec.loss.gamma, 0.0);
            assert!((rec.loss.total - rec.loss.c_xy).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_masking_table() {
        let w = Variant::Chn.loss_weights(0.5, 0.3);
        assert!(w.include_cross && w.lambda == 0.5 && w.gamma == 0.3);
        let w = Variant::ChnW.loss_weights(0.5, 0.3);
        assert!(!w.include_cross && w.lambda == 0.5 && w.gamma == 0.0);
        let w = Variant::ChnC.loss_weights(0.5, 0.3);
        assert!(w.include_cross && w.lambda == 0.0 && w.gamma == 0.0);
        let w = Variant::ChnQ.loss_weights(0.5, 0.3);
        assert!(w.include_cross && w.lambda == 0.5 && w.gamma == 0.0);
        for (name, variant) in [
            ("chn", Variant::Chn),
            ("chn-w", Variant::ChnW),
            ("chn-c", Variant::ChnC),
            ("chn-q", Variant::ChnQ),
        ] {
            assert_eq!(variant.to_string(), name);
            assert_eq!(name.parse::<Variant>().unwrap(), variant);
        }
        assert!("chnx".parse::<Variant>().is_err());
    }

    #[test]
    fn chn_q_equals_chn_with_zero_gamma() {
        let (data, split) = tiny_dataset(5);
        let mut q_config = tiny_config(3);
        q_config.variant = Variant::ChnQ;
        q_config.gamma = 0.7; // masked away by the variant
        let mut zero_config = tiny_config(3);
        zero_config.variant = Variant::Chn;
        zero_config.gamma = 0.0;

        let a = train(&data, &split, &q_config).unwrap();
        let b = train(&data, &split, &zero_config).unwrap();
        assert_eq!(a.image_net, b.image_net);
        assert_eq!(a.text_net, b.text_net);
    }

    #[test]
    fn divergent_learning_rate_aborts_with_checkpoint() {
        let (data, split) = tiny_dataset(6);
        let mut config = tiny_config(5);
        config.learning_rate = 1e300;
        match train(&data, &split, &config) {
            Err(TrainError::Diverged { checkpoint, .. }) => {
                let trace = crate::losses::embed_batch(
                    &checkpoint.image_net,
                    &data.image_features,
                    ForwardMode::Eval,
                )
                .unwrap();
                assert!(trace.0.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn encode_is_deterministic_and_bounded() {
        let (data, split) = tiny_dataset(7);
        let out = train(&data, &split, &tiny_config(2)).unwrap();
        let (e1, c1) = encode(&out.image_net, &data.image_features).unwrap();
        let (e2, c2) = encode(&out.image_net, &data.image_features).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(c1, c2);
        // tanh keeps embeddings inside [-1, 1]; saturated units can round to
        // exactly +-1.0 in f64.
        assert!(e1.as_slice().iter().all(|&v| v.abs() <= 1.0));
        assert_eq!(c1.bits(), 8);

        let narrow = Matrix::zeros(2, 3);
        assert!(encode(&out.image_net, &narrow).is_err());
    }

    #[test]
    fn step_decay_changes_training_after_first_boundary() {
        let (data, split) = tiny_dataset(12);
        let base = tiny_config(3);
        let mut decayed = base.clone();
        decayed.lr_decay_every = 2;

        // Epoch 0 is identical (decay only fires at epoch boundaries > 0)...
        let mut one_epoch_base = base.clone();
        one_epoch_base.epochs = 1;
        let mut one_epoch_decay = decayed.clone();
        one_epoch_decay.epochs = 1;
        let a = train(&data, &split, &one_epoch_base).unwrap();
        let b = train(&data, &split, &one_epoch_decay).unwrap();
        assert_eq!(a.image_net, b.image_net);

        // ...and diverges once the decay kicks in.
        let a = train(&data, &split, &base).unwrap();
        let b = train(&data, &split, &decayed).unwrap();
        assert_ne!(a.image_net, b.image_net);
    }

    #[test]
    fn sweep_best_beats_within_only_variant() {
        let (data, split) = tiny_dataset(11);
        let mut config = tiny_config(6);
        config.seed = 3;
        let table = sweep(&data, &split, &config, &[1.0], &[0.0, 0.1]).unwrap();
        let best = table
            .cells
            .iter()
            .find(|c| c.lambda == table.best_lambda && c.gamma == table.best_gamma)
            .unwrap();

        let mut w_config = config.clone();
        w_config.variant = Variant::ChnW;
        let out = train(&data, &split, &w_config).unwrap();
        let (i2t, t2i) = cross_modal_map(
            &out.image_net,
            &out.text_net,
            &data,
            &split.val,
            &split.train,
            50,
        )
        .unwrap();
        let w_mean = (i2t + t2i) / 2.0;
        assert!(
            best.map_mean >= w_mean,
            "sweep best {} below within-only {}",
            best.map_mean,
            w_mean
        );
    }

    #[test]
    fn sweep_single_cell_and_dedup() {
        let (data, split) = tiny_dataset(8);
        let config = tiny_config(1);
        let table = sweep(&data, &split, &config, &[1.0], &[0.1]).unwrap();
        assert_eq!(table.cells.len(), 1);
        assert_eq!(table.best_lambda, 1.0);

        let table = sweep(&data, &split, &config, &[1.0, 1.0], &[0.1, 0.0, 0.1]).unwrap();
        assert_eq!(table.cells.len(), 2, "duplicates should collapse");
    }

    #[test]
    fn history_csv_is_stable_and_complete() {
        let (data, split) = tiny_dataset(9);
        let out = train(&data, &split, &tiny_config(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        out.history.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,c_xy,c_xx,c_yy,q_x,q_y,total,val_map_i2t,val_map_t2i"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn config_file_round_trip_and_unknown_key() {
        let parsed = parse_config_str(
            "# comment\nbits = 16\nlambda = 0.5\nvariant = chn-q\ntext_layer_dims = 32, 32\n",
        )
        .unwrap();
        assert_eq!(parsed.bits, Some(16));
        assert_eq!(parsed.lambda, Some(0.5));
        assert_eq!(parsed.variant, Some(Variant::ChnQ));
        assert_eq!(parsed.text_layer_dims, Some(vec![32, 32]));

        let mut config = TrainConfig::new(8, 1);
        parsed.apply_to(&mut config);
        assert_eq!(config.bits, 16);
        assert_eq!(config.epochs, 1);

        match parse_config_str("bogus = 1\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("bogus"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_config_str("bits 16\n").is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut config = TrainConfig::new(0, 1);
        assert!(config.validate().is_err());
        config.bits = 8;
        config.momentum = 1.0;
        assert!(config.validate().is_err());
        config.momentum = 0.9;
        config.learning_rate = 0.0;
        assert!(config.validate().is_err());
    }
}
