//! Subcommand implementations and the error-to-exit-code mapping.

use std::path::{Path, PathBuf};

use clap::Args;

use chn_core::data::{
    generate_synthetic, load_dataset, load_features, load_labels, make_split, save_dataset,
    save_features, SyntheticConfig,
};
use chn_core::eval::{
    map_at_r, precision_at_top_r, precision_recall_curve, write_key_values, RelevanceJudge,
};
use chn_core::hashing::{
    all_codes, binarize, quantization_bound_report, sample_interior_embeddings,
    sample_vertex_embeddings, search, verify_identities, verify_identities_exhaustive,
    HashCodeMatrix, IdentityReport, RankedResult,
};
use chn_core::losses::gradcheck_case;
use chn_core::net::ModalityNet;
use chn_core::training::{
    parse_config_file, sweep, train_with_progress, TrainConfig, TrainError, Variant,
};
use chn_core::Error;

/// A failed command: what to print and which exit code to use.
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::Config(_) => 1,
            Error::Shape(_)
            | Error::Input(_)
            | Error::Index(_)
            | Error::Parse { .. }
            | Error::Io(_) => 2,
            Error::Divergence(_) | Error::Verification(_) | Error::UndefinedMetric(_) => 3,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn numerical(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

// --- gen-data ---------------------------------------------------------------

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of items.
    #[arg(long)]
    n: usize,
    /// Image feature dimension.
    #[arg(long)]
    dx: usize,
    /// Text feature dimension (tag vocabulary size).
    #[arg(long)]
    dy: usize,
    /// Number of classes.
    #[arg(long)]
    classes: usize,
    /// Standard deviation of Gaussian image-feature noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// RNG seed; identical seeds reproduce the dataset bit-exactly.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability of a second class label per item.
    #[arg(long, default_value_t = 0.2)]
    second_label_prob: f64,
    /// Query-split size (default: 15% of n).
    #[arg(long)]
    query: Option<usize>,
    /// Validation-split size (default: 15% of n).
    #[arg(long)]
    val: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let mut cfg = SyntheticConfig::new(
        args.n,
        args.dx,
        args.dy,
        args.classes,
        args.noise,
        args.seed,
    );
    cfg.second_label_prob = args.second_label_prob;
    let dataset = generate_synthetic(&cfg)?;
    let query = args.query.unwrap_or(args.n * 15 / 100);
    let val = args.val.unwrap_or(args.n * 15 / 100);
    let split = make_split(args.n, query, val, args.seed)?;
    save_dataset(&args.out, &dataset, &split)?;
    println!(
        "wrote {} items (dx={}, dy={}, classes={}) to {}: train={} query={} val={}",
        args.n,
        args.dx,
        args.dy,
        args.classes,
        args.out.display(),
        split.train.len(),
        split.query.len(),
        split.val.len()
    );
    Ok(())
}

// --- train ------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (image_features.tsv, text_features.tsv, labels.tsv,
    /// split.txt).
    #[arg(long)]
    data: PathBuf,
    /// Optional `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Code length in bits.
    #[arg(long)]
    bits: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Objective variant: chn, chn-w, chn-c, chn-q.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated image hidden-layer widths, e.g. "256".
    #[arg(long)]
    image_layer_dims: Option<String>,
    /// Comma-separated text hidden-layer widths, e.g. "256,256".
    #[arg(long)]
    text_layer_dims: Option<String>,
    #[arg(long)]
    image_dropout: Option<f64>,
    #[arg(long)]
    text_dropout: Option<f64>,
    /// Learning-rate multiplier for the final hashing layer.
    #[arg(long)]
    fch_lr_multiplier: Option<f64>,
    /// Multiply the learning rate by 0.1 every k epochs (0 = off).
    #[arg(long)]
    lr_decay_every: Option<usize>,
    /// Output directory for image.chnm, text.chnm, history.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn parse_dims(value: &str) -> Result<Vec<usize>, Failure> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad layer width '{tok}'")))
        })
        .collect()
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut config = TrainConfig::new(0, 0);
    if let Some(path) = &args.config {
        parse_config_file(path)?.apply_to(&mut config);
    }
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = args.$field {
                config.$field = v;
            }
        };
    }
    flag!(bits);
    flag!(epochs);
    flag!(lambda);
    flag!(gamma);
    flag!(learning_rate);
    flag!(momentum);
    flag!(batch_size);
    flag!(seed);
    flag!(image_dropout);
    flag!(text_dropout);
    flag!(fch_lr_multiplier);
    flag!(lr_decay_every);
    if let Some(v) = &args.variant {
        config.variant = v.parse::<Variant>()?;
    }
    if let Some(v) = &args.image_layer_dims {
        config.image_layer_dims = parse_dims(v)?;
    }
    if let Some(v) = &args.text_layer_dims {
        config.text_layer_dims = parse_dims(v)?;
    }
    if args.bits == Some(0) {
        return Err(usage("--bits must be positive"));
    }
    if config.bits == 0 {
        return Err(usage("--bits is required (or set bits in --config)"));
    }
    if args.epochs.is_none() && args.config.is_none() {
        return Err(usage("--epochs is required (or set epochs in --config)"));
    }
    config.validate()?;
    Ok(config)
}

pub fn run_train(args: TrainArgs) -> Result<(), Failure> {
    let config = resolve_train_config(&args)?;
    let (dataset, split) = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(Error::from)?;

    let result = train_with_progress(&dataset, &split, &config, |epoch, rec| {
        let val = match (rec.val_map_i2t, rec.val_map_t2i) {
            (Some(a), Some(b)) => format!(" val_map={a:.4}/{b:.4}"),
            _ => String::new(),
        };
        eprintln!(
            "epoch {}/{} total={:.6}{val} ({:.2}s)",
            epoch + 1,
            config.epochs,
            rec.loss.total,
            rec.wall_time_secs
        );
    });

    match result {
        Ok(out) => {
            out.image_net.save(&args.out.join("image.chnm"))?;
            out.text_net.save(&args.out.join("text.chnm"))?;
            out.history.write_csv(&args.out.join("history.csv"))?;
            if let Some(rec) = out.history.epochs.last() {
                if let (Some(a), Some(b)) = (rec.val_map_i2t, rec.val_map_t2i) {
                    println!("val_map_i2t={a}");
                    println!("val_map_t2i={b}");
                }
            }
            println!("models written to {}", args.out.display());
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            batch,
            detail,
            checkpoint,
        }) => {
            // Keep the last finite state around for inspection.
            checkpoint.image_net.save(&args.out.join("image.chnm"))?;
            checkpoint.text_net.save(&args.out.join("text.chnm"))?;
            checkpoint
                .history
                .write_csv(&args.out.join("history.csv"))?;
            Err(numerical(format!(
                "diverged at epoch {epoch}, batch {batch}: {detail}; last-good checkpoint written to {}",
                args.out.display()
            )))
        }
        Err(TrainError::Core(err)) => Err(err.into()),
    }
}

// --- encode -----------------------------------------------------------------

#[derive(Args)]
pub struct EncodeArgs {
    /// Model file (.chnm).
    #[arg(long)]
    model: PathBuf,
    /// Feature matrix (.tsv).
    #[arg(long)]
    features: PathBuf,
    /// Output code file (.chnb).
    #[arg(long)]
    out: PathBuf,
    /// Optionally also write the continuous embeddings as TSV.
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
}

pub fn run_encode(args: EncodeArgs) -> Result<(), Failure> {
    let net = ModalityNet::load(&args.model)?;
    let features = load_features(&args.features)?;
    let (embeddings, codes) = chn_core::training::encode(&net, &features)?;
    codes.save(&args.out)?;
    if let Some(path) = &args.embeddings_out {
        save_features(path, &embeddings)?;
    }
    println!(
        "encoded {} items to {} ({} bits)",
        codes.len(),
        args.out.display(),
        codes.bits()
    );
    Ok(())
}

// --- search -----------------------------------------------------------------

#[derive(Args)]
pub struct SearchArgs {
    /// Database codes (.chnb).
    #[arg(long)]
    db: PathBuf,
    /// Query codes (.chnb).
    #[arg(long)]
    queries: PathBuf,
    /// Results per query.
    #[arg(long)]
    r: usize,
    /// Output TSV (query_index, rank, db_index, distance).
    #[arg(long)]
    out: PathBuf,
}

pub fn run_search(args: SearchArgs) -> Result<(), Failure> {
    if args.r == 0 {
        return Err(usage("--r must be positive"));
    }
    let db = HashCodeMatrix::load(&args.db)?;
    let queries = HashCodeMatrix::load(&args.queries)?;
    if db.bits() != queries.bits() {
        return Err(Error::Shape(format!(
            "database codes have {} bits, queries {}",
            db.bits(),
            queries.bits()
        ))
        .into());
    }
    let mut out = String::from("query_index\trank\tdb_index\tdistance\n");
    for q in 0..queries.len() {
        let hits = search(&db, queries.item(q), args.r)?;
        for (rank, hit) in hits.iter().enumerate() {
            out.push_str(&format!(
                "{q}\t{}\t{}\t{}\n",
                rank + 1,
                hit.index,
                hit.distance
            ));
        }
    }
    std::fs::write(&args.out, out).map_err(Error::from)?;
    println!(
        "searched {} queries against {} items, top {} written to {}",
        queries.len(),
        db.len(),
        args.r,
        args.out.display()
    );
    Ok(())
}

// --- eval -------------------------------------------------------------------

#[derive(Args)]
pub struct EvalArgs {
    /// Query codes (.chnb).
    #[arg(long)]
    query_codes: PathBuf,
    /// Database codes (.chnb).
    #[arg(long)]
    db_codes: PathBuf,
    /// Query labels (.tsv).
    #[arg(long)]
    query_labels: PathBuf,
    /// Database labels (.tsv).
    #[arg(long)]
    db_labels: PathBuf,
    /// MAP cutoff.
    #[arg(long, default_value_t = 50)]
    r: usize,
    /// Comma-separated precision@top-R cutoffs.
    #[arg(long, default_value = "1,5,10,20,50,100")]
    top_r_grid: String,
    /// Output directory for metrics.txt and curve CSVs.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    if args.r == 0 {
        return Err(usage("--r must be positive"));
    }
    let grid = args
        .top_r_grid
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad cutoff '{tok}' in --top-r-grid")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let queries = HashCodeMatrix::load(&args.query_codes)?;
    let db = HashCodeMatrix::load(&args.db_codes)?;
    if db.bits() != queries.bits() {
        return Err(Error::Shape(format!(
            "database codes have {} bits, queries {}",
            db.bits(),
            queries.bits()
        ))
        .into());
    }
    let query_labels = load_labels(&args.query_labels)?;
    let db_labels = load_labels(&args.db_labels)?;
    if query_labels.rows() != queries.len() || db_labels.rows() != db.len() {
        return Err(Error::Shape("label row counts do not match code counts".into()).into());
    }
    let judge = RelevanceJudge::new(query_labels, db_labels)?;

    let rankings: Vec<RankedResult> = (0..queries.len())
        .map(|q| search(&db, queries.item(q), db.len()))
        .collect::<Result<_, _>>()?;

    let map = map_at_r(&rankings, &judge, args.r)?;
    let pr = precision_recall_curve(&rankings, &judge, db.bits())?;
    let top_r = precision_at_top_r(&rankings, &judge, &grid)?;

    std::fs::create_dir_all(&args.out).map_err(Error::from)?;
    let map_key = format!("map@{}", args.r);
    let metrics: Vec<(&str, String)> = vec![
        (map_key.as_str(), map.mean.to_string()),
        ("queries_evaluated", map.evaluated.to_string()),
        ("queries_excluded", map.excluded.to_string()),
    ];
    write_key_values(&args.out.join("metrics.txt"), &metrics)?;
    pr.write_csv(&args.out.join("pr_curve.csv"))?;
    top_r.write_csv(&args.out.join("precision_at_top_r.csv"))?;

    for (k, v) in &metrics {
        println!("{k}={v}");
    }
    Ok(())
}

// --- sweep ------------------------------------------------------------------

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated lambda grid, e.g. "0.1,1,10".
    #[arg(long)]
    lambda_grid: String,
    /// Comma-separated gamma grid, e.g. "0,0.1,1".
    #[arg(long)]
    gamma_grid: String,
    /// Optional CSV output of the full table.
    #[arg(long)]
    table_out: Option<PathBuf>,
}

fn parse_grid(value: &str, name: &str) -> Result<Vec<f64>, Failure> {
    let grid = value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad value '{tok}' in {name}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(usage(format!("{name} must be nonempty")));
    }
    Ok(grid)
}

pub fn run_sweep(args: SweepArgs) -> Result<(), Failure> {
    let config = resolve_train_config(&args.train)?;
    let lambdas = parse_grid(&args.lambda_grid, "--lambda-grid")?;
    let gammas = parse_grid(&args.gamma_grid, "--gamma-grid")?;
    let (dataset, split) = load_dataset(&args.train.data)?;

    let table = match sweep(&dataset, &split, &config, &lambdas, &gammas) {
        Ok(table) => table,
        Err(TrainError::Diverged { epoch, detail, .. }) => {
            return Err(numerical(format!(
                "sweep cell diverged at epoch {epoch}: {detail}"
            )));
        }
        Err(TrainError::Core(err)) => return Err(err.into()),
    };

    let mut csv = String::from("lambda,gamma,map_i2t,map_t2i,map_mean\n");
    for cell in &table.cells {
        println!(
            "lambda={} gamma={} map_i2t={:.4} map_t2i={:.4} map_mean={:.4}",
            cell.lambda, cell.gamma, cell.map_i2t, cell.map_t2i, cell.map_mean
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.lambda, cell.gamma, cell.map_i2t, cell.map_t2i, cell.map_mean
        ));
    }
    println!("best_lambda={}", table.best_lambda);
    println!("best_gamma={}", table.best_gamma);
    if let Some(path) = &args.table_out {
        std::fs::write(path, csv).map_err(Error::from)?;
    }
    Ok(())
}

// --- grad-check -------------------------------------------------------------

#[derive(Args)]
pub struct GradCheckArgs {
    /// Number of random configurations to check.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Base seed for the random configurations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Exit 3 when the max relative error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

pub fn run_grad_check(args: GradCheckArgs) -> Result<(), Failure> {
    if args.cases == 0 {
        return Err(usage("--cases must be positive"));
    }
    let mut max_err = 0.0_f64;
    let mut worst = args.seed;
    for i in 0..args.cases {
        let seed = args.seed.wrapping_add(i as u64);
        let case = gradcheck_case(seed);
        let err = case.check(args.step)?;
        if err > max_err {
            max_err = err;
            worst = seed;
        }
    }
    println!("cases={}", args.cases);
    println!("max_relative_error={max_err}");
    println!("worst_seed={worst}");
    if max_err > args.threshold {
        return Err(numerical(format!(
            "max relative error {max_err} exceeds threshold {}",
            args.threshold
        )));
    }
    Ok(())
}

// --- verify-bound -------------------------------------------------------------

#[derive(Args)]
pub struct VerifyBoundArgs {
    /// Code length in bits.
    #[arg(long)]
    bits: usize,
    /// Number of interior samples, uniform in (-1, 1)^bits.
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    /// Cap on vertex samples (all 2^bits are used when they fit).
    #[arg(long, default_value_t = 4096)]
    vertex_limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of per-row bound measurements.
    #[arg(long)]
    out: PathBuf,
}

pub fn run_verify_bound(args: VerifyBoundArgs) -> Result<(), Failure> {
    if args.bits == 0 || args.samples == 0 {
        return Err(usage("--bits and --samples must be positive"));
    }
    let interior = sample_interior_embeddings(args.samples, args.bits, args.seed);
    let vertices = sample_vertex_embeddings(args.bits, args.vertex_limit, args.seed ^ 1);

    // The exact identities are enforced inside; failures exit 3.
    let interior_report = quantization_bound_report(&interior)?;
    let vertex_report = quantization_bound_report(&vertices)?;

    let mut csv = String::from("source,itq_error,bound_rhs,identity_lhs,exact_rhs,violated\n");
    for (source, report) in [("interior", &interior_report), ("vertex", &vertex_report)] {
        for row in &report.rows {
            csv.push_str(&format!(
                "{source},{},{},{},{},{}\n",
                row.itq_error, row.bound_rhs, row.identity_lhs, row.exact_rhs, row.violated
            ));
        }
    }
    std::fs::write(&args.out, csv).map_err(Error::from)?;

    println!("interior_samples={}", interior_report.rows.len());
    println!(
        "interior_violation_rate={}",
        interior_report.violation_rate()
    );
    println!("vertex_samples={}", vertex_report.rows.len());
    println!("vertex_violations={}", vertex_report.violations());
    if vertex_report.violations() > 0 {
        return Err(numerical(
            "bound must hold with equality on sign vertices".to_string(),
        ));
    }
    Ok(())
}

// --- verify-identities --------------------------------------------------------

#[derive(Args)]
pub struct VerifyIdentitiesArgs {
    /// Code file (.chnb), or "random" for seeded random codes.
    #[arg(long, default_value = "random")]
    codes: String,
    /// Code length for random codes.
    #[arg(long)]
    bits: Option<usize>,
    /// Number of random codes.
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Sampled pairs to check (ignored with --exhaustive).
    #[arg(long, default_value_t = 10000)]
    sample_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check every ordered pair; with --codes random this enumerates the
    /// entire code space (bits <= 12).
    #[arg(long)]
    exhaustive: bool,
}

pub fn run_verify_identities(args: VerifyIdentitiesArgs) -> Result<(), Failure> {
    let codes: HashCodeMatrix = if args.codes == "random" {
        let bits = args
            .bits
            .ok_or_else(|| usage("--bits is required with --codes random"))?;
        if args.exhaustive {
            if bits > 12 {
                return Err(usage("--exhaustive enumeration supports bits <= 12"));
            }
            all_codes(bits)?
        } else {
            if args.n < 2 {
                return Err(usage("--n must be at least 2"));
            }
            binarize(&sample_interior_embeddings(args.n, bits, args.seed))?
        }
    } else {
        HashCodeMatrix::load(Path::new(&args.codes))?
    };

    let report: IdentityReport = if args.exhaustive {
        verify_identities_exhaustive(&codes)
    } else {
        verify_identities(&codes, args.sample_pairs, args.seed)?
    };

    println!("pairs_checked={}", report.pairs_checked);
    println!("max_inner_deviation={}", report.max_inner_deviation);
    println!("max_cosine_deviation={}", report.max_cosine_deviation);
    if !report.holds() {
        return Err(numerical(format!(
            "Hamming identities violated: inner deviation {}, cosine deviation {}",
            report.max_inner_deviation, report.max_cosine_deviation
        )));
    }
    println!("identities_hold=true");
    Ok(())
}
