//! `chn` — the full cross-modal hashing pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numerical
//! failure (divergence or a failed verification).

mod commands;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(
    name = "chn",
    version,
    about = "Cross-modal correlation hashing: train, encode, search, evaluate, verify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bimodal dataset (features, labels, split).
    GenData(GenDataArgs),
    /// Train both modality networks and write model files + history CSV.
    Train(TrainArgs),
    /// Encode features into embeddings and bit-packed codes.
    Encode(EncodeArgs),
    /// Rank database codes by Hamming distance for each query code.
    Search(SearchArgs),
    /// Compute MAP@R, precision-recall and precision@top-R from codes.
    Eval(EvalArgs),
    /// Grid-search (lambda, gamma) by validation MAP@50.
    Sweep(SweepArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Measure the quantization-error bound and its exact identities.
    VerifyBound(VerifyBoundArgs),
    /// Verify the Hamming/inner-product/cosine identities on codes.
    VerifyIdentities(VerifyIdentitiesArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };

    let outcome = match cli.command {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Encode(args) => run_encode(args),
        Command::Search(args) => run_search(args),
        Command::Eval(args) => run_eval(args),
        Command::Sweep(args) => run_sweep(args),
        Command::GradCheck(args) => run_grad_check(args),
        Command::VerifyBound(args) => run_verify_bound(args),
        Command::VerifyIdentities(args) => run_verify_identities(args),
    };

    match outcome {
        Ok(()) => {}
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            std::process::exit(failure.code);
        }
    }
}
