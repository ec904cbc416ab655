use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robochain::audit::{verify_pair, PairStore};
use robochain::codec::Digest;
use robochain::ledger::{decode_frames, load_blocks, validate_encoded, AccessPolicy, Ledger};
use robochain::simnet::{inspect_round, read_key, replay, simulate, write_artifacts, ScenarioConfig};

#[derive(Parser)]
#[command(name = "robochain", version, about = "Audited model sharing simulator and inspection tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "robochain-out")]
        out: PathBuf,
    },
    /// Validate a ledger file and report the earliest broken block.
    VerifyChain { ledger: PathBuf },
    /// Print one block of a ledger file.
    InspectTx { ledger: PathBuf, index: u64 },
    /// Check a stored query/answer pair against its ledger record.
    VerifyPair {
        store_dir: PathBuf,
        hash: String,
        /// Ledger file; defaults to `ledger.bin` two levels above the store.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Show a resolved round and, given the network key, its decrypted payload.
    InspectRound {
        out_dir: PathBuf,
        round_id: u64,
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Re-verify a run's chain, stored pairs and consensus records.
    Replay {
        out_dir: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
    },
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let outcome = simulate(&cfg)?;
            write_artifacts(&outcome, &out)?;
            let r = &outcome.report;
            println!("rounds: {} ({} promoted, {} rolled back)", r.rounds.len(), r.promotions, r.rollbacks);
            println!(
                "queries: {} answered, {} suppressed, {} audit txs",
                r.answers_delivered, r.answers_suppressed, r.query_audit_txs
            );
            println!("held-out loss: {:.6} -> {:.6}", r.initial_heldout_mse, r.final_heldout_mse);
            println!("ledger: {} blocks, valid: {}", r.ledger.blocks, r.ledger.ok);
            println!("artifacts: {}", out.display());
            Ok(true)
        }
        Command::VerifyChain { ledger } => {
            let report = validate_encoded(&std::fs::read(&ledger)?);
            println!("{}", json(&report));
            Ok(report.ok)
        }
        Command::InspectTx { ledger, index } => {
            let frames = decode_frames(&std::fs::read(&ledger)?);
            match frames.into_iter().nth(index as usize) {
                Some(Ok(block)) => {
                    println!("{}", json(&block));
                    Ok(true)
                }
                Some(Err(e)) => Err(format!("block {index} does not decode: {e}").into()),
                None => Err(format!("no block {index}").into()),
            }
        }
        Command::VerifyPair { store_dir, hash, ledger } => {
            let hash: Digest = hash.parse()?;
            let ledger = ledger.unwrap_or_else(|| default_ledger(&store_dir));
            let party = store_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let store = PairStore::open(party, &store_dir)?;
            let pair = store.get(&hash).ok_or_else(|| format!("no pair {hash} in {}", store_dir.display()))?;
            let chain = Ledger::from_blocks(AccessPolicy::public(), load_blocks(&ledger)?);
            let ok = verify_pair(&chain.view("verifier")?, pair)?;
            println!("{}", if ok { "pair verified" } else { "pair does NOT match its ledger record" });
            Ok(ok)
        }
        Command::InspectRound { out_dir, round_id, key } => {
            let key = key.map(|p| read_key(&p)).transpose()?;
            let insp = inspect_round(&out_dir, round_id, key.as_ref())?;
            println!("{}", json(&insp));
            if key.is_none() {
                eprintln!("note: no --key given, payload not decrypted");
            }
            Ok(insp.recomputed_decision.map_or(true, |d| d == insp.round.decision))
        }
        Command::Replay { out_dir, key } => {
            let key = key.map(|p| read_key(&p)).transpose()?;
            let summary = replay(&out_dir, key.as_ref())?;
            println!("{}", json(&summary));
            for notice in &summary.notices {
                eprintln!("note: {notice}");
            }
            Ok(summary.all_passed())
        }
    }
}

fn default_ledger(store_dir: &Path) -> PathBuf {
    store_dir
        .parent()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."))
        .join("ledger.bin")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
