mod commands;
mod overrides;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(
    name = "kgprobe",
    version,
    about = "Probe language-model hidden states for knowledge graph completion"
)]
struct Cli {
    /// Print errors to stderr as one JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load triple files into a graph bundle.
    Ingest(IngestArgs),
    /// Draw labelled examples (positives plus filtered corruptions).
    Sample(SampleArgs),
    /// Write an entity description file from training subgraphs.
    Describe(DescribeArgs),
    /// Render examples into prompts.jsonl.
    Render(RenderArgs),
    /// Capture hidden states for prompts into a .kgph store.
    Extract(ExtractArgs),
    /// Train a probe on one layer, or on the best validation layer.
    Train(TrainArgs),
    /// Train one probe per layer and write the per-layer table.
    Sweep(SweepArgs),
    /// Score a trained probe on a test store.
    Eval(EvalArgs),
    /// Check a .kgph file; exit status 0 if valid, 1 otherwise.
    ValidateStore(ValidateArgs),
    /// Run a whole experiment from a TOML config.
    Run(RunArgs),
}

fn error_kind(err: &anyhow::Error) -> String {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kgprobe::extraction::StoreError>() {
            return e.kind().to_owned();
        }
        if let Some(e) = cause.downcast_ref::<kgprobe::pipeline::RunError>() {
            return format!("stage_{}", e.stage);
        }
    }
    "error".to_owned()
}

/// Joins the cause chain, skipping causes already spelled out by their parent.
fn render_chain(err: &anyhow::Error) -> String {
    let mut out = err.to_string();
    let mut prev = out.clone();
    for cause in err.chain().skip(1) {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::Describe(a) => describe(a),
        Command::Render(a) => render(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::ValidateStore(a) => validate_store(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if cli.json_errors {
                let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
                let obj = serde_json::json!({
                    "error": error_kind(&err),
                    "message": err.to_string(),
                    "chain": chain,
                });
                eprintln!("{obj}");
            } else {
                eprintln!("error: {}", render_chain(&err));
            }
            ExitCode::FAILURE
        }
    }
}
