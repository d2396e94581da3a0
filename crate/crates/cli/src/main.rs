//! `cleargate`: operator command line for the policy-enforcing inference
//! gateway.
//!
//! Local subcommands (`policy validate`, `ingest`, `train`, `query`,
//! `audit tail`) build the engine in-process from `--policy`/`--corpus`;
//! `query --remote` talks to a running gateway over HTTP instead, and
//! `serve` runs one. `--policy`, `--corpus`, and `--audit` fall back to the
//! `CLEARGATE_POLICY`, `CLEARGATE_CORPUS`, and `CLEARGATE_AUDIT` environment
//! variables.
//!
//! Exit codes: 0 on success, 1 on operational failure (unreadable files,
//! invalid policy, denied or failed requests), 2 on usage errors.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cleargate_core::audit::AuditLog;
use cleargate_core::engine::Engine;
use cleargate_core::orchestrator::{InferenceMode, InferenceRequest, InferenceResponse};
use cleargate_core::policy::PolicyFile;
use cleargate_gateway::{build_engine, ServeConfig};

#[derive(Parser)]
#[command(
    name = "cleargate",
    version,
    about = "Policy-enforcing inference gateway over a classified document store"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

/// Paths shared by every subcommand that builds a local engine.
#[derive(Args)]
struct WorldArgs {
    /// Policy file: roles, users, tokens, admins.
    #[arg(long, env = "CLEARGATE_POLICY")]
    policy: PathBuf,
    /// JSONL corpus ingested at startup (one document per line).
    #[arg(long, env = "CLEARGATE_CORPUS")]
    corpus: Option<PathBuf>,
    /// Append-only audit log.
    #[arg(long, env = "CLEARGATE_AUDIT", default_value = "audit.jsonl")]
    audit: PathBuf,
}

impl WorldArgs {
    fn serve_config(&self, port: u16, temperature: f64) -> ServeConfig {
        ServeConfig {
            port,
            policy_path: self.policy.clone(),
            corpus_path: self.corpus.clone(),
            audit_path: self.audit.clone(),
            temperature,
        }
    }

    fn engine(&self) -> Result<Engine> {
        Ok(build_engine(&self.serve_config(0, 1.0))?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Policy-file utilities.
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Load policy + corpus, train the grid, and report what was loaded.
    Ingest {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Train the expert grid and print the registry.
    Train {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Ask one question, locally or against a running gateway.
    Query(QueryArgs),
    /// Audit-log utilities.
    Audit {
        #[command(subcommand)]
        action: AuditAction,
    },
    /// Run the HTTP gateway until interrupted.
    Serve {
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 8077)]
        port: u16,
        /// Softmax temperature for the expert gate.
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Parse and validate a policy file; exit 1 if it is not well-formed.
    Validate {
        #[arg(long, env = "CLEARGATE_POLICY")]
        policy: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum AuditAction {
    /// Print the last N audit entries.
    Tail {
        #[arg(long, env = "CLEARGATE_AUDIT", default_value = "audit.jsonl")]
        audit: PathBuf,
        #[arg(short = 'n', long, default_value_t = 20)]
        lines: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Args)]
struct QueryArgs {
    /// Policy file; required unless --remote is given.
    #[arg(long, env = "CLEARGATE_POLICY")]
    policy: Option<PathBuf>,
    #[arg(long, env = "CLEARGATE_CORPUS")]
    corpus: Option<PathBuf>,
    #[arg(long, env = "CLEARGATE_AUDIT", default_value = "audit.jsonl")]
    audit: PathBuf,
    /// Subject the question is asked as.
    #[arg(long)]
    user: String,
    /// rag | moe | hybrid
    #[arg(long, value_parser = parse_mode)]
    mode: InferenceMode,
    #[arg(long)]
    prompt: String,
    /// Retrieval depth for rag/hybrid.
    #[arg(short = 'k', long = "k", default_value_t = 3)]
    k: usize,
    /// Experts to consult for moe/hybrid.
    #[arg(long, default_value_t = 2)]
    top_k_experts: usize,
    /// Base URL of a running gateway, e.g. http://127.0.0.1:8077.
    #[arg(long)]
    remote: Option<String>,
    /// Bearer token for --remote.
    #[arg(long, env = "CLEARGATE_TOKEN")]
    token: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

fn parse_mode(s: &str) -> Result<InferenceMode, String> {
    InferenceMode::from_str(s)
}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Restore the default SIGPIPE disposition so that piping into a pager or
/// `head` terminates us quietly instead of panicking on a broken stdout.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Policy { action } => match action {
            PolicyAction::Validate { policy, format } => validate_policy(&policy, format),
        },
        Command::Ingest { world, format } => ingest(&world, format),
        Command::Train { world, format } => train(&world, format),
        Command::Query(args) => query(args),
        Command::Audit { action } => match action {
            AuditAction::Tail { audit, lines, format } => audit_tail(&audit, lines, format),
        },
        Command::Serve { world, port, temperature } => serve(&world, port, temperature),
    }
}

fn validate_policy(path: &PathBuf, format: Format) -> Result<()> {
    let file = PolicyFile::from_path(path)
        .with_context(|| format!("cannot load policy from {}", path.display()))?;
    let report = file.validate();
    if !report.is_clean() {
        bail!("policy is invalid: {report}");
    }
    match format {
        Format::Text => println!(
            "OK ({} roles, {} users, 5 clearance levels)",
            file.roles.len(),
            file.users.len()
        ),
        Format::Json => println!(
            "{}",
            serde_json::json!({
                "status": "ok",
                "roles": file.roles.len(),
                "users": file.users.len(),
                "clearance_levels": 5,
            })
        ),
    }
    Ok(())
}

fn ingest(world: &WorldArgs, format: Format) -> Result<()> {
    let engine = world.engine()?;
    match format {
        Format::Text => println!(
            "ingested {} documents; experts: {}",
            engine.document_count(),
            engine.current_experts().len()
        ),
        Format::Json => println!(
            "{}",
            serde_json::json!({
                "documents": engine.document_count(),
                "experts": engine.current_experts().len(),
                "policy_version": engine.policy_version(),
            })
        ),
    }
    Ok(())
}

fn train(world: &WorldArgs, format: Format) -> Result<()> {
    let engine = world.engine()?;
    let registry = engine.expert_registry();
    match format {
        Format::Text => {
            println!("experts: {}", registry.len());
            for row in &registry {
                println!(
                    "  {}: {} docs, {} tokens",
                    row.canonical_name,
                    row.training_doc_ids.len(),
                    row.vocabulary_size
                );
            }
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&registry)?),
    }
    Ok(())
}

fn query(args: QueryArgs) -> Result<()> {
    if let Some(remote) = &args.remote {
        return query_remote(remote, &args);
    }
    let policy = args
        .policy
        .clone()
        .context("--policy (or CLEARGATE_POLICY) is required for local queries")?;
    let config = ServeConfig {
        port: 0,
        policy_path: policy,
        corpus_path: args.corpus.clone(),
        audit_path: args.audit.clone(),
        temperature: 1.0,
    };
    let engine = build_engine(&config)?;
    let request = InferenceRequest::new(&args.user, &args.prompt, args.mode)
        .with_k(args.k)
        .with_top_k_experts(args.top_k_experts);
    let response = engine.infer(&request)?;
    print_response(&response, args.format)
}

fn query_remote(remote: &str, args: &QueryArgs) -> Result<()> {
    let token = args
        .token
        .as_ref()
        .context("--remote requires --token (or CLEARGATE_TOKEN)")?;
    let body = serde_json::json!({
        "prompt": args.prompt,
        "mode": args.mode.as_str(),
        "k": args.k,
        "top_k_experts": args.top_k_experts,
        "user_id": args.user,
    });
    let url = format!("{}/v1/query", remote.trim_end_matches('/'));
    let response = reqwest::blocking::Client::new()
        .post(&url)
        .bearer_auth(token)
        .json(&body)
        .send()
        .with_context(|| format!("gateway unreachable at {url}"))?;
    let status = response.status();
    let text = response.text().context("reading gateway response")?;
    if !status.is_success() {
        bail!("gateway returned {status}: {text}");
    }
    match args.format {
        // The raw body, byte-for-byte what the HTTP API returned.
        Format::Json => println!("{text}"),
        Format::Text => {
            let parsed: InferenceResponse =
                serde_json::from_str(&text).context("gateway returned an unexpected shape")?;
            print_response(&parsed, Format::Text)?;
        }
    }
    Ok(())
}

fn print_response(response: &InferenceResponse, format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string(response)?),
        Format::Text => {
            println!("{}", response.text);
            if response.retrieved_doc_ids.is_empty() {
                println!("context: (none)");
            } else {
                println!("context: {}", response.retrieved_doc_ids.join(", "));
            }
            if !response.consulted_experts.is_empty() {
                let experts: Vec<String> = response
                    .consulted_experts
                    .iter()
                    .map(|c| format!("{} ({:.4})", c.expert, c.probability))
                    .collect();
                println!("experts: {}", experts.join(", "));
            }
            println!("policy version: {}", response.policy_version);
        }
    }
    Ok(())
}

fn audit_tail(path: &PathBuf, lines: usize, format: Format) -> Result<()> {
    let log = AuditLog::open(path)
        .with_context(|| format!("cannot open audit log {}", path.display()))?;
    let entries = log.tail(lines)?;
    match format {
        Format::Text => {
            for e in &entries {
                let reasons = if e.deny_reasons.is_empty() {
                    "-".to_owned()
                } else {
                    e.deny_reasons.join(",")
                };
                println!(
                    "{} {} {} {} {}",
                    e.timestamp, e.user_id, e.action, e.decision, reasons
                );
            }
        }
        Format::Json => println!("{}", serde_json::to_string(&entries)?),
    }
    Ok(())
}

fn serve(world: &WorldArgs, port: u16, temperature: f64) -> Result<()> {
    let config = world.serve_config(port, temperature);
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(cleargate_gateway::serve(config))?;
    Ok(())
}
