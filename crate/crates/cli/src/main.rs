//! `nets`: command-line front end of the neural triple store.
//!
//! Every subcommand is a request to a store server. With `--server` (or
//! `NETS_SERVER`) the request goes to that server; otherwise an in-process
//! server is started on a loopback port for the duration of the command.

use std::io::{self, BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nets_api::{
    BackendKind, BackendSpec, EvalRequest, GenerateRequest, KbSource, MaterializeRequest, OpenStoreRequest,
    OutputFormat, QueryRequest, ReasonRequest, SplitRequest, Timings, TrainOptions, TrainRequest,
};
use nets_client::{Client, ClientError};

const PROMPT: &str = "NeTS> ";

#[derive(Parser, Debug)]
#[command(name = "nets", version, about = "Neural triple store: train, materialize and query")]
struct Cli {
    /// Base URL of a running nets-server. Without it an embedded server is used.
    #[arg(long, env = "NETS_SERVER", global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic knowledge base and its rules.
    Generate(GenerateArgs),
    /// Run the rule reasoner and write the closure.
    Reason(ReasonArgs),
    /// Hold out test and validation individuals.
    Split(SplitArgs),
    /// Train network weights.
    Train(TrainArgs),
    /// Compute and save individual embeddings.
    Materialize(MaterializeArgs),
    /// Score a store on the test queries of a split.
    Eval(EvalArgs),
    /// Interactive query shell (reads queries from stdin).
    Query(QueryArgs),
}

#[derive(Args, Debug, Clone)]
struct KbArgs {
    /// Facts in N-Triples form.
    #[arg(long)]
    facts: PathBuf,
    /// Rules file.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Minimum share of individuals a predicate must cover to be modeled.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long, env = "NETS_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value = "family")]
    template: String,
    #[arg(long, default_value_t = 1000)]
    individuals: usize,
    #[arg(long)]
    out_facts: PathBuf,
    #[arg(long)]
    out_rules: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct ReasonArgs {
    #[command(flatten)]
    kb: KbArgs,
    /// Where to write the closure; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    validation: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    kb: KbArgs,
    /// Split file; its validation queries select the best epoch.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Validation individuals to hold out when no split is given.
    #[arg(long)]
    validation: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch report as comma-separated values.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    balanced_fraction: Option<f64>,
    #[arg(long)]
    negative_ratio: Option<f64>,
    #[arg(long)]
    phase1_batches: Option<usize>,
    #[arg(long)]
    validation_rounds: Option<usize>,
    /// Train corrupted relation cells toward false rather than their closure label.
    #[arg(long)]
    negatives_as_false: bool,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// Tensor slices per layer.
    #[arg(long)]
    slices: Option<usize>,
    /// Update steps gradients flow back through.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct MaterializeArgs {
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum BackendArg {
    Learned,
    Oracle,
}

#[derive(Args, Debug)]
struct StoreArgs {
    #[arg(long, value_enum, default_value = "learned")]
    backend: BackendArg,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Saved embeddings; materialized on the fly when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    /// Hops around a bound end searched for relation answers; negative means all pairs.
    #[arg(long, allow_negative_numbers = true)]
    radius: Option<i64>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    kb: KbArgs,
    #[arg(long)]
    split: PathBuf,
    #[command(flatten)]
    store: StoreArgs,
    /// Per-predicate metrics as comma-separated values.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[command(flatten)]
    kb: KbArgs,
    #[command(flatten)]
    store: StoreArgs,
    /// Print results as comma-separated values.
    #[arg(long)]
    csv: bool,
    /// Evaluate the atoms of a query on separate threads.
    #[arg(long)]
    parallel: bool,
    /// Run these queries instead of reading stdin.
    #[arg(long = "execute", short = 'e')]
    execute: Vec<String>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        if e.is_user_error() {
            Failure::User(e.into())
        } else {
            Failure::Internal(e.into())
        }
    }
}

type Outcome = Result<(), Failure>;

fn user_err(e: anyhow::Error) -> Failure {
    Failure::User(e)
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(user_err)
}

fn read_b64(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(user_err)?;
    Ok(STANDARD.encode(bytes))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display())).map_err(user_err)
}

fn write_b64(path: &Path, data: &str) -> Outcome {
    let bytes = STANDARD
        .decode(data)
        .context("server returned malformed base64")
        .map_err(Failure::Internal)?;
    write_bytes(path, &bytes)
}

fn kb_source(kb: &KbArgs) -> Result<KbSource, Failure> {
    Ok(KbSource {
        facts: read_text(&kb.facts)?,
        rules: kb.rules.as_deref().map(read_text).transpose()?,
        threshold: kb.threshold,
    })
}

fn backend_spec(store: &StoreArgs) -> Result<BackendSpec, Failure> {
    Ok(BackendSpec {
        backend: match store.backend {
            BackendArg::Learned => BackendKind::Learned,
            BackendArg::Oracle => BackendKind::Oracle,
        },
        weights: store.weights.as_deref().map(read_b64).transpose()?,
        embeddings: store.embeddings.as_deref().map(read_b64).transpose()?,
        rounds: Some(store.rounds),
        seed: store.seed.seed,
        radius: store.radius,
    })
}

fn print_timings(t: &Timings, materialized: bool) {
    eprintln!("import: {:.3}s", t.import_seconds);
    if materialized {
        eprintln!("materialization: {:.3}s", t.materialization_seconds);
    }
}

fn print_diagnostics(diagnostics: &[String]) {
    for d in diagnostics {
        eprintln!("warning: {d}");
    }
}

async fn run(cli: Cli, client: &Client) -> Outcome {
    match cli.command {
        Command::Generate(a) => {
            let resp = client
                .generate(&GenerateRequest { template: a.template, individuals: a.individuals, seed: a.seed.seed })
                .await?;
            write_bytes(&a.out_facts, resp.facts.as_bytes())?;
            write_bytes(&a.out_rules, resp.rules.as_bytes())
        }
        Command::Reason(a) => {
            let resp = client.reason(&ReasonRequest { kb: kb_source(&a.kb)? }).await?;
            print_diagnostics(&resp.diagnostics);
            print_timings(&resp.timings, false);
            eprintln!(
                "{} input facts, {} after closure ({} derivations)",
                resp.input_facts, resp.closure_facts, resp.derivations
            );
            match a.out {
                Some(path) => write_bytes(&path, resp.closure.as_bytes()),
                None => {
                    print!("{}", resp.closure);
                    Ok(())
                }
            }
        }
        Command::Split(a) => {
            let req = SplitRequest { kb: kb_source(&a.kb)?, test: a.test, validation: a.validation, seed: a.seed.seed };
            let resp = client.split(&req).await?;
            eprintln!("{} test queries, {} validation queries", resp.test_queries, resp.validation_queries);
            write_bytes(&a.out, resp.split.as_bytes())
        }
        Command::Train(a) => {
            let options = TrainOptions {
                epochs: a.epochs,
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                balanced_fraction: a.balanced_fraction,
                negative_ratio: a.negative_ratio,
                phase1_batches: a.phase1_batches,
                validation_rounds: a.validation_rounds,
                negatives_as_false: a.negatives_as_false.then_some(true),
                dim: a.dim,
                slices: a.slices,
                horizon: a.horizon,
                init_scale: a.init_scale,
            };
            let req = TrainRequest {
                kb: kb_source(&a.kb)?,
                split: a.split.as_deref().map(read_text).transpose()?,
                validation: a.validation,
                seed: a.seed.seed,
                options,
            };
            let resp = client.train(&req).await?;
            print_diagnostics(&resp.diagnostics);
            print!("{}", resp.report_table);
            if let Some(path) = &a.report {
                write_bytes(path, resp.report_csv.as_bytes())?;
            }
            write_b64(&a.out, &resp.weights)
        }
        Command::Materialize(a) => {
            let req = MaterializeRequest {
                kb: kb_source(&a.kb)?,
                weights: read_b64(&a.weights)?,
                rounds: a.rounds,
                seed: a.seed.seed,
            };
            let resp = client.materialize(&req).await?;
            print_timings(&resp.timings, true);
            eprintln!("{} individuals embedded", resp.individuals);
            write_b64(&a.out, &resp.embeddings)
        }
        Command::Eval(a) => {
            let req =
                EvalRequest { kb: kb_source(&a.kb)?, split: read_text(&a.split)?, backend: backend_spec(&a.store)? };
            let resp = client.eval(&req).await?;
            print_timings(&resp.timings, a.store.backend == BackendArg::Learned);
            print!("{}", resp.table);
            match &a.out {
                Some(path) => write_bytes(path, resp.csv.as_bytes()),
                None => Ok(()),
            }
        }
        Command::Query(a) => query_shell(a, client).await,
    }
}

async fn query_shell(a: QueryArgs, client: &Client) -> Outcome {
    let req = OpenStoreRequest { kb: kb_source(&a.kb)?, backend: backend_spec(&a.store)? };
    let opened = client.open_store(&req).await?;
    print_timings(&opened.timings, a.store.backend == BackendArg::Learned && a.store.embeddings.is_none());
    let format = if a.csv { OutputFormat::Csv } else { OutputFormat::Table };
    let result = shell_loop(client, opened.id, &a, format).await;
    // best effort: an embedded server disappears with the process anyway
    let _ = client.close_store(opened.id).await;
    result
}

async fn shell_loop(client: &Client, id: uuid::Uuid, a: &QueryArgs, format: OutputFormat) -> Outcome {
    let run_one = |line: String| async move {
        let req = QueryRequest { query: line, format, parallel: a.parallel };
        match client.query(id, &req).await {
            Ok(resp) => Ok(resp.output),
            // bad queries print a diagnostic and the shell carries on
            Err(e) if e.is_user_error() => Ok(format!("{e}\n")),
            Err(e) => Err(Failure::from(e)),
        }
    };
    let mut stdout = io::stdout().lock();
    if !a.execute.is_empty() {
        for q in &a.execute {
            let out = run_one(q.clone()).await?;
            stdout.write_all(out.as_bytes()).map_err(|e| Failure::Internal(e.into()))?;
        }
        return Ok(());
    }
    let interactive = io::stdin().is_terminal();
    let mut lines = io::stdin().lock().lines();
    loop {
        write!(stdout, "{PROMPT}").and_then(|_| stdout.flush()).map_err(|e| Failure::Internal(e.into()))?;
        let Some(line) = lines.next() else {
            if !interactive {
                writeln!(stdout).map_err(|e| Failure::Internal(e.into()))?;
            }
            return Ok(());
        };
        let line = line.map_err(|e| Failure::User(e.into()))?;
        if !interactive {
            // keep transcripts readable when input is piped
            writeln!(stdout, "{line}").map_err(|e| Failure::Internal(e.into()))?;
        }
        let trimmed = line.trim();
        if trimmed == ":quit" || trimmed == ":q" {
            return Ok(());
        }
        if trimmed.is_empty() {
            continue;
        }
        let out = run_one(trimmed.to_string()).await?;
        stdout.write_all(out.as_bytes()).map_err(|e| Failure::Internal(e.into()))?;
    }
}

async fn main_async(cli: Cli) -> Outcome {
    match cli.server.clone() {
        Some(url) => run(cli, &Client::new(url)).await,
        None => {
            let (addr, _server) = nets_server::spawn_local()
                .await
                .context("cannot start the embedded server")
                .map_err(Failure::Internal)?;
            run(cli, &Client::new(format!("http://{addr}"))).await
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(2);
        }
    };
    match runtime.block_on(main_async(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}
