//! `medrag` command line. Exit codes: 0 success, 1 operational failure,
//! 2 usage error.

use std::ffi::OsString;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use medrag_core::config::ConfigError;
use medrag_core::engine::{ErrorKind, QueryRequest, SummarizeRequest};
use medrag_core::eval::{load_mcq, run_eval, EvalError, EvalOptions};
use medrag_core::fusion::FusionOverrides;
use medrag_core::gateway::LlmGateway;
use medrag_core::mock::{MockError, MockOptions, MockScript, MockServer};
use medrag_core::{Config, DocType, Engine, EngineError, MetadataFilter};
use medrag_quantlora::efficiency::bits_per_param;
use medrag_quantlora::nf4::{dequantize_slice, quantize_slice, QuantError, QuantOptions};
use medrag_quantlora::tensor_file::{self, Tensor, TensorFileError};
use medrag_quantlora::Scheme;
use serde::Serialize;
use thiserror::Error;

use crate::api::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "medrag", version, about = "Retrieval-augmented clinical question answering")]
pub struct Cli {
    /// TOML config file. `MEDRAG_*` environment variables override it.
    #[arg(long, short, global = true, env = "MEDRAG_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a corpus JSONL file into the index.
    Ingest {
        file: PathBuf,
        /// Reject the whole file if any line is malformed.
        #[arg(long)]
        strict: bool,
    },
    /// Answer a question against the index and print the response JSON.
    Query(QueryArgs),
    /// Summarize a report file ("-" reads stdin).
    Summarize {
        report: PathBuf,
        #[arg(long)]
        audience: Option<String>,
        #[command(flatten)]
        filters: FilterArgs,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Score a multiple-choice JSONL file against the configured model.
    Eval {
        file: PathBuf,
        #[arg(long, default_value_t = 2)]
        concurrency: usize,
        #[arg(long, default_value_t = 32)]
        max_tokens: u32,
    },
    /// Quantize a dense tensor file to NF4.
    Quantize {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 64)]
        block: usize,
        /// Double-quantize the per-block scales.
        #[arg(long)]
        dq: bool,
        #[arg(long, default_value_t = 256)]
        meta_block: usize,
    },
    /// Expand an NF4 tensor file back to dense f32.
    Dequantize {
        input: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Probe the language model and print index statistics.
    Health,
    /// Serve scripted chat completions and hash embeddings for offline testing.
    MockLlm {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// JSONL of {"match", "response", "status", "times", "raw", "delay_ms"} rules.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        embedding_dim: usize,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub text: String,
    #[arg(long, default_value = "general")]
    pub preset: String,
    #[arg(long)]
    pub audience: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed number of passages instead of the query-length heuristic.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub half_life_days: Option<f64>,
    #[arg(long)]
    pub gamma_floor: Option<f64>,
    #[arg(long)]
    pub per_doc_cap: Option<usize>,
    #[command(flatten)]
    pub filters: FilterArgs,
}

#[derive(Debug, Default, Args)]
pub struct FilterArgs {
    /// Repeat to allow several types.
    #[arg(long = "doc-type")]
    pub doc_types: Vec<DocType>,
    #[arg(long)]
    pub department: Option<String>,
    #[arg(long)]
    pub date_from: Option<NaiveDate>,
    #[arg(long)]
    pub date_to: Option<NaiveDate>,
}

impl FilterArgs {
    fn to_filter(&self) -> Option<MetadataFilter> {
        let f = MetadataFilter {
            doc_types: self.doc_types.clone(),
            department: self.department.clone(),
            date_from: self.date_from,
            date_to: self.date_to,
        };
        (f != MetadataFilter::default()).then_some(f)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Mock(#[from] MockError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(e) if e.kind() == ErrorKind::BadRequest => 2,
            _ => 1,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    Ok(Config::load(path)?)
}

fn engine(config: Config) -> Result<Engine, CliError> {
    Ok(Engine::from_config(config)?)
}

#[derive(Debug, Serialize)]
struct QuantizeSummary {
    rows: usize,
    cols: usize,
    block_size: usize,
    double_quant: bool,
    storage_bytes: usize,
    bits_per_param: f64,
}

fn quantize(input: &Path, output: &Path, opts: QuantOptions) -> Result<(), CliError> {
    let Tensor::Dense { rows, cols, data } = tensor_file::read(input)? else {
        return Err(CliError::Failed(format!("{} is already quantized", input.display())));
    };
    let qt = quantize_slice(&data, rows, cols, opts)?;
    let scheme = if opts.double_quant { Scheme::Nf4Dq } else { Scheme::Nf4 };
    let summary = QuantizeSummary {
        rows,
        cols,
        block_size: opts.block_size,
        double_quant: opts.double_quant,
        storage_bytes: qt.storage_bytes(),
        bits_per_param: bits_per_param(scheme, opts.block_size as u64, opts.meta_block as u64)
            .map_err(|e| CliError::Failed(e.to_string()))?,
    };
    tensor_file::write(output, &Tensor::Nf4(qt))?;
    print_json(&summary)
}

fn dequantize(input: &Path, output: &Path) -> Result<(), CliError> {
    let Tensor::Nf4(qt) = tensor_file::read(input)? else {
        return Err(CliError::Failed(format!("{} is not an NF4 tensor", input.display())));
    };
    let data = dequantize_slice(&qt)?;
    tensor_file::write(
        output,
        &Tensor::Dense {
            rows: qt.rows,
            cols: qt.cols,
            data,
        },
    )?;
    Ok(())
}

async fn serve(config: Config, port: Option<u16>, bind: Option<String>) -> Result<(), CliError> {
    let host = bind.unwrap_or_else(|| config.server.bind.clone());
    let port = port.unwrap_or(config.server.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid bind address {host}:{port}: {e}")))?;
    let origins = config.server.cors_origins.clone();
    let state = AppState {
        bearer_token: config.server.bearer_token.clone(),
        engine: Arc::new(engine(config)?),
    };
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(CliError::io(format!("cannot bind {addr}")))?;
    log::info!(
        "listening on http://{}",
        listener.local_addr().map_err(CliError::io("local address"))?
    );
    axum::serve(listener, router(state, &origins))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
        .map_err(CliError::io("server"))
}

async fn execute(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Ingest { file, strict } => {
            let engine = engine(load_config(config_path)?)?;
            let f = std::fs::File::open(&file).map_err(CliError::io(format!("cannot read {}", file.display())))?;
            let report = engine.ingest_jsonl(BufReader::new(f), strict).await?;
            for failure in &report.failure_details {
                log::warn!("line {} skipped: {}", failure.line, failure.reason);
            }
            print_json(&report)
        }
        Command::Query(args) => {
            let engine = engine(load_config(config_path)?)?;
            let req = QueryRequest {
                query: args.text,
                preset: args.preset,
                audience: args.audience,
                filters: args.filters.to_filter(),
                overrides: FusionOverrides {
                    alpha: args.alpha,
                    half_life_days: args.half_life_days,
                    gamma_floor: args.gamma_floor,
                    per_doc_cap: args.per_doc_cap,
                    k: args.k,
                    ..Default::default()
                },
            };
            let out = engine.query(&req).await?;
            print_json(&out.response)
        }
        Command::Summarize {
            report,
            audience,
            filters,
        } => {
            let report_text = if report.as_os_str() == "-" {
                std::io::read_to_string(std::io::stdin()).map_err(CliError::io("cannot read stdin"))?
            } else {
                std::fs::read_to_string(&report).map_err(CliError::io(format!("cannot read {}", report.display())))?
            };
            let engine = engine(load_config(config_path)?)?;
            let req = SummarizeRequest {
                report_text,
                audience,
                filters: filters.to_filter(),
                overrides: FusionOverrides::default(),
            };
            print_json(&engine.summarize(&req).await?.response)
        }
        Command::Serve { port, bind } => serve(load_config(config_path)?, port, bind).await,
        Command::Eval {
            file,
            concurrency,
            max_tokens,
        } => {
            if concurrency == 0 {
                return Err(CliError::Usage("--concurrency must be at least 1".into()));
            }
            let config = load_config(config_path)?;
            let set = load_mcq(&file)?;
            for s in &set.skipped {
                log::warn!("{}: line {} skipped: {}", file.display(), s.line, s.reason);
            }
            let gateway = LlmGateway::new(config.llm.clone());
            let opts = EvalOptions {
                concurrency,
                max_tokens,
                temperature: 0.0,
            };
            let report = run_eval(&set.items, &gateway, &opts).await;
            eprint!("{}", report.to_table());
            print_json(&report)?;
            if !set.items.is_empty() && report.failures == set.items.len() {
                return Err(CliError::Failed("every request to the model failed".into()));
            }
            Ok(())
        }
        Command::Quantize {
            input,
            output,
            block,
            dq,
            meta_block,
        } => quantize(
            &input,
            &output,
            QuantOptions {
                block_size: block,
                double_quant: dq,
                meta_block,
            },
        ),
        Command::Dequantize { input, output } => dequantize(&input, &output),
        Command::Health => {
            let engine = engine(load_config(config_path)?)?;
            let health = engine.health().await;
            print_json(&health)?;
            if health.llm.ok {
                Ok(())
            } else {
                Err(CliError::Failed("language model is unreachable".into()))
            }
        }
        Command::MockLlm {
            port,
            bind,
            script,
            embedding_dim,
        } => {
            let addr: SocketAddr = format!("{bind}:{port}")
                .parse()
                .map_err(|e| CliError::Usage(format!("invalid bind address {bind}:{port}: {e}")))?;
            let script = match script {
                Some(p) => MockScript::load(&p)?,
                None => MockScript::default(),
            };
            let opts = MockOptions {
                embedding_dim,
                ..Default::default()
            };
            let server = MockServer::bind(addr, script, opts)
                .await
                .map_err(CliError::io(format!("cannot bind {addr}")))?;
            // Tests bind port 0 and read the address from here.
            println!("{}", server.base_url());
            server.wait().await;
            Ok(())
        }
    }
}

fn default_log_level(cli: &Cli) -> &'static str {
    match cli.command {
        Command::Serve { .. } | Command::MockLlm { .. } => "info",
        _ => "warn",
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_log_level(&cli))).try_init();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return 1;
        }
    };
    match runtime.block_on(execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
