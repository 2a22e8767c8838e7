use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use schemex::evalbench::{evaluate, latency_bench};
use schemex::training::{fit, generate_synthetic, read_jsonl, write_jsonl, Example, TrainConfig};
use schemex::{compose_tasks, dsl_golden_vectors, json_to_schema, run_schema_with, DecodeOptions, Model, ModelConfig};

use crate::error::Failure;
use crate::service::{self, AppState, DEFAULT_MAX_TEXT_BYTES};

#[derive(Debug, Parser)]
#[command(
    name = "schemex",
    version,
    about = "Single-pass schema-driven information extraction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a desk-scale model on a JSON-lines corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        #[arg(long)]
        lr_heads: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run a schema over a text and print the result as JSON.
    Extract {
        #[arg(long, env = "SCHEMEX_MODEL")]
        model: PathBuf,
        /// Schema document: a file path or inline JSON.
        #[arg(long)]
        schema: String,
        /// Input text, or `-` to read standard input.
        #[arg(long)]
        text: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Print the compiled prompt plan instead of extracting.
        #[arg(long)]
        dump_plan: bool,
    },
    /// Time one composed pass against one pass per label.
    Bench {
        #[arg(long, env = "SCHEMEX_MODEL")]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
        labels: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Score a model against a JSON-lines corpus.
    Eval {
        #[arg(long, env = "SCHEMEX_MODEL")]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic training corpus.
    GenData {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the extraction API over HTTP.
    Serve {
        #[arg(long, env = "SCHEMEX_MODEL")]
        model: PathBuf,
        #[arg(long, env = "SCHEMEX_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_MAX_TEXT_BYTES)]
        max_text_bytes: usize,
    },
    /// Write the field-DSL golden vectors as JSON.
    DslGolden {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn read_text_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::file(&show(path), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::file(&show(path), e))
}

fn load_model(path: &Path) -> Result<(Model, Vec<u8>), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::file(&show(path), e))?;
    let (params, config, vocab) =
        schemex::encoder::read_model(bytes.as_slice()).map_err(|e| Failure::file(&show(path), e))?;
    Ok((Model::from_parts(params, config, vocab), bytes))
}

fn read_corpus(path: &Path) -> Result<Vec<Example>, Failure> {
    read_jsonl(&read_text_file(path)?).map_err(|e| Failure::file(&show(path), e))
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Internal(e.to_string()))?;
    print_line(&s)
}

// A closed downstream pipe is not an error worth reporting.
fn print_line(s: &str) -> Result<(), Failure> {
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::file("<stdout>", e)),
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            data,
            out,
            epochs,
            seed,
            lr_backbone,
            lr_heads,
            batch_size,
        } => {
            let corpus = read_corpus(&data)?;
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(defaults.epochs),
                seed: seed.unwrap_or(defaults.seed),
                lr_backbone: lr_backbone.unwrap_or(defaults.lr_backbone),
                lr_heads: lr_heads.unwrap_or(defaults.lr_heads),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                ..defaults
            };
            let start = Instant::now();
            let (model, report) = fit(&corpus, ModelConfig::desk(0), &cfg)?;
            model.save(&out).map_err(|e| Failure::file(&show(&out), e))?;
            print_json(&json!({
                "model": show(&out),
                "examples": corpus.len(),
                "skipped": report.skipped,
                "steps": report.steps,
                "epoch_losses": report.epoch_losses,
                "seconds": start.elapsed().as_secs_f64(),
                "config": cfg,
            }))
        }
        Command::Extract {
            model,
            schema,
            text,
            threshold,
            max_len,
            dump_plan,
        } => {
            let doc = if schema.trim_start().starts_with('{') {
                schema
            } else {
                read_text_file(Path::new(&schema))?
            };
            let schema = json_to_schema(&doc)?;
            let text = if text == "-" {
                let mut buf = String::new();
                std::io::stdin()
                    .read_to_string(&mut buf)
                    .map_err(|e| Failure::file("<stdin>", e))?;
                buf
            } else {
                text
            };
            let (model, _) = load_model(&model)?;
            let mut opts = DecodeOptions::default();
            if let Some(t) = threshold {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Failure::Usage("--threshold must lie in [0, 1]".into()));
                }
                opts.threshold = t;
            }
            if let Some(m) = max_len {
                opts.max_len = m;
            }
            if dump_plan {
                let max = opts.max_len.min(model.config.max_positions);
                let plan = compose_tasks(&schema, &text, &model.vocab, max)
                    .map_err(|e| Failure::from(schemex::ExtractError::from(e)))?;
                return print_json(&plan.to_debug_json(&model.vocab));
            }
            print_json(&run_schema_with(&model, &schema, &text, &opts)?)
        }
        Command::Bench { model, labels, repeats } => {
            if labels.is_empty() || labels.contains(&0) {
                return Err(Failure::Usage("--labels needs positive label counts".into()));
            }
            let (model, _) = load_model(&model)?;
            let report = latency_bench(&model, &labels, repeats);
            eprint!("{}", report.to_table());
            print_json(&report)
        }
        Command::Eval { model, data } => {
            let corpus = read_corpus(&data)?;
            let (model, _) = load_model(&model)?;
            let report = evaluate(&model, &corpus).map_err(|e| Failure::Internal(e.to_string()))?;
            print_json(&report)
        }
        Command::GenData { seed, count, out } => {
            if count == 0 {
                return Err(Failure::Usage("--count must be positive".into()));
            }
            write_file(&out, write_jsonl(&generate_synthetic(seed, count)))?;
            print_json(&json!({ "out": show(&out), "count": count, "seed": seed }))
        }
        Command::Serve {
            model,
            port,
            host,
            max_text_bytes,
        } => {
            let (m, bytes) = load_model(&model)?;
            let mut state = AppState::new(m, &bytes);
            state.max_text_bytes = max_text_bytes;
            serve(Arc::new(state), &host, port)
        }
        Command::DslGolden { out } => {
            let doc =
                serde_json::to_string_pretty(&dsl_golden_vectors()).map_err(|e| Failure::Internal(e.to_string()))?;
            match out {
                Some(path) => write_file(&path, doc + "\n"),
                None => print_line(&doc),
            }
        }
    }
}

fn serve(state: Arc<AppState>, host: &str, port: u16) -> Result<(), Failure> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| Failure::Internal(format!("bind {host}:{port}: {e}")))?;
        log::info!(
            "model {} listening on {}",
            state.model_id,
            listener.local_addr().map_err(|e| Failure::Internal(e.to_string()))?
        );
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::Internal(e.to_string()))
    })
}
