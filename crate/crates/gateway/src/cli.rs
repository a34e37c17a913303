//! Command-line surface. Every subcommand accepts `--store`, `--config` and
//! `--seed`; the configuration is validated before the store is opened, so
//! a usage error never writes anything.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use annoprop::evaluation::summary_table;
use annoprop::store::Store;
use annoprop::synthgen::generate_corpus;
use clap::{Args, Parser, Subcommand};

use crate::api::{router, AppState};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::ops;

#[derive(Debug, Parser)]
#[command(name = "annoprop", version, about = "Annotation proposals for texture-dominated image collections")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct CommonArgs {
    /// Store directory.
    #[arg(long, global = true, env = "ANNOPROP_STORE", default_value = "store")]
    pub store: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus into the store.
    Synth {
        /// Overrides `synth.scenes`.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Build and store a train/validation split.
    Prep(Selection),
    /// Train the reference classifier and make it current.
    Train(Selection),
    /// Propose segments for every selected image with the current model.
    Segment(Selection),
    /// Rank unannotated images for a class.
    Rank {
        #[arg(long)]
        class: String,
        /// Overrides `rank.k`.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        selection: Selection,
    },
    /// Score proposals against ground-truth masks.
    Evaluate(Selection),
    /// Serve the HTTP API.
    Serve {
        /// Overrides `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
        /// Extra `token=annotator` pairs, comma separated.
        #[arg(long, env = "ANNOPROP_TOKENS")]
        tokens: Option<String>,
    },
}

#[derive(Clone, Debug, Default, Args)]
pub struct Selection {
    /// Restrict to a stored synthetic corpus, e.g. `synth-7`.
    #[arg(long)]
    pub corpus: Option<String>,
}

fn parse_tokens(spec: &str) -> Result<HashMap<String, String>, CliError> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| match pair.split_once('=') {
            Some((t, a)) if !t.trim().is_empty() && !a.trim().is_empty() => {
                Ok((t.trim().to_owned(), a.trim().to_owned()))
            }
            _ => Err(CliError::Usage(format!("token pair `{pair}` is not token=annotator"))),
        })
        .collect()
}

/// Runs a non-serving command and returns its report text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = RunConfig::load(cli.common.config.as_deref())?.with_seed(cli.common.seed);
    match &cli.command {
        Command::Synth { scenes: Some(0) } => return Err(CliError::Usage("--scenes must be positive".into())),
        Command::Rank { k: Some(0), .. } => return Err(CliError::Usage("--k must be positive".into())),
        Command::Serve { .. } => return Err(CliError::Usage("serve runs through `serve`".into())),
        _ => {}
    }
    let mut store = Store::open(&cli.common.store)?;
    let mut out = String::new();
    match &cli.command {
        Command::Synth { scenes } => {
            let n = scenes.unwrap_or(cfg.synth.scenes);
            let summary = generate_corpus(&mut store, n, &cfg.synth.template, cfg.seed)?;
            let _ = writeln!(out, "synth: {} scenes -> datasets/synth-{}.json", summary.scenes.len(), cfg.seed);
        }
        Command::Prep(sel) => {
            let ids = ops::select_images(&store, sel.corpus.as_deref())?;
            let split = ops::prepare(&store, &ids, &cfg.dataset)?;
            let path = ops::publish_split(&mut store, &split)?;
            let _ = writeln!(
                out,
                "prep: {} train / {} validation patches, classes {:?} -> {path}",
                split.train.len(),
                split.validation.len(),
                split.class_roster
            );
        }
        Command::Train(sel) => {
            let ids = ops::select_images(&store, sel.corpus.as_deref())?;
            let outcome = ops::train(&store, &ids, &cfg.dataset, cfg.training_meta())?;
            let summary = ops::publish_training(&mut store, &outcome)?;
            let precision = summary.validation.as_ref().and_then(|v| v.mean_precision);
            let _ = writeln!(
                out,
                "train: model {} (classes {:?}), final loss {:.4}, validation mean precision {}",
                summary.model_version,
                summary.class_roster,
                outcome.report.final_train_loss,
                precision.map_or_else(|| "n/a".into(), |p| format!("{p:.3}"))
            );
        }
        Command::Segment(sel) => {
            let ids = ops::select_images(&store, sel.corpus.as_deref())?;
            let (version, model) = ops::current_model(&store)?;
            let results = ops::segment(&store, &model, &ids, cfg.segment.threshold)?;
            let n = ops::publish_segments(&mut store, results)?;
            let _ = writeln!(out, "segment: {n} proposals on {} images with model {version}", ids.len());
        }
        Command::Rank { class, k, selection } => {
            let ids = ops::select_images(&store, selection.corpus.as_deref())?;
            let (version, model) = ops::current_model(&store)?;
            let table = ops::score(&store, &model, &version, &ids, cfg.segment.threshold)?;
            ops::publish_scores(&mut store, &table)?;
            let queue = ops::queue(&store, &table, class, k.unwrap_or(cfg.rank.k))?;
            let path = ops::publish_queue(&mut store, &queue)?;
            let _ = writeln!(out, "rank: {} for `{class}` with model {version} -> {path}", queue.entries.len());
            for (i, e) in queue.entries.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:>3}  {}  presence {:.3}  support {}  coverage {:.3}",
                    i + 1,
                    e.image_id,
                    e.presence_score,
                    e.support,
                    e.coverage
                );
            }
        }
        Command::Evaluate(sel) => {
            let ids = ops::select_images(&store, sel.corpus.as_deref())?;
            let (version, model) = ops::current_model(&store)?;
            let classifier = ops::training_validation(&store, &version)?;
            let run = ops::evaluate(&store, &model, &ids, cfg.segment.threshold, classifier)?;
            let path = ops::publish_evaluation(&mut store, &run)?;
            let _ = writeln!(out, "evaluate: {} images with model {version} -> {path}", run.images.len());
            out.push_str(&summary_table(std::slice::from_ref(&run.report)));
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }
    Ok(out)
}

/// Validates the serve configuration and builds the server state.
pub fn serve_state(cli: &Cli) -> Result<(std::sync::Arc<AppState>, String), CliError> {
    let Command::Serve { addr, tokens } = &cli.command else {
        return Err(CliError::Usage("not a serve command".into()));
    };
    let cfg = RunConfig::load(cli.common.config.as_deref())?.with_seed(cli.common.seed);
    let mut map: HashMap<String, String> = cfg.serve.tokens.clone().into_iter().collect();
    if let Some(spec) = tokens {
        map.extend(parse_tokens(spec)?);
    }
    if map.is_empty() {
        return Err(CliError::Usage(
            "no annotator tokens: set serve.tokens or --tokens token=annotator".into(),
        ));
    }
    let addr = addr.clone().unwrap_or(cfg.serve.addr.clone());
    let store = Store::open(&cli.common.store)?;
    Ok((AppState::new(store, map, cfg.segment.threshold, cfg.serve.workers), addr))
}

pub async fn serve(cli: &Cli) -> Result<(), CliError> {
    let (state, addr) = serve_state(cli)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
    eprintln!("annoprop: serving {} on http://{addr}", cli.common.store.display());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_pairs_parse() {
        let m = parse_tokens("a=alice, b=bob").unwrap();
        assert_eq!(m["a"], "alice");
        assert_eq!(m["b"], "bob");
        assert!(parse_tokens("nope").is_err());
    }

    #[test]
    fn invalid_config_fails_before_the_store_exists() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, "[segment]\nthreshold = 2.0\n").unwrap();
        let store = dir.path().join("store");
        let cli = Cli::parse_from(["annoprop", "synth", "--store", store.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
        let err = run(&cli).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!store.exists());
    }
}
