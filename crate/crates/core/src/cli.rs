//! The `prism` command line.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::annotate::{
    finalize_and_split, preannotate_batch, serve_until_interrupt, AnnotateError, LabelStore, ServeOptions, SplitRatio,
};
use crate::backend::{BackendError, BackendKind};
use crate::bundle::{build_bundle, Bundle, BundleError, IngestOptions, Split};
use crate::config::{ConfigError, PipelineConfig};
use crate::eval::{bootstrap_significance, evaluate_run, EvalError, Grouping, PredictionRecord, SignificanceResult};
use crate::grounding::{CaptionCache, GroundingError};
use crate::ingest::{load_raw, IngestError, ViewMode};
use crate::persona::{PersonaCache, PersonaError};
use crate::pipeline::{
    read_jsonl, run_captions, run_inference, run_personas, run_supervision, write_jsonl, PipelineError, PredictionLine,
    StageContext,
};
use crate::stance::AblationFlags;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum Ablation {
    NoPersona,
    NoIntent,
    NoMutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GroupArg {
    PerTarget,
    Depth,
    Pooled,
}

#[derive(Debug, Parser)]
#[command(name = "prism", version, about = "Conversational stance detection toolkit")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured backend kind.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter raw records and write a conversation bundle.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Keep only these targets (repeatable); all targets by default.
        #[arg(long)]
        target: Vec<String>,
        #[arg(long)]
        max_depth: Option<u32>,
        /// Image directory; defaults to the input file's directory.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Use whole reply trees instead of ancestor chains.
        #[arg(long)]
        whole_tree: bool,
        /// Skip malformed lines instead of failing.
        #[arg(long)]
        lenient: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask the backend for stance suggestions and create a label store.
    Preannotate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Serve the annotation REST API (and UI, if configured).
    AnnotateServe {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Built UI bundle to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Write the resolved dataset with train/validation/test splits.
    Finalize {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill personas for every final-comment author.
    Persona {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption every image in the bundle.
    Caption {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict stances and write a prediction file.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write classification and generation training records.
    EmitSupervision {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        personas: Option<PathBuf>,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction file.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, value_enum, default_value = "per-target")]
        group: GroupArg,
        /// Baseline prediction file for a paired bootstrap test.
        #[arg(long)]
        significance: Option<PathBuf>,
        #[arg(long, default_value_t = crate::eval::DEFAULT_BOOTSTRAP_ITERATIONS)]
        iterations: usize,
        /// Machine-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(b) = cli.backend {
        cfg.set_backend(match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Remote => BackendKind::Remote,
        });
    }
    Ok(cfg)
}

fn apply_ablations(mut flags: AblationFlags, ablate: &[Ablation]) -> AblationFlags {
    for a in ablate {
        match a {
            Ablation::NoPersona => flags.use_persona = false,
            Ablation::NoIntent => flags.use_intent = false,
            Ablation::NoMutual => flags.use_mutual = false,
        }
    }
    flags
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn stage_context(cfg: &PipelineConfig, bundle: &Bundle, bundle_path: &Path) -> Result<StageContext, CliError> {
    Ok(StageContext {
        backend: cfg.backend.build()?,
        images_root: cfg
            .paths
            .images_root
            .clone()
            .unwrap_or_else(|| bundle.images_root(&parent_dir(bundle_path))),
        persona: cfg.persona.clone(),
        grounding: cfg.grounding.clone(),
        max_parallel: cfg.backend.max_parallel,
    })
}

fn load_persona_cache(path: Option<&Path>) -> Result<Arc<PersonaCache>, CliError> {
    Ok(Arc::new(match path {
        Some(p) => PersonaCache::load(p)?,
        None => PersonaCache::new(),
    }))
}

fn load_caption_cache(path: Option<&Path>) -> Result<Arc<CaptionCache>, CliError> {
    Ok(Arc::new(match path {
        Some(p) => CaptionCache::load(p)?,
        None => CaptionCache::new(),
    }))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    cfg.validate()?;
    eprintln!("{}", cfg.header());

    match cli.command {
        Command::Ingest {
            input,
            target,
            max_depth,
            images,
            whole_tree,
            lenient,
            out,
        } => {
            let loaded = load_raw(&input, !lenient)?;
            for (line, reason) in &loaded.errors {
                eprintln!("skipped line {line}: {reason}");
            }
            let images = images.unwrap_or_else(|| parent_dir(&input));
            let images = images.canonicalize().unwrap_or(images);
            let mut policy = cfg.filter.clone();
            if let Some(d) = max_depth {
                policy.max_depth = d;
            }
            let opts = IngestOptions {
                policy,
                targets: target,
                view: if whole_tree { ViewMode::WholeTree } else { ViewMode::ChainOnly },
                images_root: Some(images),
            };
            let (bundle, report) = build_bundle(&loaded.records, &opts)?;
            bundle.save(&out)?;
            eprintln!(
                "ingest: input={} retained={} dropped: author-status={} short-text={} depth={}; conversations={} users={}",
                report.input,
                report.retained,
                report.dropped_author_status,
                report.dropped_short_text,
                report.dropped_depth,
                bundle.conversations.len(),
                bundle.histories.len(),
            );
        }
        Command::Preannotate { bundle, store } => {
            if store.join("snapshot.jsonl").exists() {
                return Err(CliError::Invalid(format!("{} already holds a label store", store.display())));
            }
            let b = Bundle::load(&bundle)?;
            let backend = cfg.backend.build()?;
            let convs: Vec<_> = b.conversations.iter().map(|e| &e.conversation).collect();
            let pre = preannotate_batch(&convs, backend.as_ref(), cfg.backend.max_parallel);
            eprintln!("preannotate: {} of {} conversations have a suggestion", pre.len(), convs.len());
            LabelStore::create(&store, b, &pre)?;
        }
        Command::AnnotateServe { store, port, host, ui } => {
            let s = LabelStore::open(&store)?;
            let images_root = cfg
                .paths
                .images_root
                .clone()
                .unwrap_or_else(|| s.bundle().images_root(&store));
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| CliError::Invalid(format!("bad address {host}:{port}: {e}")))?;
            let opts = ServeOptions {
                images_root: Some(images_root),
                ui_dir: ui.or(cfg.paths.ui_dir.clone()),
            };
            serve_until_interrupt(Arc::new(s), addr, &opts).map_err(|e| CliError::Io(e.to_string()))?;
        }
        Command::Finalize { store, out } => {
            let s = LabelStore::open(&store)?;
            let (dataset, assignment, report) = finalize_and_split(&s, SplitRatio::default(), cfg.seed);
            dataset.save(&out)?;
            let split_path = out.with_extension("split.json");
            write_text(&split_path, &serde_json::to_string_pretty(&assignment).expect("assignment serializes"))?;
            let counts = assignment.thread_counts();
            println!(
                "resolved={} excluded={} threads: train={} validation={} test={}",
                report.resolved,
                report.excluded.len(),
                counts[&Split::Train],
                counts[&Split::Validation],
                counts[&Split::Test],
            );
        }
        Command::Persona { bundle, out } => {
            let b = Bundle::load(&bundle)?;
            let ctx = stage_context(&cfg, &b, &bundle)?;
            let cache = load_persona_cache(out.exists().then_some(out.as_path()))?;
            let report = run_personas(&ctx, &b, cache.clone())?;
            cache.save(&out)?;
            for (user, err) in &report.failed {
                eprintln!("persona failed for {user}: {err}");
            }
            eprintln!("persona: {} profiles, {} failures", report.done, report.failed.len());
        }
        Command::Caption { bundle, out } => {
            let b = Bundle::load(&bundle)?;
            let ctx = stage_context(&cfg, &b, &bundle)?;
            let cache = load_caption_cache(out.exists().then_some(out.as_path()))?;
            let report = run_captions(&ctx, &b, cache.clone())?;
            cache.save(&out)?;
            for (key, err) in &report.failed {
                eprintln!("caption unavailable for {key}: {err}");
            }
            eprintln!("caption: {} captions, {} unavailable", report.done, report.failed.len());
        }
        Command::Infer {
            bundle,
            personas,
            captions,
            ablate,
            split,
            out,
        } => {
            let b = Bundle::load(&bundle)?;
            let ctx = stage_context(&cfg, &b, &bundle)?;
            let flags = apply_ablations(cfg.ablation, &ablate);
            let lines = run_inference(
                &ctx,
                &b,
                load_persona_cache(personas.as_deref())?,
                load_caption_cache(captions.as_deref())?,
                flags,
                split.map(Into::into),
            )?;
            write_jsonl(&out, &lines)?;
            let invalid = lines.iter().filter(|l| l.error.is_some()).count();
            eprintln!("infer: {} predictions ({invalid} invalid), flags={}", lines.len(), flags.describe());
        }
        Command::EmitSupervision {
            bundle,
            personas,
            captions,
            lambda,
            ablate,
            split,
            out,
        } => {
            let lambda = lambda.unwrap_or(cfg.lambda);
            if !(0.0..=1.0).contains(&lambda) {
                return Err(ConfigError::Lambda(lambda).into());
            }
            let b = Bundle::load(&bundle)?;
            let ctx = stage_context(&cfg, &b, &bundle)?;
            let flags = apply_ablations(cfg.ablation, &ablate);
            let (records, report) = run_supervision(
                &ctx,
                &b,
                load_persona_cache(personas.as_deref())?,
                load_caption_cache(captions.as_deref())?,
                flags,
                lambda,
                split.map(Into::into),
            )?;
            write_jsonl(&out, &records)?;
            for (id, why) in &report.flagged {
                eprintln!("flagged {id}: {why}");
            }
            eprintln!(
                "emit-supervision: {} records, {} unlabeled skipped, {} flagged",
                report.records,
                report.skipped_unlabeled,
                report.flagged.len()
            );
        }
        Command::Evaluate {
            preds,
            group,
            significance,
            iterations,
            out,
        } => {
            let (records, unlabeled) = scored_records(&preds)?;
            let mut report = evaluate_run(&records)?;
            if unlabeled > 0 {
                report.notes.push(format!("{unlabeled} predictions without a gold label were skipped"));
            }
            if let Some(base) = significance {
                let (baseline, _) = scored_records(&base)?;
                let (a, b) = align(&records, &baseline)?;
                let p = bootstrap_significance(&a, &b, iterations, cfg.seed)?;
                report.significance = Some(SignificanceResult {
                    baseline: base.display().to_string(),
                    iterations,
                    seed: cfg.seed,
                    p_value: p,
                });
            }
            let grouping = match group {
                GroupArg::PerTarget => Grouping::PerTarget,
                GroupArg::Depth => Grouping::Depth,
                GroupArg::Pooled => Grouping::Pooled,
            };
            print!("{}", report.render_table(grouping));
            if let Some(sig) = &report.significance {
                println!("paired bootstrap vs {}: p = {:.4}", sig.baseline, sig.p_value);
            }
            if let Some(out) = out {
                let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
                json.push('\n');
                write_text(&out, &json)?;
            }
        }
    }
    Ok(())
}

fn scored_records(path: &Path) -> Result<(Vec<PredictionRecord>, usize), CliError> {
    let lines: Vec<PredictionLine> = read_jsonl(path)?;
    let total = lines.len();
    let records: Vec<PredictionRecord> = lines.iter().filter_map(PredictionLine::record).collect();
    let skipped = total - records.len();
    Ok((records, skipped))
}

/// Pairs two runs item by item (by conversation id).
fn align(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<(Vec<PredictionRecord>, Vec<PredictionRecord>), CliError> {
    let index: BTreeMap<&str, &PredictionRecord> = b.iter().map(|r| (r.conversation_id.as_str(), r)).collect();
    if index.len() != a.len() {
        return Err(EvalError::MisalignedInputs(format!("{} vs {} records", a.len(), b.len())).into());
    }
    let mut left = a.to_vec();
    left.sort_by(|x, y| x.conversation_id.cmp(&y.conversation_id));
    let right = left
        .iter()
        .map(|r| {
            index
                .get(r.conversation_id.as_str())
                .map(|x| (*x).clone())
                .ok_or_else(|| EvalError::MisalignedInputs(format!("{} missing from baseline", r.conversation_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((left, right))
}
