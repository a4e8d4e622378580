//! Batch command-line frontend: synth / ingest / fitgap / train / retrieve /
//! evaluate / deform, wired for reproducible runs.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error.

use crate::deform::SolverOptions;
use crate::embed::{load_checkpoint, save_checkpoint};
use crate::fitgap::{sample_pairs, FitGapComputeOptions, FitGapTable, TableJournal};
use crate::geometry::io::{load_mesh, save_obj};
use crate::geometry::{ChamferVariant, ShapeId, ShapeRecord};
use crate::reteval::{
    build_index, candidate_pool, ensure_eval_gaps, evaluate, ChamferRanker, EgocentricRanker,
    EvalOptions, MetricsReport,
};
use crate::store::{ingest, read_dataset_manifest, IngestOptions, ManifestEntry, Split, Store};
use crate::train::{train, Strategy, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding where resumable caches (the fitting-gap
/// journal) are kept.
pub const CACHE_DIR_ENV: &str = "DEFRET_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "defret",
    about = "Deformation-aware 3D shape retrieval pipeline",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Table1,
    Rank,
    Recall,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural shape family as OBJ files plus a dataset
    /// manifest.
    Synth {
        #[arg(long, value_enum)]
        family: crate::reteval::synth::FamilyKind,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// How many trailing shapes become the test split.
        #[arg(long, default_value_t = 0)]
        test_split: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize meshes and sample canonical clouds into a shape store.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample source-target pairs and precompute the fitting-gap table.
    Fitgap {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the journal left by an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Worker threads (1 guarantees bit-determinism; content is
        /// identical for any count).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train an embedding from a store and a fitting-gap table.
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        prob_mode: Option<crate::train::ProbMode>,
    },
    /// Retrieve the best-fitting database shapes for a query mesh.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(short, long, default_value_t = 5)]
        n: usize,
        /// Also deform each retrieved mesh toward the query and export it.
        #[arg(long)]
        deform: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the retrieval metrics (with the Ranked-CD baseline) over the
    /// store's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        table: PathBuf,
        /// Output path prefix for the CSV/JSON reports.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Protocol::All)]
        protocol: Protocol,
        #[arg(long, default_value_t = 150)]
        n_rank: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Report distances multiplied by 100.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Deform a source mesh toward a target mesh and export the result.
    Deform {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 100)]
        resolution: u32,
    },
}

/// Run-wide configuration file (TOML or JSON), mirrored into every output's
/// metadata sidecar as a hash.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub udf_resolution: u32,
    pub lambda: f64,
    pub chamfer: ChamferVariant,
    pub ingest_train_points: usize,
    pub ingest_eval_points: usize,
    pub solver: SolverOptions,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            udf_resolution: 100,
            lambda: 1.0,
            chamfer: ChamferVariant::Squared,
            ingest_train_points: crate::geometry::TRAIN_CLOUD_POINTS,
            ingest_eval_points: crate::geometry::EVAL_CLOUD_POINTS,
            solver: SolverOptions::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad JSON config: {e}")))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::usage(format!("bad TOML config: {e}")))?
        };
        Ok(parsed)
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::seed::fnv1a64(canonical.as_bytes()))
    }

    fn fitgap_options(&self) -> FitGapComputeOptions {
        FitGapComputeOptions {
            resolution: self.udf_resolution,
            solver: self.solver.clone(),
            lambda: self.lambda,
            with_eval: false,
            chamfer: self.chamfer,
        }
    }
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

macro_rules! internal_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::internal(e.to_string())
            }
        })*
    };
}

internal_from!(
    crate::store::StoreError,
    crate::fitgap::FitGapError,
    crate::train::TrainError,
    crate::embed::EmbedError,
    crate::reteval::RetEvalError,
    crate::geometry::GeometryError,
    crate::deform::DeformError,
    crate::distance_field::GridError,
    std::io::Error
);

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed_override: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
        config.train.seed = seed;
    }
    config.train.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(config)
}

fn configure_workers(workers: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::internal(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn write_meta(
    path: &Path,
    config: &RunConfig,
    extra: serde_json::Value,
) -> Result<(), CliError> {
    let meta = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "extra": extra,
    });
    let meta_path = meta_sidecar_path(path);
    std::fs::write(meta_path, serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

fn meta_sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

fn journal_path_for(table_path: &Path) -> PathBuf {
    let name = table_path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "table".to_string());
    match std::env::var_os(CACHE_DIR_ENV) {
        Some(dir) => PathBuf::from(dir).join(format!("{name}.journal")),
        None => {
            let mut os = table_path.as_os_str().to_owned();
            os.push(".journal");
            PathBuf::from(os)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth {
            family,
            count,
            seed,
            test_split,
            out,
        } => cmd_synth(family, count, seed, test_split, &out),
        Command::Ingest {
            manifest,
            out,
            config,
            seed,
        } => cmd_ingest(&manifest, &out, &load_config(&config, seed)?),
        Command::Fitgap {
            store,
            out,
            config,
            seed,
            resume,
            workers,
        } => {
            configure_workers(workers)?;
            cmd_fitgap(&store, &out, &load_config(&config, seed)?, resume)
        }
        Command::Train {
            store,
            table,
            out,
            strategy,
            config,
            seed,
            prob_mode,
        } => {
            let mut config = load_config(&config, seed)?;
            if let Some(mode) = prob_mode {
                config.train.prob_mode = mode;
            }
            cmd_train(&store, &table, &out, strategy, &config)
        }
        Command::Retrieve {
            checkpoint,
            store,
            query,
            n,
            deform,
            out,
            config,
        } => cmd_retrieve(
            &checkpoint,
            &store,
            &query,
            n,
            deform,
            out.as_deref(),
            &load_config(&config, None)?,
        ),
        Command::Evaluate {
            checkpoint,
            store,
            table,
            out,
            protocol,
            n_rank,
            seed,
            paper_scale,
            config,
            workers,
        } => {
            configure_workers(workers)?;
            cmd_evaluate(
                &checkpoint,
                &store,
                &table,
                &out,
                protocol,
                n_rank,
                paper_scale,
                &load_config(&config, seed)?,
            )
        }
        Command::Deform {
            source,
            target,
            out,
            lambda,
            resolution,
        } => cmd_deform(&source, &target, &out, lambda, resolution),
    }
}

fn cmd_synth(
    family: crate::reteval::synth::FamilyKind,
    count: usize,
    seed: u64,
    test_split: usize,
    out: &Path,
) -> Result<(), CliError> {
    if count < 2 {
        return Err(CliError::usage("--count must be at least 2"));
    }
    if test_split >= count {
        return Err(CliError::usage("--test-split must leave at least one training shape"));
    }
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (mesh, label) = crate::reteval::synth::family_member(family, i, seed)
            .map_err(|e| CliError::internal(e.to_string()))?;
        let path = out.join(format!("{i:04}_{label}.obj"));
        save_obj(&mesh, &path)?;
        entries.push(ManifestEntry {
            id: i as u32,
            path,
            split: if i < count - test_split {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    let manifest_path = out.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&entries).unwrap(),
    )?;
    println!(
        "generated {count} {family:?} shapes ({} train / {test_split} test) at {}",
        count - test_split,
        out.display()
    );
    Ok(())
}

fn cmd_ingest(manifest: &Path, out: &Path, config: &RunConfig) -> Result<(), CliError> {
    if !manifest.exists() {
        return Err(CliError::usage(format!(
            "manifest {} does not exist",
            manifest.display()
        )));
    }
    let entries = read_dataset_manifest(manifest)?;
    let opts = IngestOptions {
        root_seed: config.seed,
        train_points: config.ingest_train_points,
        eval_points: config.ingest_eval_points,
        config_hash: config.hash(),
    };
    let (_, report) = ingest(&entries, out, &opts)?;
    for failure in &report.failures {
        eprintln!("ingest failure: {}: {}", failure.path.display(), failure.message);
    }
    println!(
        "ingested {} shapes ({} already up to date, {} failed) into {}",
        report.ingested,
        report.skipped_up_to_date,
        report.failures.len(),
        out.display()
    );
    Ok(())
}

fn cmd_fitgap(
    store_dir: &Path,
    out: &Path,
    config: &RunConfig,
    resume: bool,
) -> Result<(), CliError> {
    let store = Store::open(store_dir)?;
    let db = store.load_split(Split::Train)?;
    if db.len() < 2 {
        return Err(CliError::usage("the train split needs at least 2 shapes"));
    }
    let sampling = sample_pairs(&db, crate::seed::derive(config.seed, "pair_sampling"))?;

    let journal_path = journal_path_for(out);
    if let Some(parent) = journal_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut table = if resume && journal_path.exists() {
        FitGapTable::load_lenient(&journal_path)?
    } else if resume && out.exists() {
        FitGapTable::load(out)?
    } else {
        FitGapTable::new()
    };
    // A rewritten journal drops any torn trailing record.
    table.save(&journal_path)?;
    let mut journal = TableJournal::open(&journal_path)?;

    let opts = config.fitgap_options();
    let failures =
        crate::fitgap::precompute(&db, &sampling, &opts, &mut table, Some(&mut journal))?;
    for f in &failures {
        eprintln!("pair ({}, {}) failed: {}", f.source, f.target, f.error);
    }
    table.save(out)?;
    write_meta(
        out,
        config,
        serde_json::json!({
            "pairs": sampling.pair_count(),
            "entries": table.len(),
            "failures": failures.len(),
        }),
    )?;
    println!(
        "fitting-gap table: {} entries ({} failures) -> {}",
        table.len(),
        failures.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    store_dir: &Path,
    table_path: &Path,
    out: &Path,
    strategy: Strategy,
    config: &RunConfig,
) -> Result<(), CliError> {
    let store = Store::open(store_dir)?;
    let db = store.load_split(Split::Train)?;
    let table = FitGapTable::load(table_path)?;
    let (model, history) = train(&db, &table, &config.train, strategy)?;
    save_checkpoint(&model, out)?;
    let loss_path = out.with_extension("loss.csv");
    history.save_csv(&loss_path)?;
    write_meta(
        out,
        config,
        serde_json::json!({
            "strategy": format!("{strategy:?}"),
            "k": model.k,
            "epochs": history.epochs.len(),
            "final_loss": history.final_loss(),
            "store_config_hash": store.manifest.config_hash,
        }),
    )?;
    println!(
        "trained {} epochs (final loss {:.6}) -> {}",
        history.epochs.len(),
        history.final_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn check_checkpoint_compat(
    checkpoint: &Path,
    model_k: usize,
    store: &Store,
) -> Result<(), CliError> {
    let meta_path = meta_sidecar_path(checkpoint);
    let Ok(text) = std::fs::read_to_string(&meta_path) else {
        return Ok(()); // no sidecar, nothing to check
    };
    let meta: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::internal(format!("bad checkpoint sidecar: {e}")))?;
    if let Some(k) = meta["extra"]["k"].as_u64() {
        if k as usize != model_k {
            return Err(CliError::usage(format!(
                "checkpoint sidecar k {k} does not match checkpoint k {model_k}"
            )));
        }
    }
    if let Some(hash) = meta["extra"]["store_config_hash"].as_str() {
        if hash != store.manifest.config_hash {
            return Err(CliError::usage(
                "checkpoint was trained against a store with a different config hash",
            ));
        }
    }
    Ok(())
}

fn cmd_retrieve(
    checkpoint: &Path,
    store_dir: &Path,
    query_path: &Path,
    n: usize,
    deform: bool,
    out: Option<&Path>,
    config: &RunConfig,
) -> Result<(), CliError> {
    if !query_path.exists() {
        return Err(CliError::usage(format!(
            "query file {} does not exist",
            query_path.display()
        )));
    }
    let store = Store::open(store_dir)?;
    let db = store.load_split(Split::Train)?;
    let model = load_checkpoint(checkpoint)?;
    check_checkpoint_compat(checkpoint, model.k, &store)?;

    let raw = load_mesh(query_path).map_err(|e| CliError::usage(e.to_string()))?;
    let query = ShapeRecord::build(
        ShapeId::UNASSIGNED,
        &raw,
        config.seed,
        store.manifest.train_points,
        1, // retrieval does not need the dense cloud
    )?;

    let index = build_index(&db, &model)?;
    let ranked = crate::reteval::retrieve(&query, &index, &model, n)?;
    for (id, delta) in &ranked {
        println!("{id}\t{delta}");
    }

    if deform {
        let out_dir = out.ok_or_else(|| CliError::usage("--deform requires --out"))?;
        std::fs::create_dir_all(out_dir)?;
        let udf = crate::fitgap::target_udf(&query, config.udf_resolution)?;
        let by_id: std::collections::BTreeMap<ShapeId, &ShapeRecord> =
            db.iter().map(|r| (r.id, r)).collect();
        for (id, _) in &ranked {
            let source = by_id[id];
            let problem =
                crate::deform::DeformationProblem::new(source.mesh.clone(), udf.clone())
                    .with_lambda(config.lambda);
            let result = crate::deform::deform(&problem, &config.solver)?;
            let obj_path = out_dir.join(format!("deformed_{id}.obj"));
            crate::deform::export_result(&problem, &result, &obj_path)?;
        }
        println!("deformed {} retrievals into {}", ranked.len(), out_dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    store_dir: &Path,
    table_path: &Path,
    out_prefix: &Path,
    protocol: Protocol,
    n_rank: usize,
    paper_scale: bool,
    config: &RunConfig,
) -> Result<(), CliError> {
    let store = Store::open(store_dir)?;
    let db = store.load_split(Split::Train)?;
    let queries = store.load_split(Split::Test)?;
    if queries.is_empty() {
        return Err(CliError::usage("the store has no test split to evaluate"));
    }
    let model = load_checkpoint(checkpoint)?;
    check_checkpoint_compat(checkpoint, model.k, &store)?;
    let mut table = if table_path.exists() {
        FitGapTable::load(table_path)?
    } else {
        FitGapTable::new()
    };

    let opts = EvalOptions {
        n_rank,
        top_n: 3,
        seed: crate::seed::derive(config.seed, "evaluate"),
        fitgap: FitGapComputeOptions {
            with_eval: true,
            ..config.fitgap_options()
        },
    };
    let index = build_index(&db, &model)?;
    let ours = evaluate(
        &queries,
        &db,
        &EgocentricRanker {
            index: &index,
            model: &model,
        },
        &mut table,
        &opts,
    )?;
    let baseline = evaluate(&queries, &db, &ChamferRanker, &mut table, &opts)?;
    // Persist the lazily computed after-deformation gaps for reuse.
    table.save(table_path)?;

    write_combined_csv(out_prefix, &ours, &baseline, protocol, paper_scale)?;
    let json_path = out_prefix.with_extension("json");
    let s = if paper_scale { 100.0 } else { 1.0 };
    let aggregate = |r: &MetricsReport| {
        serde_json::json!({
            "mean_top1_dm": r.mean_top1_dm * s,
            "mean_top1_em": r.mean_top1_em * s,
            "mean_top3_dm": r.mean_topn_dm * s,
            "mean_top3_em": r.mean_topn_em * s,
            "mean_rank": r.mean_rank,
            "recall_at_1": r.recall_at_1,
        })
    };
    let json = serde_json::json!({
        "config_hash": config.hash(),
        "seed": config.seed,
        "queries": ours.per_query.len(),
        "n_rank": n_rank,
        "paper_scale": paper_scale,
        "egocentric": aggregate(&ours),
        "ranked_cd": aggregate(&baseline),
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&json).unwrap())?;
    println!(
        "evaluated {} queries: mean rank {:.2} (ours) vs {:.2} (ranked-cd) -> {}",
        ours.per_query.len(),
        ours.mean_rank,
        baseline.mean_rank,
        json_path.display()
    );
    Ok(())
}

fn write_combined_csv(
    out_prefix: &Path,
    ours: &MetricsReport,
    baseline: &MetricsReport,
    protocol: Protocol,
    paper_scale: bool,
) -> Result<(), CliError> {
    use std::io::Write;
    let csv_path = out_prefix.with_extension("csv");
    let s = if paper_scale { 100.0 } else { 1.0 };
    let mut w = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    let columns: &[&str] = match protocol {
        Protocol::Table1 => &["top1_dm", "top3_dm", "top1_em", "top3_em"],
        Protocol::Rank => &["rank", "pool_size"],
        Protocol::Recall => &["recall_at_1"],
        Protocol::All => &[
            "top1_dm", "top3_dm", "top1_em", "top3_em", "rank", "recall_at_1", "pool_size",
        ],
    };
    let mut header = String::from("query");
    for prefix in ["ours", "rcd"] {
        header.push_str(&format!(",{prefix}_top1"));
        for c in columns {
            header.push_str(&format!(",{prefix}_{c}"));
        }
    }
    writeln!(w, "{header}")?;
    for (a, b) in ours.per_query.iter().zip(&baseline.per_query) {
        debug_assert_eq!(a.query, b.query);
        let mut row = format!("{}", a.query);
        for q in [a, b] {
            row.push_str(&format!(",{}", q.top1));
            for c in columns {
                let cell = match *c {
                    "top1_dm" => format!("{}", q.top1_dm * s),
                    "top3_dm" => format!("{}", q.topn_dm * s),
                    "top1_em" => format!("{}", q.top1_em * s),
                    "top3_em" => format!("{}", q.topn_em * s),
                    "rank" => format!("{}", q.rank),
                    "recall_at_1" => format!("{}", q.recall_at_1),
                    "pool_size" => format!("{}", q.pool_size),
                    _ => unreachable!(),
                };
                row.push_str(&format!(",{cell}"));
            }
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_deform(
    source: &Path,
    target: &Path,
    out: &Path,
    lambda: f64,
    resolution: u32,
) -> Result<(), CliError> {
    for p in [source, target] {
        if !p.exists() {
            return Err(CliError::usage(format!("{} does not exist", p.display())));
        }
    }
    if resolution < 2 {
        return Err(CliError::usage("--resolution must be at least 2"));
    }
    let source_mesh = crate::geometry::normalize(&load_mesh(source).map_err(|e| CliError::usage(e.to_string()))?)?;
    let target_mesh = crate::geometry::normalize(&load_mesh(target).map_err(|e| CliError::usage(e.to_string()))?)?;
    let udf = crate::distance_field::build_udf_in_cube(
        &target_mesh,
        &nalgebra::Point3::origin(),
        crate::fitgap::NORMALIZED_DOMAIN_SIDE,
        resolution,
    )?;
    let problem =
        crate::deform::DeformationProblem::new(source_mesh, udf).with_lambda(lambda);
    let result = crate::deform::deform(&problem, &SolverOptions::default())?;
    crate::deform::export_result(&problem, &result, out)?;
    println!(
        "deformed: fit {:.6e}, rigidity {:.6e}, {} iterations (converged: {}) -> {}",
        result.fit_term,
        result.rigidity_term,
        result.iterations,
        result.converged,
        out.display()
    );
    Ok(())
}

/// Used by `ensure_eval_gaps` consumers in tests; re-exported for symmetry.
pub fn warm_eval_cache(
    queries: &[ShapeRecord],
    db: &[ShapeRecord],
    table: &mut FitGapTable,
    opts: &EvalOptions,
) -> Result<(), CliError> {
    for q in queries {
        let pool = candidate_pool(q, db, opts.n_rank, opts.seed);
        ensure_eval_gaps(q, &pool, table, &opts.fitgap)?;
    }
    Ok(())
}
