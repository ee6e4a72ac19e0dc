use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use nvtree::ensemble::read_config;
use nvtree::fault::{self, FAULT_POINTS};
use nvtree::{EnsembleIndex, IndexConfig};
use nvtree_harness::crash::{self, CrashMatrix, Scenario};
use nvtree_harness::eval::{self, SweepSpec};
use nvtree_harness::vecfile::{read_vectors, write_vectors};
use nvtree_harness::workload::{distractors, WorkloadSpec};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "nvt",
    version,
    about = "Build, query and test NV-tree ensemble indexes"
)]
struct Cli {
    /// Abort the process at the Nth time the named fault point is reached.
    #[arg(long, global = true, value_name = "ID:N")]
    fault_point: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct IndexArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Defaults to <data-dir>/wal.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    trees: usize,
    /// Checked against the input file when given.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    fanout_min: usize,
    #[arg(long, default_value_t = 8)]
    fanout_max: usize,
    #[arg(long, default_value_t = 0.70)]
    fill_target: f64,
    /// Transactions between checkpoints.
    #[arg(long, default_value_t = 64)]
    checkpoint_every: u64,
}

impl IndexArgs {
    fn config(&self, dim: usize) -> Result<IndexConfig> {
        if let Some(d) = self.dim {
            ensure!(
                d == dim,
                "--dim {d} does not match the input dimension {dim}"
            );
        }
        let mut c = IndexConfig::new(&self.data_dir, dim);
        if let Some(l) = &self.log_dir {
            c.log_dir = l.clone();
        }
        c.trees = self.trees;
        c.seed = self.seed;
        c.params.fanout_min = self.fanout_min;
        c.params.fanout_max = self.fanout_max;
        c.params.fill_target = self.fill_target;
        c.checkpoint_every = self.checkpoint_every;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic vectors to a vector file.
    Gen {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bulk-load a new index from a vector file.
    Build {
        #[command(flatten)]
        index: IndexArgs,
        #[arg(long)]
        input: PathBuf,
    },
    /// Insert vectors in batched transactions, creating the index if needed.
    Insert {
        #[command(flatten)]
        index: IndexArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        batch: usize,
        /// Register each batch as a media item, numbered from this id.
        #[arg(long)]
        media_from: Option<u64>,
    },
    /// Run queries from a vector file.
    Query {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(short, long, default_value_t = 100)]
        k: usize,
        /// Treat all input vectors as the descriptors of one media query.
        #[arg(long)]
        media: bool,
        /// Media results to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Open the index, running crash recovery, and report what was done.
    Recover {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Recall, media-accuracy and throughput measurements.
    Bench(BenchArgs),
    /// Crash at every registered fault point and verify recovery.
    Crashtest {
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run plans for this point.
        #[arg(long)]
        only: Option<String>,
    },
    #[command(hide = true)]
    CrashWorker {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Recall over the given scales.
    #[arg(long)]
    sweep: bool,
    /// Media-query top-1 accuracy per perturbation level.
    #[arg(long)]
    media: bool,
    /// Insert throughput with full and capped cache.
    #[arg(long)]
    throughput: bool,
    #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
    scales: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    trees: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(short, long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    perturbation: f32,
    /// Distractors for --media and initial size for --throughput.
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    media_count: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1")]
    levels: Vec<f32>,
    #[arg(long, default_value_t = 50_000)]
    inserts: usize,
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    capped_cache: usize,
    #[arg(long)]
    workdir: Option<PathBuf>,
}

fn line(v: serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{v}")?;
    out.flush()?;
    Ok(())
}

fn workdir(given: &Option<PathBuf>) -> Result<(Option<tempfile::TempDir>, PathBuf)> {
    match given {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            Ok((None, p.clone()))
        }
        None => {
            let t = tempfile::tempdir()?;
            let p = t.path().to_path_buf();
            Ok((Some(t), p))
        }
    }
}

/// Removes what a failed create left behind, if the directory was new.
fn cleanup_new(dir: &Path, existed: bool) {
    if !existed {
        let _ = std::fs::remove_dir_all(dir);
    }
}

fn input_vectors(path: &Path) -> Result<(Vec<Vec<f32>>, usize)> {
    let v = read_vectors(path)?;
    ensure!(!v.is_empty(), "{} holds no vectors", path.display());
    let dim = v[0].len();
    Ok((v, dim))
}

fn build(index: &IndexArgs, input: &Path) -> Result<()> {
    let (vectors, dim) = input_vectors(input)?;
    let config = index.config(dim)?;
    let existed = config.data_dir.exists();
    let n = vectors.len();
    let res = EnsembleIndex::bulk_load(config.clone(), eval::to_vectors(&vectors, 0), &[])
        .and_then(|ix| {
            let stats = ix.stats();
            ix.close()?;
            Ok(stats)
        });
    match res {
        Ok(stats) => line(json!({
            "built": n,
            "dim": dim,
            "trees": config.trees,
            "leaf_file_bytes": stats.leaf_file_bytes,
        })),
        Err(e) => {
            cleanup_new(&config.data_dir, existed);
            Err(e).context("build failed")
        }
    }
}

fn insert(index: &IndexArgs, input: &Path, batch: usize, media_from: Option<u64>) -> Result<()> {
    let (vectors, dim) = input_vectors(input)?;
    let data_dir = &index.data_dir;
    let existed = data_dir.exists();
    let fresh = read_config(data_dir).is_err();
    let ix = if fresh {
        let config = index.config(dim)?;
        match EnsembleIndex::create(config) {
            Ok(ix) => ix,
            Err(e) => {
                cleanup_new(data_dir, existed);
                return Err(e).context("creating the index failed");
            }
        }
    } else {
        EnsembleIndex::open(data_dir)?
    };
    ensure!(
        ix.config().dim == dim,
        "index dimension {} but input has {dim}",
        ix.config().dim
    );
    for (i, chunk) in vectors.chunks(batch.max(1)).enumerate() {
        match media_from {
            Some(m) => {
                let media = m + i as u64;
                let tid = ix.insert_media(media, chunk.to_vec())?;
                let r = ix.media_range(media).unwrap_or(0..0);
                line(
                    json!({"tid": tid, "media": media, "first_id": r.start, "count": chunk.len()}),
                )?;
            }
            None => {
                let (tid, r) = ix.insert_vectors(chunk.to_vec())?;
                line(json!({"tid": tid, "first_id": r.start, "count": chunk.len()}))?;
            }
        }
    }
    ix.close()?;
    Ok(())
}

fn query(data_dir: &Path, input: &Path, k: usize, media: bool, top: usize) -> Result<()> {
    let (queries, _) = input_vectors(input)?;
    let ix = EnsembleIndex::open(data_dir)?;
    if media {
        for (rank, v) in ix
            .media_query(&queries, k)?
            .into_iter()
            .take(top)
            .enumerate()
        {
            line(json!({"rank": rank + 1, "media": v.media, "votes": v.votes}))?;
        }
    } else {
        for (i, q) in queries.iter().enumerate() {
            let r = ix.ensemble_search(q, k)?;
            let scores: Vec<u64> = r.hits.iter().map(|h| h.score).collect();
            line(json!({"query": i, "ids": r.ids(), "scores": scores}))?;
        }
    }
    ix.close()?;
    Ok(())
}

fn recover(data_dir: &Path) -> Result<()> {
    let (elapsed, report) = crash::time_recovery(data_dir)?;
    line(json!({
        "recovered": true,
        "checkpoint": report.checkpoint,
        "committed_tid": report.committed_tid,
        "splits_replayed": report.splits_replayed,
        "uncommitted_removed": report.uncommitted_removed,
        "inserts_redone": report.inserts_redone,
        "deletes_redone": report.deletes_redone,
        "torn_logs": report.torn_logs,
        "elapsed_ms": elapsed.as_millis() as u64,
    }))
}

fn bench(a: &BenchArgs) -> Result<()> {
    if !(a.sweep || a.media || a.throughput) {
        bail!("choose at least one of --sweep, --media, --throughput");
    }
    let (_guard, dir) = workdir(&a.workdir)?;
    if a.sweep {
        let spec = SweepSpec {
            scales: a.scales.clone(),
            dim: a.dim,
            seed: a.seed,
            index_seed: a.seed,
            trees: a.trees,
            queries: a.queries,
            k: a.k,
            perturbation: a.perturbation,
            pool: a.scales.first().copied().unwrap_or(0).min(10_000),
            ..SweepSpec::default()
        };
        let report = eval::run_recall_sweep(&spec, &dir.join("sweep"))?;
        let latency: Vec<_> = report
            .points
            .iter()
            .map(|p| json!({"n": p.n, "latency": p.latency}))
            .collect();
        line(json!({ "latency": latency }))?;
        line(json!({ "recall_report": report.figures() }))?;
    }
    if a.media {
        let spec = WorkloadSpec {
            n: a.n,
            dim: a.dim,
            media: a.media_count,
            seed: a.seed,
            ..WorkloadSpec::default()
        };
        let acc = eval::media_accuracy(&spec, &a.levels, a.trees, a.seed, a.k, &dir.join("media"))?;
        line(json!({ "media_accuracy": acc }))?;
    }
    if a.throughput {
        let all = distractors(a.n + a.inserts, a.dim, 100, a.seed);
        let (initial, stream) = all.split_at(a.n);
        for (name, cache) in [("cached", None), ("capped", Some(a.capped_cache))] {
            let d = dir.join(format!("throughput-{name}"));
            let r = eval::insert_throughput(
                &d, a.dim, a.trees, a.seed, initial, stream, a.batch, cache,
            )?;
            std::fs::remove_dir_all(&d)?;
            line(json!({ "throughput": r }))?;
        }
    }
    Ok(())
}

fn crashtest(workdir_arg: &Option<PathBuf>, seed: u64, only: &Option<String>) -> Result<bool> {
    let (_guard, dir) = workdir(workdir_arg)?;
    let exe = std::env::current_exe()?;
    let matrix = CrashMatrix::new(&exe, Scenario::standard(seed), &dir)?;
    let results = match only {
        Some(p) => {
            let dry = matrix.dry_run()?;
            let plan = dry
                .plan(p, dry.total(p).div_ceil(2).max(1))
                .with_context(|| format!("the scenario never reaches {p}"))?;
            vec![matrix.run_case(&plan, false)?]
        }
        None => matrix.run(|r| {
            let _ = line(json!({ "case": r }));
        })?,
    };
    if only.is_some() {
        line(json!({ "case": results[0] }))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let mut points: Vec<&str> = results.iter().map(|r| r.point.as_str()).collect();
    points.sort_unstable();
    points.dedup();
    line(json!({
        "cases": results.len(),
        "failed": failed,
        "points_covered": points.len(),
        "points_registered": FAULT_POINTS.len(),
        "max_recovery_ms": results.iter().map(|r| r.recovery_ms).max().unwrap_or(0),
    }))?;
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(spec) = &cli.fault_point {
        let (point, n) =
            fault::parse_spec(spec).with_context(|| format!("bad fault point {spec:?}"))?;
        ensure!(
            FAULT_POINTS.contains(&point.as_str()),
            "unknown fault point {point}"
        );
        fault::arm(&point, n);
    }
    match &cli.command {
        Cmd::Gen {
            output,
            n,
            dim,
            clusters,
            seed,
        } => {
            write_vectors(output, &distractors(*n, *dim, *clusters, *seed))?;
            line(json!({"written": n, "dim": dim, "path": output}))?;
        }
        Cmd::Build { index, input } => build(index, input)?,
        Cmd::Insert {
            index,
            input,
            batch,
            media_from,
        } => insert(index, input, *batch, *media_from)?,
        Cmd::Query {
            data_dir,
            input,
            k,
            media,
            top,
        } => query(data_dir, input, *k, *media, *top)?,
        Cmd::Recover { data_dir } => recover(data_dir)?,
        Cmd::Bench(a) => bench(a)?,
        Cmd::Crashtest {
            workdir,
            seed,
            only,
        } => return crashtest(workdir, *seed, only),
        Cmd::CrashWorker { scenario, data_dir } => {
            let s = crash::read_scenario(scenario)?;
            crash::run_worker(&s, data_dir, &mut io::stdout().lock())?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("nvt: error: {e:#}");
            ExitCode::from(2)
        }
    }
}
