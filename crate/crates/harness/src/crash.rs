//! Crash-injection driver. A child process runs a scripted sequence of
//! transactions with one fault point armed; the parent recovers the index
//! and compares it with a reference built from the committed prefix alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use nvtree::fault::{FAULT_ENV, FAULT_POINTS};
use nvtree::txn::checkpoint::MediaEntry;
use nvtree::{EnsembleIndex, OpenOptions, Tid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{index_config, to_vectors};
use crate::workload::{distractors, perturb};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Insert { count: usize },
    InsertMedia { media: u64, count: usize },
    DeleteMedia { media: u64 },
    UpdateMedia { media: u64, count: usize },
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub dim: usize,
    pub trees: usize,
    pub seed: u64,
    pub clusters: usize,
    /// Bulk-loaded distractors.
    pub initial: usize,
    /// Bulk-loaded media: (media id, descriptor count).
    pub initial_media: Vec<(u64, usize)>,
    pub steps: Vec<Step>,
    /// Cache cap in the crashing process, small enough to force leaf flushes.
    pub cache_groups: usize,
    pub checkpoint_every: u64,
    pub queries: usize,
    pub k: usize,
}

impl Scenario {
    /// Grows one group past the split limit, with media inserts, deletes,
    /// updates and explicit and periodic checkpoints along the way.
    pub fn standard(seed: u64) -> Self {
        use Step::*;
        Self {
            dim: 16,
            trees: 3,
            seed,
            clusters: 20,
            initial: 12_000,
            initial_media: vec![(1, 300), (2, 300), (3, 300)],
            steps: vec![
                Insert { count: 1500 },
                InsertMedia {
                    media: 10,
                    count: 400,
                },
                Insert { count: 1500 },
                DeleteMedia { media: 1 },
                Checkpoint,
                Insert { count: 2000 },
                UpdateMedia {
                    media: 2,
                    count: 300,
                },
                Insert { count: 2000 },
                InsertMedia {
                    media: 11,
                    count: 400,
                },
                DeleteMedia { media: 10 },
                Insert { count: 2000 },
                Checkpoint,
                UpdateMedia {
                    media: 11,
                    count: 300,
                },
                Insert { count: 1500 },
            ],
            cache_groups: 2,
            checkpoint_every: 4,
            queries: 60,
            k: 20,
        }
    }

    fn media_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.initial_media.iter().map(|m| m.0).collect();
        for s in &self.steps {
            if let Step::InsertMedia { media, .. } | Step::UpdateMedia { media, .. } = s {
                ids.push(*media);
            }
        }
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// One transaction of the script.
#[derive(Debug, Clone)]
pub enum TidOp {
    Insert(Vec<Vec<f32>>),
    InsertMedia(u64, Vec<Vec<f32>>),
    DeleteMedia(u64),
}

#[derive(Debug, Clone)]
pub enum Action {
    Insert(Vec<Vec<f32>>),
    InsertMedia(u64, Vec<Vec<f32>>),
    DeleteMedia(u64),
    /// Delete then insert under consecutive TIDs.
    UpdateMedia(u64, Vec<Vec<f32>>),
    Checkpoint,
}

impl Action {
    fn tid_ops(&self) -> Vec<TidOp> {
        match self {
            Action::Insert(v) => vec![TidOp::Insert(v.clone())],
            Action::InsertMedia(m, v) => vec![TidOp::InsertMedia(*m, v.clone())],
            Action::DeleteMedia(m) => vec![TidOp::DeleteMedia(*m)],
            Action::UpdateMedia(m, v) => {
                vec![TidOp::DeleteMedia(*m), TidOp::InsertMedia(*m, v.clone())]
            }
            Action::Checkpoint => vec![],
        }
    }
}

pub struct Materialized {
    pub initial: Vec<Vec<f32>>,
    pub initial_media: Vec<MediaEntry>,
    pub actions: Vec<Action>,
    pub queries: Vec<Vec<f32>>,
}

impl Materialized {
    /// Transactions in TID order; TID `i + 1` is element `i`.
    pub fn tid_ops(&self) -> Vec<TidOp> {
        self.actions.iter().flat_map(|a| a.tid_ops()).collect()
    }
}

pub fn materialize(s: &Scenario) -> Materialized {
    let mut total = s.initial + s.initial_media.iter().map(|m| m.1).sum::<usize>();
    for step in &s.steps {
        if let Step::Insert { count }
        | Step::InsertMedia { count, .. }
        | Step::UpdateMedia { count, .. } = step
        {
            total += count;
        }
    }
    let mut all = distractors(total, s.dim, s.clusters, s.seed).into_iter();
    let mut take = |n: usize| -> Vec<Vec<f32>> { all.by_ref().take(n).collect() };
    let mut initial = take(s.initial);
    let mut initial_media = Vec::new();
    for &(media, count) in &s.initial_media {
        let start = initial.len() as u64;
        initial.extend(take(count));
        initial_media.push(MediaEntry {
            media,
            start,
            end: initial.len() as u64,
        });
    }
    let actions: Vec<Action> = s
        .steps
        .iter()
        .map(|step| match *step {
            Step::Insert { count } => Action::Insert(take(count)),
            Step::InsertMedia { media, count } => Action::InsertMedia(media, take(count)),
            Step::DeleteMedia { media } => Action::DeleteMedia(media),
            Step::UpdateMedia { media, count } => Action::UpdateMedia(media, take(count)),
            Step::Checkpoint => Action::Checkpoint,
        })
        .collect();
    let mut pool: Vec<&Vec<f32>> = initial.iter().collect();
    for a in &actions {
        if let Action::Insert(v) | Action::InsertMedia(_, v) | Action::UpdateMedia(_, v) = a {
            pool.extend(v.iter());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
    let queries = (0..s.queries)
        .map(|i| {
            let src = pool[rng.gen_range(0..pool.len())];
            // Half exact copies, half near copies.
            perturb(src, if i % 2 == 0 { 0.0 } else { 0.1 }, &mut rng)
        })
        .collect();
    Materialized {
        initial,
        initial_media,
        actions,
        queries,
    }
}

/// Bulk-loads the scenario's initial state into `dir`.
pub fn prepare_base(s: &Scenario, m: &Materialized, dir: &Path) -> Result<()> {
    let config = index_config(dir, s.dim, s.trees, s.seed);
    EnsembleIndex::bulk_load(config, to_vectors(&m.initial, 0), &m.initial_media)?.close()?;
    Ok(())
}

fn apply(index: &EnsembleIndex, op: &TidOp) -> Result<Tid> {
    Ok(match op {
        TidOp::Insert(v) => index.insert_vectors(v.clone())?.0,
        TidOp::InsertMedia(m, v) => index.insert_media(*m, v.clone())?,
        TidOp::DeleteMedia(m) => index.delete_media(*m)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorkerEvent {
    Opened {
        tid: Tid,
        counts: BTreeMap<String, u64>,
    },
    Step {
        step: usize,
        tid: Tid,
        counts: BTreeMap<String, u64>,
    },
    Done,
}

fn counts() -> BTreeMap<String, u64> {
    nvtree::fault::hit_counts()
        .into_iter()
        .map(|(p, n)| (p.to_string(), n))
        .collect()
}

fn emit(out: &mut impl Write, e: &WorkerEvent) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(e)?)?;
    out.flush()?;
    Ok(())
}

/// Body of the child process: opens `dir` and runs every step, reporting
/// the committed TID after each one. A fault armed through the environment
/// aborts the process part way.
pub fn run_worker(s: &Scenario, dir: &Path, out: &mut impl Write) -> Result<()> {
    let m = materialize(s);
    let index = EnsembleIndex::open_with(
        dir,
        &OpenOptions {
            cache_groups: Some(s.cache_groups),
            checkpoint_every: Some(s.checkpoint_every),
            checkpoint_log_bytes: None,
        },
    )?;
    emit(
        out,
        &WorkerEvent::Opened {
            tid: index.committed_tid(),
            counts: counts(),
        },
    )?;
    for (i, a) in m.actions.iter().enumerate() {
        match a {
            Action::Checkpoint => {
                index.checkpoint()?;
            }
            Action::UpdateMedia(media, v) => {
                index.update_media(*media, v.clone())?;
            }
            other => {
                for op in other.tid_ops() {
                    apply(&index, &op)?;
                }
            }
        }
        emit(
            out,
            &WorkerEvent::Step {
                step: i,
                tid: index.committed_tid(),
                counts: counts(),
            },
        )?;
    }
    index.close()?;
    emit(out, &WorkerEvent::Done)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashPlan {
    pub point: String,
    pub occurrence: u64,
    /// Inclusive bounds on the committed TID after recovery.
    pub expected: (Tid, Tid),
}

/// Hit counts and committed TIDs of a fault-free run, per stage (stage 0
/// is opening the index, stage `i + 1` is step `i`).
#[derive(Debug, Clone)]
pub struct DryRun {
    pub stages: Vec<(Tid, BTreeMap<String, u64>)>,
}

impl DryRun {
    pub fn total(&self, point: &str) -> u64 {
        self.stages
            .last()
            .and_then(|s| s.1.get(point))
            .copied()
            .unwrap_or(0)
    }

    /// The stage during which the `occurrence`th hit of `point` happens, and
    /// hence the range the committed TID must fall in.
    pub fn plan(&self, point: &str, occurrence: u64) -> Option<CrashPlan> {
        let idx = self
            .stages
            .iter()
            .position(|s| s.1.get(point).copied().unwrap_or(0) >= occurrence)?;
        let hi = self.stages[idx].0;
        let lo = if idx == 0 { hi } else { self.stages[idx - 1].0 };
        let expected = match point {
            // Every commit passes both points once, in TID order.
            "commit-before-record-flush" => (occurrence - 1, occurrence - 1),
            "commit-after-record-flush" => (occurrence, occurrence),
            _ => (lo, hi),
        };
        Some(CrashPlan {
            point: point.to_string(),
            occurrence,
            expected,
        })
    }

    /// First, middle and last occurrence of every registered point.
    pub fn plans(&self) -> Vec<CrashPlan> {
        let mut out = Vec::new();
        for p in FAULT_POINTS {
            let total = self.total(p);
            let mut occ = vec![1, total.div_ceil(2), total];
            occ.retain(|&o| o >= 1);
            occ.dedup();
            out.extend(occ.into_iter().filter_map(|o| self.plan(p, o)));
        }
        out
    }
}

fn parse_events(stdout: &str) -> Result<Vec<WorkerEvent>> {
    stdout
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad worker line {l:?}")))
        .collect()
}

struct Child {
    events: Vec<WorkerEvent>,
    success: bool,
    status: String,
    stderr: String,
}

fn spawn_worker(
    exe: &Path,
    scenario_file: &Path,
    dir: &Path,
    fault: Option<&CrashPlan>,
) -> Result<Child> {
    let mut cmd = Command::new(exe);
    cmd.arg("crash-worker")
        .arg("--scenario")
        .arg(scenario_file)
        .arg("--data-dir")
        .arg(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .env_remove(FAULT_ENV);
    if let Some(p) = fault {
        cmd.env(FAULT_ENV, format!("{}:{}", p.point, p.occurrence));
    }
    let out = cmd
        .output()
        .with_context(|| format!("running {}", exe.display()))?;
    Ok(Child {
        events: parse_events(&String::from_utf8_lossy(&out.stdout))?,
        success: out.status.success(),
        status: out.status.to_string(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    })
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for e in fs::read_dir(from)? {
        let e = e?;
        let target = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &target)?;
        } else {
            fs::copy(e.path(), &target)?;
        }
    }
    Ok(())
}

/// Appends a partial record to the newest segment of every log in `log_dir`.
pub fn tear_log_tails(log_dir: &Path) -> Result<usize> {
    let mut newest: BTreeMap<String, PathBuf> = BTreeMap::new();
    for e in fs::read_dir(log_dir)? {
        let path = e?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_string();
        if let Some(stem) = name.strip_suffix(".wal") {
            let prefix = stem
                .rsplit_once('-')
                .map(|p| p.0)
                .unwrap_or(stem)
                .to_string();
            let slot = newest.entry(prefix).or_insert_with(|| path.clone());
            if path > *slot {
                *slot = path;
            }
        }
    }
    for path in newest.values() {
        let mut f = fs::OpenOptions::new().append(true).open(path)?;
        f.write_all(&[0x2a, 0x00, 0x00, 0x00, 0x07, 0xde, 0xad, 0xbe, 0xef, 0x01])?;
        f.sync_all()?;
    }
    Ok(newest.len())
}

/// Describes the first difference between two indexes, if any.
pub fn compare_indexes(
    a: &EnsembleIndex,
    b: &EnsembleIndex,
    queries: &[Vec<f32>],
    k: usize,
    media: &[u64],
) -> Result<Option<String>> {
    let (sa, sb) = (a.stats(), b.stats());
    if sa.vectors_per_tree != sb.vectors_per_tree {
        return Ok(Some(format!(
            "tree sizes {:?} vs {:?}",
            sa.vectors_per_tree, sb.vectors_per_tree
        )));
    }
    for &m in media {
        if a.media_range(m) != b.media_range(m) {
            return Ok(Some(format!(
                "media {m}: {:?} vs {:?}",
                a.media_range(m),
                b.media_range(m)
            )));
        }
    }
    let (na, nb) = (a.snapshot_now(), b.snapshot_now());
    if na.id_limit != nb.id_limit {
        return Ok(Some(format!("id limit {} vs {}", na.id_limit, nb.id_limit)));
    }
    for (qi, q) in queries.iter().enumerate() {
        for t in 0..a.trees().len() {
            let ra = a.search_tree(t, q, k, &na)?;
            let rb = b.search_tree(t, q, k, &nb)?;
            if ra != rb {
                return Ok(Some(format!("query {qi}, tree {t}: {ra:?} vs {rb:?}")));
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub point: String,
    pub occurrence: u64,
    pub torn_tail: bool,
    pub expected: (Tid, Tid),
    pub child_status: String,
    /// Last committed TID the child reported before dying.
    pub last_reported: Tid,
    pub recovered_tid: Tid,
    pub resumed_deletions: Vec<u64>,
    pub torn_logs: usize,
    pub recovery_ms: u64,
    pub passed: bool,
    pub detail: String,
}

pub struct CrashMatrix {
    pub exe: PathBuf,
    pub scenario: Scenario,
    pub workdir: PathBuf,
    materialized: Materialized,
    scenario_file: PathBuf,
    base: PathBuf,
}

impl CrashMatrix {
    /// Writes the scenario and its bulk-loaded base index under `workdir`.
    /// `exe` is the `nvt` binary, which provides the `crash-worker` command.
    pub fn new(exe: &Path, scenario: Scenario, workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir)?;
        let scenario_file = workdir.join("scenario.json");
        fs::write(&scenario_file, serde_json::to_vec_pretty(&scenario)?)?;
        let materialized = materialize(&scenario);
        let base = workdir.join("base");
        if base.exists() {
            fs::remove_dir_all(&base)?;
        }
        prepare_base(&scenario, &materialized, &base)?;
        Ok(Self {
            exe: exe.to_path_buf(),
            scenario,
            workdir: workdir.to_path_buf(),
            materialized,
            scenario_file,
            base,
        })
    }

    fn fresh_copy(&self, name: &str) -> Result<PathBuf> {
        let dir = self.workdir.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        copy_dir(&self.base, &dir)?;
        Ok(dir)
    }

    /// Runs the script without a fault and records hit counts per stage.
    pub fn dry_run(&self) -> Result<DryRun> {
        let dir = self.fresh_copy("dry-run")?;
        let child = spawn_worker(&self.exe, &self.scenario_file, &dir, None)?;
        ensure!(
            child.success,
            "fault-free worker failed ({}): {}",
            child.status,
            child.stderr
        );
        let stages = child
            .events
            .into_iter()
            .filter_map(|e| match e {
                WorkerEvent::Opened { tid, counts } | WorkerEvent::Step { tid, counts, .. } => {
                    Some((tid, counts))
                }
                WorkerEvent::Done => None,
            })
            .collect::<Vec<_>>();
        ensure!(
            stages.len() == self.scenario.steps.len() + 1,
            "worker reported {} stages",
            stages.len()
        );
        fs::remove_dir_all(&dir)?;
        Ok(DryRun { stages })
    }

    /// Reference index holding exactly TIDs `1..=tid` plus `resumed` deletions.
    pub fn reference(&self, tid: Tid, resumed: &[u64]) -> Result<(PathBuf, EnsembleIndex)> {
        let dir = self.fresh_copy("reference")?;
        let index = EnsembleIndex::open(&dir)?;
        let ops = self.materialized.tid_ops();
        ensure!(
            tid as usize <= ops.len(),
            "recovered TID {tid} beyond the script"
        );
        for op in &ops[..tid as usize] {
            apply(&index, op)?;
        }
        for &m in resumed {
            index.delete_media(m)?;
        }
        Ok((dir, index))
    }

    pub fn run_case(&self, plan: &CrashPlan, torn_tail: bool) -> Result<CaseResult> {
        let dir = self.fresh_copy("case")?;
        let child = spawn_worker(&self.exe, &self.scenario_file, &dir, Some(plan))?;
        let last_reported = child
            .events
            .iter()
            .filter_map(|e| match e {
                WorkerEvent::Opened { tid, .. } | WorkerEvent::Step { tid, .. } => Some(*tid),
                WorkerEvent::Done => None,
            })
            .last()
            .unwrap_or(0);
        let mut result = CaseResult {
            point: plan.point.clone(),
            occurrence: plan.occurrence,
            torn_tail,
            expected: plan.expected,
            child_status: child.status.clone(),
            last_reported,
            recovered_tid: 0,
            resumed_deletions: vec![],
            torn_logs: 0,
            recovery_ms: 0,
            passed: false,
            detail: String::new(),
        };
        if child.success || !child.stderr.contains("fault injected") {
            result.detail = format!(
                "worker did not crash at the fault point: {}",
                child.stderr.trim()
            );
            return Ok(result);
        }
        if torn_tail {
            tear_log_tails(&dir.join("wal"))?;
        }
        let start = Instant::now();
        let recovered = EnsembleIndex::open(&dir).map_err(|e| anyhow!("recovery failed: {e}"))?;
        result.recovery_ms = start.elapsed().as_millis() as u64;
        let report = recovered.recovery_report().cloned().unwrap_or_default();
        result.recovered_tid = report.committed_tid;
        result.torn_logs = report.torn_logs;
        result.resumed_deletions = recovered.resumed_deletions().to_vec();
        let c = report.committed_tid;
        if c < last_reported || c < plan.expected.0 || c > plan.expected.1 {
            result.detail = format!(
                "committed TID {c} outside expected {:?} (child reported {last_reported})",
                plan.expected
            );
            return Ok(result);
        }
        if torn_tail && report.torn_logs == 0 {
            result.detail = "torn tails were not detected".into();
            return Ok(result);
        }
        let (ref_dir, reference) = self.reference(c, &result.resumed_deletions)?;
        let diff = compare_indexes(
            &recovered,
            &reference,
            &self.materialized.queries,
            self.scenario.k,
            &self.scenario.media_ids(),
        )?;
        // The recovered index must also keep working.
        let probe = self.materialized.queries[0].clone();
        let after = recovered.insert_vectors(vec![probe.clone()]);
        recovered.close()?;
        reference.close()?;
        fs::remove_dir_all(&ref_dir)?;
        fs::remove_dir_all(&dir)?;
        match (diff, after) {
            (Some(d), _) => result.detail = d,
            (None, Err(e)) => result.detail = format!("insert after recovery failed: {e}"),
            (None, Ok(_)) => result.passed = true,
        }
        Ok(result)
    }

    /// Every plan of the dry run, plus torn-tail variants of one mid-write
    /// crash per log kind. Calls `each` as results arrive.
    pub fn run(&self, mut each: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
        let dry = self.dry_run()?;
        let missing: Vec<&str> = FAULT_POINTS
            .iter()
            .copied()
            .filter(|p| dry.total(p) == 0)
            .collect();
        if !missing.is_empty() {
            bail!("the scenario never reaches fault points {missing:?}");
        }
        let mut cases: Vec<(CrashPlan, bool)> =
            dry.plans().into_iter().map(|p| (p, false)).collect();
        for p in [
            "tree-log-append",
            "commit-after-record-flush",
            "tree-apply-delete",
        ] {
            let total = dry.total(p);
            if let Some(plan) = dry.plan(p, total.div_ceil(3).max(1)) {
                cases.push((plan, true));
            }
        }
        let mut out = Vec::with_capacity(cases.len());
        for (plan, torn) in cases {
            let r = self.run_case(&plan, torn)?;
            each(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Wall time of recovering an index at `dir`, which should hold a crashed
/// process's state.
pub fn time_recovery(dir: &Path) -> Result<(Duration, nvtree::txn::recovery::RecoveryReport)> {
    let start = Instant::now();
    let index = EnsembleIndex::open(dir)?;
    let elapsed = start.elapsed();
    let report = index.recovery_report().cloned().unwrap_or_default();
    index.close()?;
    Ok((elapsed, report))
}

/// Reads a scenario written by [`CrashMatrix::new`].
pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}
