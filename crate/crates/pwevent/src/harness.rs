//! Experiment runner: configuration, requirement assignment, trial
//! orchestration, seeding, and result emission.
//!
//! A run is a grid over (budget, window, ratio) crossed with repeats. Each
//! trial owns an RNG sub-stream keyed by (base seed, grid index, repeat),
//! so serial and parallel executions produce byte-identical output; trials
//! are therefore free to run concurrently, capped by `PWEVENT_THREADS`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, CsvSchema};
use crate::dynamic::{dpba_step, dpbd_step, AbsorptionWindow, DynamicMechanismState};
use crate::evaluation::{
    ajsd, amre, audit_dynamic, audit_fixed, AuditReport, DecisionCounts, RunTrace,
};
use crate::fixed::{pba_step, pbd_step, FixedMechanismState, UniformState};
use crate::ledger::BudgetLedger;
use crate::noise::{NoiseGen, RngSeed};
use crate::types::{DynamicRequirement, FixedRequirement, StreamBatch};
use crate::Error;

/// Environment variable capping trial-level parallelism.
pub const THREADS_ENV: &str = "PWEVENT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    /// Personalized budget distribution.
    Pbd,
    /// Personalized budget absorption.
    Pba,
    /// Dynamic personalized budget distribution.
    Dpbd,
    /// Dynamic personalized budget absorption.
    Dpba,
    /// Homogeneous budget distribution baseline.
    Bd,
    /// Homogeneous budget absorption baseline.
    Ba,
    /// Fresh release at budget E/w every slot.
    Uniform,
}

impl MechanismKind {
    pub fn is_dynamic(self) -> bool {
        matches!(self, MechanismKind::Dpbd | MechanismKind::Dpba)
    }

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Pbd => "pbd",
            MechanismKind::Pba => "pba",
            MechanismKind::Dpbd => "dpbd",
            MechanismKind::Dpba => "dpba",
            MechanismKind::Bd => "bd",
            MechanismKind::Ba => "ba",
            MechanismKind::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "pbd" => Ok(MechanismKind::Pbd),
            "pba" => Ok(MechanismKind::Pba),
            "dpbd" => Ok(MechanismKind::Dpbd),
            "dpba" => Ok(MechanismKind::Dpba),
            "bd" => Ok(MechanismKind::Bd),
            "ba" => Ok(MechanismKind::Ba),
            "uniform" => Ok(MechanismKind::Uniform),
            other => Err(Error::Config(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Where the stream comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Tlns { slots: usize },
    Sin { slots: usize },
    Log { slots: usize },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        slot_width: f64,
    },
}

/// How per-slot requirements evolve for the dynamic mechanisms. Forward
/// requirements derive from each user's assigned personalized pair; the
/// backward requirement stays at the configured constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// Same forward requirement every slot.
    Constant,
    /// The forward requirement alternates each half-period between the
    /// assigned pair and (small window, high budget).
    Periodic { period: u64 },
    /// Explicit per-slot, per-user requirements from a JSON file
    /// (`Vec<Vec<DynamicRequirement>>`, outer index = slot).
    ScriptedFile { path: PathBuf },
}

/// Two-point personalized requirement domains: a `ratio` fraction of users
/// takes the (low budget, small window) pair, the rest the (high budget,
/// large window) pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RequirementDomains {
    pub low_budget: f64,
    pub high_budget: f64,
    pub small_window: u64,
    pub large_window: u64,
}

/// How personalized requirements are drawn from the swept (budget, window)
/// grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainAssignment {
    /// `round(ratio * n)` users take (small window, low budget), the rest
    /// (large window, high budget).
    TwoPoint,
    /// Each user draws uniformly from the level grids restricted to
    /// budgets at or above the swept budget and windows at or below the
    /// swept window, so the sweep moves the whole population's floor.
    GridRange { budget_levels: Vec<f64>, window_levels: Vec<u64> },
}

/// Uniform per-user draws from the restricted level grids.
pub fn assign_requirements_grid(
    n: usize,
    budget_levels: &[f64],
    window_levels: &[u64],
    min_budget: f64,
    max_window: u64,
    seed: RngSeed,
) -> Vec<FixedRequirement> {
    let budgets: Vec<f64> =
        budget_levels.iter().copied().filter(|b| *b >= min_budget - 1e-12).collect();
    let windows: Vec<u64> = window_levels.iter().copied().filter(|w| *w <= max_window).collect();
    assert!(!budgets.is_empty() && !windows.is_empty(), "restricted level grids are empty");
    let mut rng = seed.rng();
    use rand::Rng;
    (0..n)
        .map(|_| {
            let b = budgets[rng.gen_range(0..budgets.len())];
            let w = windows[rng.gen_range(0..windows.len())];
            FixedRequirement::new(w, b).expect("levels are valid")
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Users for synthetic datasets (ignored for CSV input).
    pub users: usize,
    pub mechanism: MechanismKind,
    /// Grid over the low personalized budget (also the shared budget for
    /// the homogeneous baselines).
    pub budgets: Vec<f64>,
    /// Grid over the large personalized window (also the shared window for
    /// the homogeneous baselines).
    pub windows: Vec<u64>,
    /// Grid over the low-pair user fraction.
    pub ratios: Vec<f64>,
    /// Fixed counterparts of the swept values.
    pub high_budget: f64,
    pub small_window: u64,
    /// Backward requirement for dynamic mechanisms; large budget and unit
    /// window leave decisions to the forward constraints.
    pub backward_window: u64,
    pub backward_budget: f64,
    pub domain_assignment: DomainAssignment,
    pub schedule: ScheduleSpec,
    pub absorption_window: AbsorptionWindow,
    pub repeats: usize,
    pub seed: u64,
    /// JSONL output path; a `.summary.csv` sibling is written next to it.
    pub out: Option<PathBuf>,
    /// Directory to dump per-trial traces into, for later re-auditing.
    pub dump_traces: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.budgets.is_empty() || self.windows.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("budget/window/ratio grids must be nonempty".into()));
        }
        if self.repeats < 1 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.users < 1
            && !matches!(self.dataset, DatasetSpec::Csv { .. }) {
                return Err(Error::Config("users must be >= 1 for synthetic datasets".into()));
            }
        for &b in &self.budgets {
            if b.is_nan() || b <= 0.0 {
                return Err(Error::Config("budgets must be > 0".into()));
            }
        }
        for &r in &self.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config("ratios must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Sin { slots: 2000 },
            users: 1000,
            mechanism: MechanismKind::Pbd,
            budgets: vec![0.6],
            windows: vec![120],
            ratios: vec![0.5],
            high_budget: 1.0,
            small_window: 40,
            backward_window: 1,
            backward_budget: 10.0,
            domain_assignment: DomainAssignment::TwoPoint,
            schedule: ScheduleSpec::Constant,
            absorption_window: AbsorptionWindow::DeclaredCover,
            repeats: 10,
            seed: 42,
            out: None,
            dump_traces: None,
        }
    }
}

/// Deterministically splits users into the low and high pairs: exactly
/// `round(ratio * n)` users take (small window, low budget).
pub fn assign_requirements(
    n: usize,
    domains: &RequirementDomains,
    ratio: f64,
    seed: RngSeed,
) -> Vec<FixedRequirement> {
    let n_low = (ratio * n as f64).round() as usize;
    let low = FixedRequirement::new(domains.small_window, domains.low_budget)
        .expect("low requirement must be valid");
    let high = FixedRequirement::new(domains.large_window, domains.high_budget)
        .expect("high requirement must be valid");
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut seed.rng());
    let mut reqs = vec![high; n];
    for &i in indices.iter().take(n_low) {
        reqs[i] = low;
    }
    reqs
}

/// Requirements actually used by one trial, kept for re-auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedRequirements {
    Fixed { requirements: Vec<FixedRequirement> },
    Dynamic { history: Vec<Vec<DynamicRequirement>> },
}

/// A complete, re-auditable record of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedTrace {
    pub trace: RunTrace,
    pub requirements: SavedRequirements,
}

impl SavedTrace {
    pub fn audit(&self) -> AuditReport {
        match &self.requirements {
            SavedRequirements::Fixed { requirements } => {
                audit_fixed(&self.trace.ledger, requirements)
            }
            SavedRequirements::Dynamic { history } => audit_dynamic(&self.trace.ledger, history),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One JSONL output record. `wall_ms` is the only nondeterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub mechanism: String,
    pub budget: f64,
    pub window: u64,
    pub ratio: f64,
    pub repeat: usize,
    pub seed: u64,
    pub amre: f64,
    pub ajsd: f64,
    pub audit_ok: bool,
    pub audit_violations: usize,
    pub audit_min_slack: f64,
    pub decisions: DecisionCounts,
    pub wall_ms: f64,
}

/// Aggregated outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<TrialRecord>,
    pub any_violation: bool,
}

struct TrialSetup {
    batches: Vec<StreamBatch>,
    d: usize,
    n_users: usize,
}

fn build_stream(cfg: &ExperimentConfig, data_seed: RngSeed) -> Result<TrialSetup, Error> {
    match &cfg.dataset {
        DatasetSpec::Tlns { slots } => {
            let p = datagen::gen_tlns(*slots, data_seed.child(1).stream_id);
            let batches = realize(&p, cfg.users, data_seed.child(2).stream_id);
            Ok(TrialSetup { batches, d: 2, n_users: cfg.users })
        }
        DatasetSpec::Sin { slots } => {
            let p = datagen::gen_sin(*slots);
            let batches = realize(&p, cfg.users, data_seed.child(2).stream_id);
            Ok(TrialSetup { batches, d: 2, n_users: cfg.users })
        }
        DatasetSpec::Log { slots } => {
            let p = datagen::gen_log(*slots);
            let batches = realize(&p, cfg.users, data_seed.child(2).stream_id);
            Ok(TrialSetup { batches, d: 2, n_users: cfg.users })
        }
        DatasetSpec::Csv { path, schema, slot_width } => {
            let ingested = datagen::ingest_csv(path, schema, *slot_width)?;
            let n_users = ingested.report.n_users;
            Ok(TrialSetup { batches: ingested.batches, d: ingested.d, n_users })
        }
    }
}

fn realize(p: &datagen::ProbabilitySequence, users: usize, seed: u64) -> Vec<StreamBatch> {
    datagen::realize_binary_stream(p, users, seed)
}

/// Builds the per-slot dynamic requirements for one user under a schedule.
fn dynamic_requirement_at(
    cfg: &ExperimentConfig,
    assigned: &FixedRequirement,
    scripted: Option<&Vec<Vec<DynamicRequirement>>>,
    user: usize,
    t: u64,
) -> DynamicRequirement {
    if let Some(script) = scripted {
        return script[(t - 1) as usize][user];
    }
    let forward = match &cfg.schedule {
        ScheduleSpec::Periodic { period } => {
            let half = (*period / 2).max(1);
            if ((t - 1) / half).is_multiple_of(2) {
                (assigned.window, assigned.budget)
            } else {
                (cfg.small_window, cfg.high_budget)
            }
        }
        _ => (assigned.window, assigned.budget),
    };
    DynamicRequirement {
        backward_window: cfg.backward_window,
        backward_budget: cfg.backward_budget,
        forward_window: forward.0,
        forward_budget: forward.1,
    }
}

/// Runs one mechanism over one stream, returning the re-auditable trace.
pub fn run_trial_core(
    cfg: &ExperimentConfig,
    batches: &[StreamBatch],
    d: usize,
    requirements: &[FixedRequirement],
    scripted: Option<&Vec<Vec<DynamicRequirement>>>,
    shared: FixedRequirement,
    noise_seed: RngSeed,
) -> SavedTrace {
    let mut gen = NoiseGen::new(noise_seed);
    let n = requirements.len();
    let mut true_counts = Vec::with_capacity(batches.len());
    let mut releases = Vec::with_capacity(batches.len());
    let mut decisions = Vec::with_capacity(batches.len());

    let (ledger, saved_reqs): (BudgetLedger, SavedRequirements) = match cfg.mechanism {
        MechanismKind::Pbd | MechanismKind::Pba | MechanismKind::Bd | MechanismKind::Ba => {
            let reqs: Vec<FixedRequirement> = match cfg.mechanism {
                MechanismKind::Bd | MechanismKind::Ba => vec![shared; n],
                _ => requirements.to_vec(),
            };
            let mut state = FixedMechanismState::new(reqs.clone(), d);
            for batch in batches {
                let record = match cfg.mechanism {
                    MechanismKind::Pbd | MechanismKind::Bd => {
                        pbd_step(&mut state, batch, None, &mut gen)
                    }
                    _ => pba_step(&mut state, batch, None, &mut gen),
                };
                true_counts.push(batch.histogram(d));
                releases.push(record.release);
                decisions.push(record.decision);
            }
            (state.ledger, SavedRequirements::Fixed { requirements: reqs })
        }
        MechanismKind::Uniform => {
            let mut state = UniformState::new(n, shared, d);
            for batch in batches {
                let record = state.step(batch, &mut gen);
                true_counts.push(batch.histogram(d));
                releases.push(record.release);
                decisions.push(record.decision);
            }
            (state.ledger, SavedRequirements::Fixed { requirements: vec![shared; n] })
        }
        MechanismKind::Dpbd | MechanismKind::Dpba => {
            let mut state =
                DynamicMechanismState::new(n, d).with_absorption_window(cfg.absorption_window);
            for batch in batches {
                let t = batch.slot;
                let declared: Vec<DynamicRequirement> = (0..n)
                    .map(|u| dynamic_requirement_at(cfg, &requirements[u], scripted, u, t))
                    .collect();
                let record = if cfg.mechanism == MechanismKind::Dpbd {
                    dpbd_step(&mut state, batch, &declared, None, &mut gen)
                } else {
                    dpba_step(&mut state, batch, &declared, None, &mut gen)
                };
                true_counts.push(batch.histogram(d));
                releases.push(record.release);
                decisions.push(record.decision);
            }
            (state.ledger, SavedRequirements::Dynamic { history: state.requirement_history })
        }
    };

    SavedTrace {
        trace: RunTrace {
            d,
            true_counts,
            releases,
            decisions,
            ledger,
            mechanism: cfg.mechanism.name().to_string(),
        },
        requirements: saved_reqs,
    }
}

fn run_one_trial(
    cfg: &ExperimentConfig,
    grid_index: usize,
    budget: f64,
    window: u64,
    ratio: f64,
    repeat: usize,
) -> Result<(TrialRecord, SavedTrace), Error> {
    let start = Instant::now();
    let trial_seed =
        RngSeed::new(cfg.seed, 0).child(grid_index as u64 * 1_000_003 + repeat as u64);
    let setup = build_stream(cfg, trial_seed.child(10))?;
    let requirements = match &cfg.domain_assignment {
        DomainAssignment::TwoPoint => {
            let domains = RequirementDomains {
                low_budget: budget,
                high_budget: cfg.high_budget,
                small_window: cfg.small_window,
                large_window: window,
            };
            assign_requirements(setup.n_users, &domains, ratio, trial_seed.child(20))
        }
        DomainAssignment::GridRange { budget_levels, window_levels } => assign_requirements_grid(
            setup.n_users,
            budget_levels,
            window_levels,
            budget,
            window,
            trial_seed.child(20),
        ),
    };
    let shared = FixedRequirement::new(window, budget)
        .map_err(|_| Error::Config("invalid shared requirement".into()))?;

    let scripted = match (&cfg.schedule, cfg.mechanism.is_dynamic()) {
        (ScheduleSpec::ScriptedFile { path }, true) => {
            let text = fs::read_to_string(path)?;
            Some(serde_json::from_str::<Vec<Vec<DynamicRequirement>>>(&text)?)
        }
        _ => None,
    };

    let saved = run_trial_core(
        cfg,
        &setup.batches,
        setup.d,
        &requirements,
        scripted.as_ref(),
        shared,
        trial_seed.child(30),
    );
    let audit = saved.audit();
    let record = TrialRecord {
        mechanism: cfg.mechanism.name().to_string(),
        budget,
        window,
        ratio,
        repeat,
        seed: trial_seed.stream_id,
        amre: amre(&saved.trace),
        ajsd: ajsd(&saved.trace),
        audit_ok: audit.passed(),
        audit_violations: audit.violations.len(),
        audit_min_slack: audit.min_slack,
        decisions: saved.trace.decision_counts(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((record, saved))
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

/// Runs the full grid x repeats, writes JSONL and the CSV summary, and
/// reports whether any trial's audit found a violation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, Error> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut grid_index = 0usize;
    for &budget in &cfg.budgets {
        for &window in &cfg.windows {
            for &ratio in &cfg.ratios {
                for repeat in 0..cfg.repeats {
                    points.push((grid_index, budget, window, ratio, repeat));
                }
                grid_index += 1;
            }
        }
    }

    let run_all = || -> Result<Vec<(TrialRecord, SavedTrace)>, Error> {
        use rayon::prelude::*;
        points
            .par_iter()
            .map(|&(gi, b, w, o, rep)| run_one_trial(cfg, gi, b, w, o, rep))
            .collect()
    };
    let mut results = match thread_cap() {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run_all),
        None => run_all(),
    }?;

    // Parallel collection preserves input order with par_iter + collect,
    // but sort anyway so output layout never depends on the executor.
    results.sort_by(|a, b| {
        let ka = (&a.0.mechanism, a.0.budget, a.0.window, a.0.ratio, a.0.repeat);
        let kb = (&b.0.mechanism, b.0.budget, b.0.window, b.0.ratio, b.0.repeat);
        ka.partial_cmp(&kb).unwrap()
    });

    if let Some(out) = &cfg.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(out)?;
        for (record, _) in &results {
            writeln!(f, "{}", serde_json::to_string(record)?)?;
        }
        write_summary(&summary_path(out), &results.iter().map(|(r, _)| r).collect::<Vec<_>>())?;
    }

    if let Some(dir) = &cfg.dump_traces {
        fs::create_dir_all(dir)?;
        for (record, saved) in &results {
            let name = format!(
                "{}_b{}_w{}_o{}_r{}.trace.json",
                record.mechanism, record.budget, record.window, record.ratio, record.repeat
            );
            fs::write(dir.join(name), serde_json::to_string(saved)?)?;
        }
    }

    let any_violation = results.iter().any(|(r, _)| !r.audit_ok);
    Ok(ExperimentOutcome { records: results.into_iter().map(|(r, _)| r).collect(), any_violation })
}

pub fn summary_path(jsonl: &Path) -> PathBuf {
    let mut name = jsonl.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".summary.csv");
    jsonl.with_file_name(name)
}

fn write_summary(path: &Path, records: &[&TrialRecord]) -> Result<(), Error> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "mechanism",
        "budget",
        "window",
        "ratio",
        "repeats",
        "mean_amre",
        "mean_ajsd",
        "audit_ok",
    ])?;
    let mut i = 0;
    while i < records.len() {
        let key = |r: &TrialRecord| (r.mechanism.clone(), r.budget, r.window, r.ratio);
        let k = key(records[i]);
        let mut j = i;
        let mut amre_sum = 0.0;
        let mut ajsd_sum = 0.0;
        let mut ok = true;
        while j < records.len() && key(records[j]) == k {
            amre_sum += records[j].amre;
            ajsd_sum += records[j].ajsd;
            ok &= records[j].audit_ok;
            j += 1;
        }
        let m = (j - i) as f64;
        writer.write_record([
            k.0.as_str(),
            &k.1.to_string(),
            &k.2.to_string(),
            &k.3.to_string(),
            &(j - i).to_string(),
            &format!("{}", amre_sum / m),
            &format!("{}", ajsd_sum / m),
            &ok.to_string(),
        ])?;
        i = j;
    }
    writer.flush()?;
    Ok(())
}
