//! The benchmark pipeline: for each analytic target, train a single flow
//! and a piecewise mixture several times under width parity, score both
//! with Monte Carlo divergence estimates, and write a machine-readable
//! report plus plot-ready sample dumps.
//!
//! Everything that lands in the report and metadata files is a pure
//! function of the configuration, so repeated invocations produce
//! byte-identical metric files. Wall-clock times go to a separate timing
//! file that makes no such promise.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pwflow::{
    aggregate, derive_seed, kl_divergence, train, ClusterSelection, Error, KlEstimate, MafModel,
    PiecewiseConfig, PiecewiseFlow, Result, Target, TrainingConfig,
};
use rayon::prelude::*;

use crate::report::{write_report, ReportRow, RowStatus};

/// Seed-stream tags. Each stage of a run draws from its own substream so
/// adding a stage never perturbs the others.
const TAG_TARGET: u64 = 0x5447_5431;
const TAG_DATA: u64 = 0x4441_5441;
const TAG_MAF: u64 = 0x4d41_4631;
const TAG_PNF: u64 = 0x504e_4631;
const TAG_KL_MAF: u64 = 0x4b4c_4d31;
const TAG_KL_PNF: u64 = 0x4b4c_5031;
const TAG_DUMP: u64 = 0x4455_4d50;

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub targets: Vec<String>,
    pub runs: usize,
    pub seed: u64,
    /// Training points drawn per target (unit weights).
    pub train_samples: usize,
    /// Model draws per run for the divergence estimate.
    pub kl_samples: usize,
    /// Points per plot-ready dump; 0 skips the dumps.
    pub dump_samples: usize,
    /// Template for both methods; its `seed` field is replaced per run.
    pub training: TrainingConfig,
    pub clusters: ClusterSelection,
    pub hidden: Vec<usize>,
    pub blocks: usize,
    pub threads: Option<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            targets: Target::all().iter().map(|t| t.name().to_string()).collect(),
            runs: 10,
            seed: 0,
            train_samples: 10_000,
            kl_samples: 10_000,
            dump_samples: 10_000,
            // Minibatches keep a 10^4-sample, 10^4-epoch-budget run inside
            // desk-scale wall times without touching the stopping protocol.
            training: TrainingConfig { batch_size: Some(512), ..TrainingConfig::default() },
            clusters: ClusterSelection::Auto { k_min: 2, k_max: 12 },
            hidden: vec![32, 32],
            blocks: pwflow::DEFAULT_BLOCKS,
            threads: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("no targets selected".to_string()));
        }
        for name in &self.targets {
            Target::by_name(name)?;
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".to_string()));
        }
        if self.train_samples < 125 {
            return Err(Error::Config(format!(
                "need at least 125 training samples, got {}",
                self.train_samples
            )));
        }
        if self.kl_samples < 100 {
            return Err(Error::Config(format!(
                "divergence estimates need at least 100 samples, got {}",
                self.kl_samples
            )));
        }
        self.training.validate()
    }
}

/// Aggregated numbers for one method on one target. Present whenever every
/// run trained; the divergence fields are NaN unless every run's estimate
/// was also computable (`kl_runs` holds the ones that were).
#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub kl_mean: f64,
    pub kl_error: f64,
    pub kl_runs: Vec<KlEstimate>,
    /// Raw cost: epochs x samples x parameters, summed over runs and
    /// mixture components.
    pub cost_raw: f64,
    pub epochs: u64,
    /// Most common cluster count across runs (ties to the smaller k).
    pub chosen_k: usize,
    /// Parameters of one fitted model at the modal cluster count.
    pub parameters: usize,
    /// Largest |sum of component parameters - reference| / reference seen.
    pub parity_error: f64,
    pub wall_seconds: f64,
}

pub struct TargetOutcome {
    pub target: String,
    pub maf: Option<MethodSummary>,
    pub pnf: Option<MethodSummary>,
    /// First run's models, kept for normalization checks and sample dumps.
    pub first_maf: Option<MafModel>,
    pub first_pnf: Option<PiecewiseFlow>,
}

pub struct Failure {
    pub target: String,
    pub method: &'static str,
    pub error: Error,
}

pub struct BenchmarkOutcome {
    pub rows: Vec<ReportRow>,
    pub targets: Vec<TargetOutcome>,
    pub failures: Vec<Failure>,
}

/// One run of one method. Training numbers are always valid: a run only
/// vanishes entirely when training itself fails. The divergence estimate
/// is separate because it can legitimately be refused afterwards (a badly
/// bridged single flow drops samples where the target density underflows),
/// and that must not erase the training cost the run already measured.
struct RunRecord {
    kl: Option<KlEstimate>,
    /// Why `kl` is absent, when it is.
    kl_error: Option<Error>,
    cost: f64,
    epochs: u64,
    k: usize,
    parameters: usize,
    parity_error: f64,
    wall_seconds: f64,
    scan: Option<(Vec<usize>, Vec<f64>)>,
    maf: Option<MafModel>,
    pnf: Option<PiecewiseFlow>,
}

fn maf_run(
    cfg: &BenchmarkConfig,
    target: &Target,
    data: &pwflow::WeightedSampleSet,
    run_seed: u64,
) -> Result<RunRecord> {
    let started = Instant::now();
    let seed = derive_seed(run_seed, TAG_MAF);
    let mut model = MafModel::new(target.dim(), &cfg.hidden, cfg.blocks, seed)?;
    let tcfg = TrainingConfig { seed, ..cfg.training.clone() };
    let report = train(&mut model, data, &tcfg)?;
    let (kl, kl_error) =
        match kl_divergence(&model, target, cfg.kl_samples, derive_seed(run_seed, TAG_KL_MAF)) {
            Ok(kl) => (Some(kl), None),
            Err(e) => (None, Some(e)),
        };
    Ok(RunRecord {
        kl,
        kl_error,
        cost: report.epochs_run as f64
            * report.samples_used as f64
            * report.parameter_count as f64,
        epochs: report.epochs_run as u64,
        k: 1,
        parameters: model.parameter_count(),
        parity_error: 0.0,
        wall_seconds: started.elapsed().as_secs_f64(),
        scan: None,
        maf: Some(model),
        pnf: None,
    })
}

fn pnf_run(
    cfg: &BenchmarkConfig,
    target: &Target,
    data: &pwflow::WeightedSampleSet,
    run_seed: u64,
) -> Result<RunRecord> {
    let started = Instant::now();
    let pcfg = PiecewiseConfig {
        training: TrainingConfig { seed: derive_seed(run_seed, TAG_PNF), ..cfg.training.clone() },
        clusters: cfg.clusters,
        hidden: cfg.hidden.clone(),
        blocks: cfg.blocks,
        threads: cfg.threads,
        ..PiecewiseConfig::default()
    };
    let (flow, fit) = PiecewiseFlow::fit(data, &pcfg)?;
    let (kl, kl_error) =
        match kl_divergence(&flow, target, cfg.kl_samples, derive_seed(run_seed, TAG_KL_PNF)) {
            Ok(kl) => (Some(kl), None),
            Err(e) => (None, Some(e)),
        };

    let reference = MafModel::new(target.dim(), &cfg.hidden, cfg.blocks, 0)?.parameter_count();
    let total: usize = flow.components().iter().map(MafModel::parameter_count).sum();
    let parity_error = (total as f64 - reference as f64).abs() / reference as f64;
    Ok(RunRecord {
        kl,
        kl_error,
        cost: pwflow::training_cost(&fit.reports)?,
        epochs: fit.reports.iter().map(|r| r.epochs_run as u64).sum(),
        k: flow.components().len(),
        parameters: total,
        parity_error,
        wall_seconds: started.elapsed().as_secs_f64(),
        scan: fit.scan.clone(),
        maf: None,
        pnf: Some(flow),
    })
}

fn summarize(records: &[RunRecord]) -> Result<MethodSummary> {
    // The aggregated divergence is only honest when every run produced an
    // estimate: refused runs are exactly the worst ones, so a partial mean
    // would flatter the method. Training totals have no such caveat.
    let estimates: Vec<KlEstimate> = records.iter().filter_map(|r| r.kl).collect();
    let (kl_mean, kl_error) = if estimates.len() == records.len() {
        let agg = aggregate(estimates.clone())?;
        (agg.mean, agg.combined_error)
    } else {
        (f64::NAN, f64::NAN)
    };

    // Modal cluster count, smallest k on ties.
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for r in records {
        match counts.iter_mut().find(|(k, _)| *k == r.k) {
            Some((_, c)) => *c += 1,
            None => counts.push((r.k, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen_k = counts[0].0;
    let parameters = records
        .iter()
        .find(|r| r.k == chosen_k)
        .map(|r| r.parameters)
        .expect("modal k came from the records");

    Ok(MethodSummary {
        kl_mean,
        kl_error,
        kl_runs: estimates,
        cost_raw: records.iter().map(|r| r.cost).sum(),
        epochs: records.iter().map(|r| r.epochs).sum(),
        chosen_k,
        parameters,
        parity_error: records.iter().map(|r| r.parity_error).fold(0.0, f64::max),
        wall_seconds: records.iter().map(|r| r.wall_seconds).sum(),
    })
}

fn meta_lines(
    target: &str,
    method: &str,
    run: usize,
    run_seed: u64,
    record: &RunRecord,
    train_samples: usize,
) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    push("target", target.to_string());
    push("method", method.to_string());
    push("run", run.to_string());
    push("seed", run_seed.to_string());
    match (&record.kl, &record.kl_error) {
        (Some(kl), _) => {
            push("status", "ok".to_string());
            push("kl", kl.value.to_string());
            push("mc_error", kl.mc_error.to_string());
            push("kl_samples", kl.n_samples.to_string());
            push("clipped", kl.clipped.to_string());
        }
        (None, err) => {
            push("status", "failed".to_string());
            let msg = err
                .as_ref()
                .map(ToString::to_string)
                .unwrap_or_else(|| "divergence estimate unavailable".to_string());
            push("error", msg);
        }
    }
    push("train_samples", train_samples.to_string());
    push("epochs", record.epochs.to_string());
    push("cost", record.cost.to_string());
    push("chosen_k", record.k.to_string());
    push("parameters", record.parameters.to_string());
    push("parity_error", record.parity_error.to_string());
    if let Some((ks, scores)) = &record.scan {
        let curve: Vec<String> =
            ks.iter().zip(scores).map(|(k, s)| format!("{k}:{s}")).collect();
        push("silhouette_scan", curve.join(","));
    }
    out
}

fn failed_meta_lines(target: &str, method: &str, run: usize, error: &Error) -> String {
    format!("target={target}\nmethod={method}\nrun={run}\nstatus=failed\nerror={error}\n")
}

fn row_from_summary(
    target: &str,
    method: &str,
    s: &MethodSummary,
    cost: f64,
    status: RowStatus,
) -> ReportRow {
    ReportRow {
        target: target.to_string(),
        method: method.to_string(),
        status,
        kl_mean: s.kl_mean,
        kl_error: s.kl_error,
        cost,
        epochs: s.epochs,
        chosen_k: s.chosen_k,
        parameters: s.parameters,
    }
}

fn failed_row(target: &str, method: &str) -> ReportRow {
    ReportRow {
        target: target.to_string(),
        method: method.to_string(),
        status: RowStatus::Failed,
        kl_mean: f64::NAN,
        kl_error: f64::NAN,
        cost: f64::NAN,
        epochs: 0,
        chosen_k: 0,
        parameters: 0,
    }
}

/// Runs the full benchmark and writes `report.tsv`, per-run `.meta` files,
/// sample dumps, and `timing.txt` into `out_dir`.
pub fn run_benchmark(cfg: &BenchmarkConfig, out_dir: &Path) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let all_names: Vec<&'static str> = Target::all().iter().map(|t| t.name()).collect();
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut timing = String::from("target\tmethod\trun\twall_seconds\n");

    for name in &cfg.targets {
        let target = Target::by_name(name)?;
        let index = all_names.iter().position(|n| n == name).expect("validated name") as u64;
        let target_seed = derive_seed(derive_seed(cfg.seed, TAG_TARGET), index);

        // Each run is independent given its seeds, so runs can go wide;
        // results are collected in run order to keep aggregation stable.
        let results: Vec<(u64, Result<RunRecord>, Result<RunRecord>)> = (0..cfg.runs)
            .into_par_iter()
            .map(|r| {
                let run_seed = derive_seed(target_seed, r as u64);
                let data = match target
                    .sample(cfg.train_samples, derive_seed(run_seed, TAG_DATA))
                {
                    Ok(d) => d,
                    Err(e) => {
                        let msg = e.to_string();
                        return (
                            run_seed,
                            Err(Error::Config(msg.clone())),
                            Err(Error::Config(msg)),
                        );
                    }
                };
                let maf = maf_run(cfg, &target, &data, run_seed);
                let pnf = pnf_run(cfg, &target, &data, run_seed);
                (run_seed, maf, pnf)
            })
            .collect();

        let mut maf_records = Vec::new();
        let mut pnf_records = Vec::new();
        let mut first_maf = None;
        let mut first_pnf = None;
        for (r, (run_seed, maf, pnf)) in results.into_iter().enumerate() {
            for (method, outcome, bucket) in [
                ("maf", maf, &mut maf_records),
                ("pnf", pnf, &mut pnf_records),
            ] {
                let meta_path = out_dir.join(format!("{name}.{method}.run{r}.meta"));
                match outcome {
                    Ok(mut record) => {
                        timing.push_str(&format!(
                            "{name}\t{method}\t{r}\t{:.3}\n",
                            record.wall_seconds
                        ));
                        std::fs::write(
                            &meta_path,
                            meta_lines(name, method, r, run_seed, &record, cfg.train_samples),
                        )?;
                        if let Some(error) = record.kl_error.take() {
                            if !failures
                                .iter()
                                .any(|f: &Failure| f.target == *name && f.method == method)
                            {
                                failures.push(Failure { target: name.clone(), method, error });
                            }
                        }
                        if r == 0 {
                            if let Some(m) = record.maf.take() {
                                first_maf = Some(m);
                            }
                            if let Some(p) = record.pnf.take() {
                                first_pnf = Some(p);
                            }
                        }
                        bucket.push(record);
                    }
                    Err(error) => {
                        std::fs::write(&meta_path, failed_meta_lines(name, method, r, &error))?;
                        if !failures
                            .iter()
                            .any(|f: &Failure| f.target == *name && f.method == method)
                        {
                            failures.push(Failure { target: name.clone(), method, error });
                        }
                    }
                }
            }
        }

        // A summary exists once every run trained; the row is only OK when
        // every run's divergence estimate came back too.
        let maf_trained = maf_records.len() == cfg.runs;
        let pnf_trained = pnf_records.len() == cfg.runs;
        let maf_summary = if maf_trained { Some(summarize(&maf_records)?) } else { None };
        let pnf_summary = if pnf_trained { Some(summarize(&pnf_records)?) } else { None };
        let complete = |s: &MethodSummary| s.kl_runs.len() == cfg.runs;

        match &maf_summary {
            Some(s) => {
                let status = if complete(s) { RowStatus::Ok } else { RowStatus::Failed };
                rows.push(row_from_summary(name, "maf", s, 1.0, status));
            }
            None => rows.push(failed_row(name, "maf")),
        }
        match (&pnf_summary, &maf_summary) {
            (Some(p), Some(m)) => {
                let status = if complete(p) { RowStatus::Ok } else { RowStatus::Failed };
                rows.push(row_from_summary(name, "pnf", p, p.cost_raw / m.cost_raw, status));
            }
            (Some(_), None) => {
                // Without the single-flow denominator the normalized cost
                // is undefined; the row is marked failed and explained.
                rows.push(failed_row(name, "pnf"));
                failures.push(Failure {
                    target: name.clone(),
                    method: "pnf",
                    error: Error::Evaluation(
                        "cost normalization needs the single-flow baseline, which failed to train"
                            .to_string(),
                    ),
                });
            }
            (None, _) => rows.push(failed_row(name, "pnf")),
        }

        if cfg.dump_samples > 0 {
            let dump_seed = derive_seed(target_seed, TAG_DUMP);
            if let Some(model) = &first_maf {
                let draws = model.sample(cfg.dump_samples, dump_seed)?;
                draws.save_text(&out_dir.join(format!("{name}.maf.samples.txt")), false)?;
            }
            if let Some(flow) = &first_pnf {
                let draws = flow.sample(cfg.dump_samples, dump_seed)?;
                draws.save_text(&out_dir.join(format!("{name}.pnf.samples.txt")), false)?;
            }
        }

        outcomes.push(TargetOutcome {
            target: name.clone(),
            maf: maf_summary,
            pnf: pnf_summary,
            first_maf,
            first_pnf,
        });
    }

    write_report(&out_dir.join("report.tsv"), &rows)?;
    std::fs::write(out_dir.join("timing.txt"), timing)?;
    Ok(BenchmarkOutcome { rows, targets: outcomes, failures })
}

/// Paths of the deterministic metric files a benchmark writes into
/// `out_dir`: the report and every per-run metadata file, sorted. Sample
/// dumps are deterministic too but large; they are listed separately.
pub fn metric_files(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(out_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name == "report.tsv" || name.ends_with(".meta") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
