//! The experiment pipeline behind `mtlcm run`.
//!
//! Per seed: generate or ingest the dataset, train the stage-1 regression
//! network, extract features, train the stage-2 causal model, evaluate,
//! and write `seed_{s}/mtrn.json`, `seed_{s}/mtlcm.json` and
//! `report_{s}.json`. One row per seed is appended to `results.csv`; real
//! datasets additionally get a cross-seed pairwise MCC row. Artifacts
//! carry no timestamps, so reruns with equal configs are bit-identical.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};

use crate::datagen::{self, TaskGroundTruth};
use crate::dataset::{Dataset, FeatureData};
use crate::error::{Error, Result};
use crate::ingest;
use crate::metrics::{
    self, append_results_row, DataSummary, EvalReport, ResultsRow, StageOneSummary,
    StageTwoSummary,
};
use crate::mtlcm::{self, MccProbe, TrainOptions};
use crate::mtrn;
use crate::numerics::SeededRng;
use crate::ArtifactMeta;

use super::config::ExperimentConfig;

/// Marker file identifying a directory as ours; `--force` refuses to wipe
/// directories without it.
const RUN_MARKER: &str = ".mtlcm-run";
/// Written next to partial artifacts when a run fails.
const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub threads: Option<usize>,
    pub output_override: Option<PathBuf>,
    /// Replaces the config's seed list when non-empty.
    pub seeds_override: Vec<u64>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub reports: Vec<EvalReport>,
    /// (mean, std) over seed pairs; real data only.
    pub pairwise: Option<(f64, f64)>,
}

struct SeedOutput {
    report: EvalReport,
    /// Recovered latents for the shared rows (kept for pairwise MCC).
    recovered: Option<DMatrix<f64>>,
}

pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let mut config = ExperimentConfig::from_path(config_path)?;
    if !opts.seeds_override.is_empty() {
        config.seeds = opts.seeds_override.clone();
    }
    run_config(&config, opts)
}

pub fn run_config(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let output_dir = resolve_output_dir(config, opts);
    prepare_output_dir(&output_dir, opts.force)?;
    let config_hash = config.hash();
    let threads = resolve_threads(opts.threads);

    let outcomes = execute_seeds(config, &config_hash, &output_dir, threads);

    // Surface the first failure (in seed order), keeping partial artifacts.
    for (seed, outcome) in config.seeds.iter().zip(outcomes.iter()) {
        if let Err(e) = outcome {
            let message = format!("seed {seed}: {e}\n");
            let _ = std::fs::write(output_dir.join(FAILED_MARKER), &message);
            return Err(Error::Data(format!(
                "run failed ({}); partial artifacts in {}",
                message.trim_end(),
                output_dir.display()
            )));
        }
    }
    let outputs: Vec<SeedOutput> = outcomes
        .into_iter()
        .map(|o| o.expect("failures already handled"))
        .collect();

    let results_path = output_dir.join("results.csv");
    for output in &outputs {
        append_results_row(&results_path, &report_row(&output.report))?;
    }

    let is_real = config.real_data.is_some();
    let mut pairwise = None;
    if is_real && outputs.len() >= 2 {
        let latents: Vec<DMatrix<f64>> = outputs
            .iter()
            .filter_map(|o| o.recovered.clone())
            .collect();
        let (mean, std) = metrics::mcc_pairwise(&latents)?;
        pairwise = Some((mean, std));
        let mut row = report_row(&outputs[0].report);
        row.run_id = "pairwise".into();
        row.seed = 0;
        row.weak_mcc = String::new();
        row.strong_mcc = String::new();
        row.indicator_accuracy = String::new();
        row.variability_invertible = String::new();
        row.mtrn_final_loss = String::new();
        row.mtlcm_objective = String::new();
        row.mtrn_checkpoint_sha256 = String::new();
        row.mtlcm_checkpoint_sha256 = String::new();
        row.pairwise_mcc_mean = format!("{mean}");
        row.pairwise_mcc_std = format!("{std}");
        append_results_row(&results_path, &row)?;
    }

    Ok(RunSummary {
        output_dir,
        reports: outputs.into_iter().map(|o| o.report).collect(),
        pairwise,
    })
}

fn resolve_output_dir(config: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(dir) = &opts.output_override {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var("MTLCM_OUTPUT_DIR") {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    config.output_dir.clone()
}

fn resolve_threads(cli: Option<usize>) -> usize {
    cli.or_else(|| {
        std::env::var("MTLCM_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

/// Refuses to reuse a non-empty directory without `--force`, and refuses
/// `--force` on directories we did not create.
fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Usage(format!(
                "output directory {} exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if !dir.join(RUN_MARKER).exists() {
            return Err(Error::Usage(format!(
                "refusing --force: {} was not produced by a previous run (missing {RUN_MARKER})",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_MARKER), "")?;
    Ok(())
}

fn execute_seeds(
    config: &ExperimentConfig,
    config_hash: &str,
    output_dir: &Path,
    threads: usize,
) -> Vec<Result<SeedOutput>> {
    let seeds = &config.seeds;
    if threads <= 1 || seeds.len() <= 1 {
        return seeds
            .iter()
            .map(|&s| run_one_seed(config, s, config_hash, output_dir))
            .collect();
    }
    let results: Mutex<Vec<Option<Result<SeedOutput>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next: Mutex<usize> = Mutex::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.min(seeds.len()) {
            scope.spawn(|| loop {
                let idx = {
                    let mut guard = next.lock().unwrap();
                    let idx = *guard;
                    if idx >= seeds.len() {
                        break;
                    }
                    *guard += 1;
                    idx
                };
                let outcome = run_one_seed(config, seeds[idx], config_hash, output_dir);
                results.lock().unwrap()[idx] = Some(outcome);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every seed was processed"))
        .collect()
}

fn run_one_seed(
    config: &ExperimentConfig,
    seed: u64,
    config_hash: &str,
    output_dir: &Path,
) -> Result<SeedOutput> {
    let root = SeededRng::new(seed);
    let seed_dir = output_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    let meta = ArtifactMeta { seed, config_hash: config_hash.into(), code_version: env!("CARGO_PKG_VERSION").into() };

    // --- Data -----------------------------------------------------------
    let (dataset, truths) = build_dataset(config, &root)?;
    let (dataset, x_standardized) = if config.mtrn.standardize_features && !dataset.meta.features_standardized {
        (standardize_dataset_columns(&dataset), true)
    } else {
        let std_already = dataset.meta.features_standardized;
        (dataset, std_already)
    };
    let z_star = stacked_latents(&dataset);

    // --- Stage 1 ----------------------------------------------------------
    let spec = config.mtrn.extractor_spec(dataset.meta.latent_dim)?;
    let mtrn_cfg = config.mtrn.train_config(root.fork(2).seed());
    let (mtrn_params, mtrn_trace) = mtrn::train(&dataset, &spec, &mtrn_cfg)?;
    let head_diag = mtrn::check_head_rank(&mtrn_params);
    let mtrn_path = seed_dir.join("mtrn.json");
    let final_train_loss = mtrn_trace.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
    let final_val_loss = mtrn_trace.epochs.last().and_then(|e| e.val_loss);
    mtrn::save_checkpoint(&mtrn_params, &mtrn_cfg, final_train_loss, &meta, &mtrn_path)?;
    let mtrn_hash = file_sha256(&mtrn_path)?;

    // --- Features ---------------------------------------------------------
    let features = mtrn::extract_features(&mtrn_params, &dataset)?;
    let (features, h_standardized) = if config.mtlcm.standardize_features {
        (standardize_feature_columns(&features), true)
    } else {
        (features, false)
    };
    let h_stacked = features.stacked_h();

    let weak_mcc = match &z_star {
        Some(z) => Some(metrics::mcc_weak(&h_stacked, z)?),
        None => None,
    };

    // --- Stage 2 ----------------------------------------------------------
    let mtlcm_cfg = config.mtlcm.train_config(root.fork(3).seed());
    let (sigma_s, sigma_o) = match config.mtlcm.sigma_grid() {
        Some(grid) => {
            select_sigmas_by_cv(&features, &mtlcm_cfg, &grid, &mut root.fork(5))?
        }
        None => (config.mtlcm.sigma_s, config.mtlcm.sigma_o),
    };
    let opts = TrainOptions {
        fixed_task_vars: None,
        mcc_probe: z_star.as_ref().map(|z| MccProbe { h: h_stacked.clone(), z_ref: z.clone() }),
        trace_every: config.mtlcm.trace_every,
    };
    let (mtlcm_params, mtlcm_trace) =
        mtlcm::train_with_sigmas(&features, &mtlcm_cfg, &opts, sigma_s, sigma_o)?;
    let final_objective = mtlcm::objective(&mtlcm_params, &features)?;
    let mtlcm_path = seed_dir.join("mtlcm.json");
    mtlcm::save_checkpoint(&mtlcm_params, &mtlcm_cfg, final_objective, &meta, &mtlcm_path)?;
    let mtlcm_hash = file_sha256(&mtlcm_path)?;

    // --- Evaluation -------------------------------------------------------
    let recovered = mtlcm::recover_all(&mtlcm_params, &h_stacked)?;
    let (strong_mcc, assignment, per_dim) = match &z_star {
        Some(z) => {
            let (score, assignment) = metrics::mcc_strong(&recovered, z)?;
            let per_dim = metrics::correlations_along(&recovered, z, &assignment)?;
            (Some(score), assignment, per_dim)
        }
        None => (None, Vec::new(), Vec::new()),
    };

    let indicator_accuracy = match &truths {
        Some(truths) if !assignment.is_empty() => {
            let learned = mtlcm::indicators(&mtlcm_params, 0.5);
            let aligned = align_indicators(&learned, &assignment);
            let truth = truth_indicator_matrix(truths);
            Some(metrics::indicator_accuracy(&aligned, &truth)?)
        }
        _ => None,
    };

    let variability = if config.eval.variability {
        compute_variability(config, &truths, &mtlcm_params)?
    } else {
        None
    };

    let gen = dataset.meta.gen.as_ref();
    let report = EvalReport {
        seed,
        config_hash: config_hash.into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        data: DataSummary {
            kind: dataset.meta.kind.clone(),
            latent_dim: mtrn_params.extractor.latent_dim(),
            obs_dim: dataset.obs_dim(),
            n_tasks: dataset.n_tasks(),
            n_per_task: dataset.tasks[0].y.len(),
            n_causal: gen.map(|g| g.n_causal),
            mixing: gen.map(|g| g.mixing.to_string()),
        },
        weak_mcc,
        strong_mcc,
        indicator_accuracy,
        per_dimension_correlations: per_dim,
        assignment,
        variability,
        mtrn: StageOneSummary {
            arch: config.mtrn.arch.clone(),
            final_train_loss,
            final_val_loss,
            epochs: mtrn_trace.epochs.len(),
            head_rank: head_diag.rank,
            head_condition: head_diag.condition,
            x_standardized,
            config: mtrn_cfg,
            checkpoint_sha256: Some(mtrn_hash),
            trace: mtrn_trace,
        },
        mtlcm: StageTwoSummary {
            final_objective,
            steps: mtlcm_trace.steps_ran,
            a_condition: datagen::condition_number(&mtlcm_params.a),
            sigma_s,
            sigma_o,
            h_standardized,
            config: mtlcm_cfg,
            checkpoint_sha256: Some(mtlcm_hash),
            trace: mtlcm_trace,
        },
    };
    report.save(&output_dir.join(format!("report_{seed}.json")))?;

    Ok(SeedOutput {
        report,
        recovered: if config.real_data.is_some() { Some(recovered) } else { None },
    })
}

fn build_dataset(
    config: &ExperimentConfig,
    root: &SeededRng,
) -> Result<(Dataset, Option<Vec<TaskGroundTruth>>)> {
    if let Some(gen) = &config.generator {
        let mut gen = gen.clone();
        gen.seed = root.fork(1).seed();
        let (dataset, truths, _) = datagen::generate_dataset(&gen)?;
        Ok((dataset, Some(truths)))
    } else {
        let section = config.real_data.as_ref().expect("validated config has a data section");
        let mut dataset = ingest::load_superconductivity(&section.spec)?;
        if section.subsample_rows.is_some() || section.subsample_tasks.is_some() {
            let n_rows = section.subsample_rows.unwrap_or(dataset.tasks[0].y.len());
            let n_tasks = section.subsample_tasks.unwrap_or(dataset.n_tasks());
            dataset = ingest::subsample(&dataset, n_rows, n_tasks, &mut root.fork(4))?;
        }
        Ok((dataset, None))
    }
}

/// Ground-truth latents stacked in task order (synthetic data only).
fn stacked_latents(dataset: &Dataset) -> Option<DMatrix<f64>> {
    let d = dataset.tasks[0].z_star.as_ref()?.ncols();
    let n: usize = dataset.tasks.iter().map(|t| t.y.len()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut row = 0;
    for task in &dataset.tasks {
        let z = task.z_star.as_ref()?;
        out.rows_mut(row, z.nrows()).copy_from(z);
        row += z.nrows();
    }
    Some(out)
}

/// Standardizes every observation column to zero mean and unit variance,
/// pooling rows across tasks (the mixing is shared, so per-task scaling
/// would distort it).
fn standardize_dataset_columns(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    let obs = dataset.obs_dim();
    let stats = column_stats(
        (0..dataset.n_tasks()).map(|t| dataset.x_for(t)),
        obs,
    );
    if let Some(shared) = &mut out.shared_design {
        apply_column_stats(shared, &stats);
    }
    for task in &mut out.tasks {
        if let Some(x) = &mut task.x {
            apply_column_stats(x, &stats);
        }
    }
    out.meta.features_standardized = true;
    out.meta.feature_stats = Some(stats);
    out
}

fn standardize_feature_columns(features: &FeatureData) -> FeatureData {
    let mut out = features.clone();
    let d = features.latent_dim();
    let stats = column_stats(
        (0..features.n_tasks()).map(|t| features.h_for(t)),
        d,
    );
    if let Some(shared) = &mut out.shared_h {
        apply_column_stats(shared, &stats);
    } else {
        for task in &mut out.tasks {
            if let Some(h) = &mut task.h {
                apply_column_stats(h, &stats);
            }
        }
    }
    out
}

fn column_stats<'a>(
    matrices: impl Iterator<Item = &'a DMatrix<f64>> + Clone,
    n_cols: usize,
) -> Vec<(f64, f64)> {
    let mut sums = vec![0.0; n_cols];
    let mut counts = 0usize;
    for m in matrices.clone() {
        for j in 0..n_cols {
            sums[j] += m.column(j).sum();
        }
        counts += m.nrows();
    }
    let means: Vec<f64> = sums.iter().map(|s| s / counts as f64).collect();
    let mut sq = vec![0.0; n_cols];
    for m in matrices {
        for j in 0..n_cols {
            sq[j] += m.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>();
        }
    }
    means
        .into_iter()
        .zip(sq)
        .map(|(mean, ss)| {
            let var = ss / (counts.max(2) as f64 - 1.0);
            let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
            (mean, scale)
        })
        .collect()
}

fn apply_column_stats(m: &mut DMatrix<f64>, stats: &[(f64, f64)]) {
    for j in 0..m.ncols() {
        let (mean, scale) = stats[j];
        for v in m.column_mut(j).iter_mut() {
            *v = (*v - mean) / scale;
        }
    }
}

/// 90/10 split of every task's rows for the sigma grid cross-validation,
/// then retrains nothing: callers retrain on the full data with the
/// winning pair.
fn select_sigmas_by_cv(
    features: &FeatureData,
    cfg: &crate::mtrn::TrainConfig,
    grid: &[(f64, f64)],
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    use crate::dataset::FeatureTask;
    let mut train_tasks = Vec::new();
    let mut held_tasks = Vec::new();
    for t in 0..features.n_tasks() {
        let h = features.h_for(t);
        let y = &features.tasks[t].y;
        let n = y.len();
        if n < 10 {
            return Err(Error::Config(
                "sigma grid cross-validation needs at least 10 rows per task".into(),
            ));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.fork(t as u64).shuffle(&mut idx);
        let n_held = n / 10;
        let (held_idx, train_idx) = idx.split_at(n_held);
        let pick = |rows: &[usize]| {
            let hm = DMatrix::from_fn(rows.len(), h.ncols(), |r, c| h[(rows[r], c)]);
            let yv = DVector::from_fn(rows.len(), |r, _| y[rows[r]]);
            FeatureTask { h: Some(hm), y: yv }
        };
        train_tasks.push(pick(train_idx));
        held_tasks.push(pick(held_idx));
    }
    let train_fd = FeatureData { tasks: train_tasks, shared_h: None };
    let held_fd = FeatureData { tasks: held_tasks, shared_h: None };

    // Shorter budget for the grid sweep; the final fit uses the full one.
    let cv_cfg = crate::mtrn::TrainConfig {
        max_epochs: cfg.max_epochs.min(800),
        patience: cfg.patience.min(800),
        ..cfg.clone()
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for &(s, o) in grid {
        let (params, _) =
            mtlcm::train_with_sigmas(&train_fd, &cv_cfg, &TrainOptions::default(), s, o)?;
        let held = mtlcm::objective(&params, &held_fd)?;
        log::info!("sigma grid: sigma_s={s}, sigma_o={o} -> held-out objective {held:.6}");
        if best.map_or(true, |(b, _, _)| held > b) {
            best = Some((held, s, o));
        }
    }
    let (_, s, o) = best.expect("grid is non-empty");
    Ok((s, o))
}

/// Reorders learned indicator columns onto the reference dimensions using
/// the strong-MCC assignment (`assignment[i]` = reference dim for model
/// dim `i`).
fn align_indicators(learned: &DMatrix<bool>, assignment: &[usize]) -> DMatrix<bool> {
    let mut aligned = DMatrix::from_element(learned.nrows(), learned.ncols(), false);
    for (i, &j) in assignment.iter().enumerate() {
        for t in 0..learned.nrows() {
            aligned[(t, j)] = learned[(t, i)];
        }
    }
    aligned
}

fn truth_indicator_matrix(truths: &[TaskGroundTruth]) -> DMatrix<bool> {
    let d = truths[0].c_star.len();
    DMatrix::from_fn(truths.len(), d, |t, j| truths[t].c_star[j])
}

fn compute_variability(
    config: &ExperimentConfig,
    truths: &Option<Vec<TaskGroundTruth>>,
    params: &mtlcm::MtlcmParams,
) -> Result<Option<mtlcm::VariabilityReport>> {
    let probes = &config.eval.y_probe;
    let points: Vec<mtlcm::PriorMoments> = match truths {
        Some(truths) => {
            let sigma_s = config.generator.as_ref().map(|g| g.sigma_s).unwrap_or(0.1);
            truths
                .iter()
                .flat_map(|truth| {
                    probes.iter().map(move |&y| {
                        mtlcm::moments_from_task_vars(&truth.c_star, &truth.gamma_star, sigma_s, y)
                    })
                })
                .collect()
        }
        None => (0..params.n_tasks())
            .flat_map(|t| probes.iter().map(move |&y| mtlcm::prior_moments(params, t, y, false)))
            .collect(),
    };
    let needed = 2 * params.latent_dim() + 1;
    if points.len() < needed {
        log::warn!(
            "variability diagnostic skipped: {} probe points < {needed} required",
            points.len()
        );
        return Ok(None);
    }
    Ok(Some(mtlcm::variability_check(&points)?))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(ingest::hex_digest(&std::fs::read(path)?))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn report_row(report: &EvalReport) -> ResultsRow {
    ResultsRow {
        run_id: format!("{}-{}", &report.config_hash[..12.min(report.config_hash.len())], report.seed),
        seed: report.seed,
        config_hash: report.config_hash.clone(),
        code_version: report.code_version.clone(),
        data_kind: report.data.kind.clone(),
        latent_dim: report.data.latent_dim,
        obs_dim: report.data.obs_dim,
        n_tasks: report.data.n_tasks,
        n_per_task: report.data.n_per_task,
        n_causal: report.data.n_causal.map(|v| v.to_string()).unwrap_or_default(),
        mixing: report.data.mixing.clone().unwrap_or_default(),
        weak_mcc: fmt_opt(report.weak_mcc),
        strong_mcc: fmt_opt(report.strong_mcc),
        indicator_accuracy: fmt_opt(report.indicator_accuracy),
        variability_invertible: report
            .variability
            .as_ref()
            .map(|v| v.invertible.to_string())
            .unwrap_or_default(),
        mtrn_final_loss: format!("{}", report.mtrn.final_train_loss),
        mtlcm_objective: format!("{}", report.mtlcm.final_objective),
        pairwise_mcc_mean: String::new(),
        pairwise_mcc_std: String::new(),
        mtrn_checkpoint_sha256: report.mtrn.checkpoint_sha256.clone().unwrap_or_default(),
        mtlcm_checkpoint_sha256: report.mtlcm.checkpoint_sha256.clone().unwrap_or_default(),
    }
}

// ---------------------------------------------------------------------------
// generate / ingest-superconduct / plotdata
// ---------------------------------------------------------------------------

/// `mtlcm generate`: writes the dataset described by the config's
/// `[generator]` section to `output`.
pub fn generate(config_path: &Path, output: &Path, force: bool) -> Result<PathBuf> {
    let config = ExperimentConfig::from_path(config_path)?;
    let gen = config
        .generator
        .as_ref()
        .ok_or_else(|| Error::Usage("generate requires a [generator] section".into()))?;
    prepare_dataset_dir(output, force)?;
    let (dataset, _, _) = datagen::generate_dataset(gen)?;
    dataset.save(output)?;
    Ok(output.to_path_buf())
}

/// `mtlcm ingest-superconduct`: parses the two source tables and writes the
/// dataset directory.
pub fn ingest_superconduct(
    spec: &ingest::RealDatasetSpec,
    output: &Path,
    force: bool,
) -> Result<PathBuf> {
    prepare_dataset_dir(output, force)?;
    let dataset = ingest::load_superconductivity(spec)?;
    dataset.save(output)?;
    Ok(output.to_path_buf())
}

fn prepare_dataset_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Usage(format!(
                "output directory {} exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if !dir.join("meta.json").exists() {
            return Err(Error::Usage(format!(
                "refusing --force: {} does not look like a dataset directory",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// `mtlcm plotdata`: long-format convergence curves from saved reports.
pub fn plotdata(report_paths: &[PathBuf], output: &Path) -> Result<()> {
    if report_paths.is_empty() {
        return Err(Error::Usage("plotdata needs at least one report".into()));
    }
    let mut writer = csv::Writer::from_path(output)?;
    writer.write_record(["run_id", "metric", "step", "value"])?;
    for path in report_paths {
        let report = EvalReport::load(path)?;
        let run_id = format!(
            "{}-{}",
            &report.config_hash[..12.min(report.config_hash.len())],
            report.seed
        );
        if report.mtlcm.trace.steps.is_empty() && report.mtrn.trace.epochs.is_empty() {
            return Err(Error::Data(format!(
                "{}: report contains no training traces",
                path.display()
            )));
        }
        for epoch in &report.mtrn.trace.epochs {
            write_point(&mut writer, &run_id, "mtrn_train_loss", epoch.epoch, epoch.train_loss)?;
            if let Some(val) = epoch.val_loss {
                write_point(&mut writer, &run_id, "mtrn_val_loss", epoch.epoch, val)?;
            }
        }
        for step in &report.mtlcm.trace.steps {
            write_point(&mut writer, &run_id, "mtlcm_objective", step.step, step.objective)?;
            if let Some(mcc) = step.strong_mcc {
                write_point(&mut writer, &run_id, "mtlcm_strong_mcc", step.step, mcc)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn write_point<W: std::io::Write>(
    writer: &mut csv::Writer<W>,
    run_id: &str,
    metric: &str,
    step: usize,
    value: f64,
) -> Result<()> {
    writer.write_record([run_id, metric, &step.to_string(), &format!("{value}")])?;
    Ok(())
}
