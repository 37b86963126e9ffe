use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde::Serialize;

use metagent_core::agents::{
    aide_task_description, code_modify, plan_task, verify_inputs, Answers, LlmClient, MemoryStore,
    MockTransport, Plan, TaskMode, TaskSpec, FORWARD_MODEL_NAME,
};
use metagent_core::controller::{forward_train, Action, ForwardTrainConfig, ForwardTrainOutcome};
use metagent_core::domain::{Dataset, Geometry, Spectrum};
use metagent_core::fsutil::write_json_atomic;
use metagent_core::neural_adjoint::{design_report, inverse_design, write_designs_csv, DesignReport, ErrorSummary};
use metagent_core::oracle::{sample_geometry, Oracle, OracleConfig, OracleKind};
use metagent_core::surrogate::{load_bundle, ModelBundle};

use crate::config::EngineConfig;
use crate::report::{
    validate_artifacts, write_distribution, write_trajectory, Distribution, Manifest, Seeds, TargetEval,
    DESIGNS_FILE, DISTRIBUTION_FILE, HISTORY_FILE, MANIFEST_FILE, METRICS_FILE, TRAJECTORY_FILE,
};

/// Held-out geometries come from this index onward in the oracle's sample
/// stream, far past anything a data budget can reach.
pub const HOLDOUT_INDEX_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExperimentKind {
    TargetMse,
    FixedDataset,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ForwardMetrics {
    pub best_metric: Option<f64>,
    pub best_model_id: String,
    pub latest_model_id: Option<String>,
    pub final_k: usize,
    pub events: usize,
    pub growth_events: usize,
    pub target_reached: bool,
    pub stop_reason: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InverseMetrics {
    pub candidates: usize,
    pub best_surrogate_loss: Option<f64>,
    pub resim: Option<ErrorSummary>,
    pub degraded: bool,
    pub error: Option<String>,
    pub seconds: f64,
}

/// Everything a command reports. Written to `metrics.json` whether the
/// command succeeds or not.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub command: String,
    pub status: &'static str,
    pub stage: Option<String>,
    pub error: Option<String>,
    pub plan: Option<Plan>,
    pub mode: Option<TaskMode>,
    pub target_metric: Option<f64>,
    pub shortfall: Option<String>,
    pub forward: Option<ForwardMetrics>,
    pub inverse: Option<InverseMetrics>,
    pub distribution: Option<Distribution>,
    pub simulations: usize,
}

/// Result of a successful command.
#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub metrics: Metrics,
    pub manifest: Manifest,
    pub forward: Option<ForwardTrainOutcome>,
    pub distribution_rows: Vec<TargetEval>,
}

struct Run<'a> {
    cfg: &'a EngineConfig,
    out: PathBuf,
    metrics: Metrics,
    manifest: Manifest,
    forward: Option<ForwardTrainOutcome>,
    rows: Vec<TargetEval>,
}

impl<'a> Run<'a> {
    fn new(command: &str, cfg: &'a EngineConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
        let seeds = Seeds {
            oracle: cfg.oracle.seed,
            recipe: cfg.recipe.seed,
            inverse_design: cfg.na.seed,
        };
        Ok(Self {
            cfg,
            out: cfg.out_dir.clone(),
            metrics: Metrics {
                command: command.into(),
                status: "running",
                ..Metrics::default()
            },
            manifest: Manifest::new(command, seeds, serde_json::to_value(cfg)?),
            forward: None,
            rows: Vec::new(),
        })
    }

    fn stage(&mut self, name: &str) {
        log::info!("stage: {name}");
        self.metrics.stage = Some(name.into());
    }

    /// Writes metrics and manifest, then checks every listed artifact.
    fn finish(mut self, result: Result<()>, oracle_sims: usize) -> Result<RunOutput> {
        self.metrics.simulations = oracle_sims;
        self.manifest.add("metrics", METRICS_FILE);
        let result = result.and_then(|()| {
            self.metrics.status = "ok";
            self.metrics.stage = None;
            write_json_atomic(&self.out.join(MANIFEST_FILE), &self.manifest)?;
            write_json_atomic(&self.out.join(METRICS_FILE), &self.metrics)?;
            validate_artifacts(&self.out, &self.manifest)
        });
        if let Err(e) = result {
            self.metrics.status = "error";
            self.metrics.error = Some(format!("{e:#}"));
            if let Err(w) = write_json_atomic(&self.out.join(METRICS_FILE), &self.metrics) {
                log::error!("could not write metrics: {w}");
            }
            return Err(e);
        }
        Ok(RunOutput {
            out_dir: self.out,
            metrics: self.metrics,
            manifest: self.manifest,
            forward: self.forward,
            distribution_rows: self.rows,
        })
    }
}

/// Builds the LLM client when any agent runs in LLM mode. Without a mock
/// script or endpoint credentials the agents fall back to their
/// deterministic rules.
pub fn build_client(cfg: &EngineConfig) -> Result<Option<LlmClient>> {
    if !cfg.llm.any_llm() {
        return Ok(None);
    }
    let client = match &cfg.llm.mock_script {
        Some(p) => {
            let t = MockTransport::from_script_file(p)
                .with_context(|| format!("loading mock script {}", p.display()))?;
            LlmClient::new(Arc::new(t), cfg.llm.client.clone()).with_sleep(|_: Duration| {})
        }
        None => match LlmClient::from_env(cfg.llm.client.clone()) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("{e}; agents run deterministically");
                return Ok(None);
            }
        },
    };
    let memory = MemoryStore::open(cfg.out_dir.join("memory"))?;
    Ok(Some(client.with_memory(Arc::new(memory), "engine")))
}

fn session(client: &Option<LlmClient>, name: &str) -> Option<LlmClient> {
    client.as_ref().map(|c| c.for_session(name))
}

fn forward_config(cfg: &EngineConfig, task: &TaskSpec, out: &Path) -> ForwardTrainConfig {
    // A synthetic fixed pool is generated up front at its declared size.
    let k0 = match (task.mode, cfg.oracle.kind, cfg.declared_pool_size) {
        (TaskMode::FixedDataset, OracleKind::Synthetic, Some(n)) => n,
        _ => cfg.k0,
    };
    ForwardTrainConfig {
        k0,
        policy: metagent_core::controller::BudgetPolicy {
            target_metric: task.target_metric,
            ..cfg.budgets.clone()
        },
        controller_mode: cfg.llm.controller,
        proposer_mode: cfg.llm.proposer,
        recipe: cfg.recipe.clone(),
        train: cfg.training.options(),
        test_strategy: cfg.training.test_strategy,
        history_path: Some(out.join(HISTORY_FILE)),
        zero_timestamps: false,
    }
}

/// Trains the forward model, exports it and records the trajectory.
fn forward_stage(
    run: &mut Run<'_>,
    task: &TaskSpec,
    fcfg: &ForwardTrainConfig,
    oracle: &Oracle,
    client: Option<&LlmClient>,
) -> Result<()> {
    run.stage("forward_train");
    run.manifest.add("history", HISTORY_FILE);
    let started = Instant::now();
    let outcome = forward_train(task, fcfg, oracle, client)?;
    let best = outcome.bundle.metric;
    let last = outcome.history.last();
    run.metrics.forward = Some(ForwardMetrics {
        best_metric: best,
        best_model_id: outcome.best_model_id.clone(),
        latest_model_id: outcome.latest_model_id.clone(),
        final_k: outcome.final_k,
        events: outcome.history.len(),
        growth_events: outcome.history.events().windows(2).filter(|w| w[1].k > w[0].k).count(),
        target_reached: best.is_some_and(|m| m <= task.target_metric),
        stop_reason: last.filter(|e| e.action == Action::Done).map(|e| e.reason.clone()),
        seconds: started.elapsed().as_secs_f64(),
    });
    if best.is_none_or(|m| m > task.target_metric) {
        let msg = format!(
            "best validation MSE {} did not reach the target {}",
            best.map_or("n/a".into(), |m| format!("{m:.4e}")),
            task.target_metric
        );
        log::warn!("{msg}");
        run.metrics.shortfall = Some(msg);
    }

    run.stage("export");
    write_trajectory(&run.out.join(TRAJECTORY_FILE), &outcome.history)?;
    run.manifest.add("trajectory", TRAJECTORY_FILE);
    code_modify(&outcome.bundle, &run.out)?;
    run.manifest.add("forward_model", FORWARD_MODEL_NAME);
    run.forward = Some(outcome);
    Ok(())
}

fn inverse_stage(run: &mut Run<'_>, target: &Spectrum, bundle: &ModelBundle, oracle: &Oracle) -> Result<DesignReport> {
    run.stage("inverse_design");
    let started = Instant::now();
    let results = inverse_design(target, bundle, oracle.bounds(), &run.cfg.na)?;
    let report = design_report(results, target, oracle, run.cfg.evaluation.top_m);
    if let Some(e) = &report.error {
        log::warn!("re-simulation unavailable, reporting surrogate scores only: {e}");
    }
    write_designs_csv(&run.out.join(DESIGNS_FILE), &report.results)?;
    run.manifest.add("designs", DESIGNS_FILE);
    run.metrics.inverse = Some(InverseMetrics {
        candidates: report.results.len(),
        best_surrogate_loss: report.best_surrogate_loss,
        resim: report.resim,
        degraded: report.degraded,
        error: report.error.clone(),
        seconds: started.elapsed().as_secs_f64(),
    });
    Ok(report)
}

/// Held-out (geometry, spectrum) pairs used as inverse-design targets.
fn held_out_targets(cfg: &EngineConfig, oracle: &Oracle, final_k: usize) -> Result<Vec<(Option<Geometry>, Spectrum)>> {
    let n = cfg.evaluation.n_targets;
    let (d, l) = (cfg.oracle.geometry_dim, cfg.oracle.spectrum_len);
    if let Some(path) = &cfg.evaluation.test_set {
        let data = Dataset::read_csv(path, d, l)?;
        return Ok(data
            .pairs()
            .iter()
            .take(n)
            .map(|p| (Some(p.geometry.clone()), p.spectrum.clone()))
            .collect());
    }
    match cfg.oracle.kind {
        OracleKind::Synthetic => (0..n as u64)
            .map(|j| {
                let g = sample_geometry(cfg.oracle.seed, HOLDOUT_INDEX_BASE + j, oracle.bounds());
                let s = oracle.simulate(&g)?;
                Ok((Some(g), s))
            })
            .collect(),
        OracleKind::FileBacked => {
            // The validation rows of the training pool were never trained on.
            let path = cfg.oracle.path.as_deref().context("oracle.path")?;
            let data = Dataset::read_csv(path, d, l)?.prefix(final_k)?;
            Ok(data
                .validation_indices()
                .into_iter()
                .take(n)
                .map(|i| {
                    let p = &data.pairs()[i];
                    (Some(p.geometry.clone()), p.spectrum.clone())
                })
                .collect())
        }
    }
}

fn distribution_stage(run: &mut Run<'_>, bundle: &ModelBundle, oracle: &Oracle, final_k: usize) -> Result<()> {
    run.stage("evaluation");
    let targets = held_out_targets(run.cfg, oracle, final_k)?;
    let mut rows = Vec::with_capacity(targets.len());
    for (index, (geometry, target)) in targets.iter().enumerate() {
        let forward_mse = geometry
            .as_ref()
            .map(|g| bundle.predict(g).and_then(|p| p.mse(target)))
            .transpose()?;
        let results = inverse_design(target, bundle, oracle.bounds(), &run.cfg.na)?;
        let report = design_report(results, target, oracle, run.cfg.evaluation.top_m);
        rows.push(TargetEval {
            index,
            forward_mse,
            surrogate_loss: report.best_surrogate_loss.unwrap_or(f64::INFINITY),
            resim_mse: report.resim.map(|s| s.best),
        });
        log::debug!("target {index}: {:?}", rows.last());
    }
    let dist = write_distribution(&run.out.join(DISTRIBUTION_FILE), &rows)?;
    run.manifest.add("mse_distribution", DISTRIBUTION_FILE);
    run.metrics.distribution = Some(dist);
    run.rows = rows;
    Ok(())
}

fn experiment_task(cfg: &EngineConfig, kind: ExperimentKind) -> TaskSpec {
    let (d, l) = (cfg.oracle.geometry_dim, cfg.oracle.spectrum_len);
    let mode = match kind {
        ExperimentKind::TargetMse => TaskMode::TargetMse,
        ExperimentKind::FixedDataset => TaskMode::FixedDataset,
    };
    TaskSpec {
        input_dim: d,
        output_dim: l,
        target_metric: cfg.budgets.target_metric,
        target_spectrum_path: None,
        dataset_path: cfg.oracle.path.clone(),
        bundle_path: None,
        mode,
        plan: Plan::ForwardOnly,
        aide_task_description: aide_task_description(d, l, cfg.budgets.target_metric, mode),
    }
}

fn check_declared_pool(cfg: &EngineConfig, oracle: &Oracle) -> Result<()> {
    if let (Some(declared), Some(available)) = (cfg.declared_pool_size, oracle.pool_size()) {
        if available < declared {
            return Err(metagent_core::Error::Capacity {
                requested: declared,
                available,
            }
            .into());
        }
    }
    Ok(())
}

/// Forward training followed by the held-out error distribution.
pub fn experiment(cfg: &EngineConfig, kind: ExperimentKind) -> Result<RunOutput> {
    let name = match kind {
        ExperimentKind::TargetMse => "experiment target-mse",
        ExperimentKind::FixedDataset => "experiment fixed-dataset",
    };
    let mut run = Run::new(name, cfg)?;
    let oracle = Oracle::new(cfg.oracle.clone())?;
    let result = (|| {
        let client = build_client(cfg)?;
        let task = experiment_task(cfg, kind);
        run.metrics.mode = Some(task.mode);
        run.metrics.target_metric = Some(task.target_metric);
        if kind == ExperimentKind::FixedDataset {
            check_declared_pool(cfg, &oracle)?;
        }
        let fcfg = forward_config(cfg, &task, &run.out);
        forward_stage(&mut run, &task, &fcfg, &oracle, session(&client, "forward_train").as_ref())?;
        let (bundle, final_k) = {
            let f = run.forward.as_ref().expect("forward stage ran");
            (f.bundle.clone(), f.final_k)
        };
        distribution_stage(&mut run, &bundle, &oracle, final_k)
    })();
    let sims = oracle.simulation_count();
    run.finish(result, sims)
}

/// Forward training only, in the mode the config's oracle implies.
pub fn forward_only(cfg: &EngineConfig, kind: ExperimentKind) -> Result<RunOutput> {
    let mut run = Run::new("forward-train", cfg)?;
    let oracle = Oracle::new(cfg.oracle.clone())?;
    let result = (|| {
        let client = build_client(cfg)?;
        let task = experiment_task(cfg, kind);
        run.metrics.mode = Some(task.mode);
        run.metrics.target_metric = Some(task.target_metric);
        if kind == ExperimentKind::FixedDataset {
            check_declared_pool(cfg, &oracle)?;
        }
        let fcfg = forward_config(cfg, &task, &run.out);
        forward_stage(&mut run, &task, &fcfg, &oracle, session(&client, "forward_train").as_ref())
    })();
    let sims = oracle.simulation_count();
    run.finish(result, sims)
}

/// Neural Adjoint against an existing bundle.
pub fn inverse(cfg: &EngineConfig, bundle_dir: &Path, target_path: &Path) -> Result<RunOutput> {
    let mut run = Run::new("inverse", cfg)?;
    let oracle = Oracle::new(cfg.oracle.clone())?;
    let result = (|| {
        run.stage("load");
        let bundle = load_bundle(bundle_dir)?;
        if !bundle.is_trained() {
            return Err(metagent_core::Error::NotTrained.into());
        }
        let target = Spectrum::read(target_path)?;
        inverse_stage(&mut run, &target, &bundle, &oracle).map(|_| ())
    })();
    let sims = oracle.simulation_count();
    run.finish(result, sims)
}

/// The full agent pipeline: plan, verify, forward-train, export, invert.
pub fn run(cfg: &EngineConfig, query: &str, answers: &Answers) -> Result<RunOutput> {
    let mut run = Run::new("run", cfg)?;
    let mut oracle = Oracle::new(cfg.oracle.clone())?;
    let result = (|| {
        let client = build_client(cfg)?;
        run.stage("plan");
        let task = plan_task(query, answers, cfg.llm.planner, session(&client, "planner").as_ref())?;
        run.metrics.plan = Some(task.plan);
        run.metrics.mode = Some(task.mode);
        run.metrics.target_metric = Some(task.target_metric);

        run.stage("verify");
        let task = verify_inputs(&task)?;

        if task.mode == TaskMode::FixedDataset {
            if let Some(p) = &task.dataset_path {
                if cfg.oracle.path.as_deref() != Some(p.as_path()) {
                    oracle = Oracle::new(OracleConfig::file_backed(p, task.input_dim, task.output_dim))?;
                }
            }
            check_declared_pool(cfg, &oracle)?;
        }

        let bundle = if task.plan.trains_forward() {
            let fcfg = forward_config(cfg, &task, &run.out);
            forward_stage(&mut run, &task, &fcfg, &oracle, session(&client, "forward_train").as_ref())?;
            run.forward.as_ref().expect("forward stage ran").bundle.clone()
        } else {
            let p = task.bundle_path.as_deref().context("bundle_path")?;
            load_bundle(p)?
        };

        if task.plan.runs_inverse() {
            let path = task.target_spectrum_path.as_deref().context("target_spectrum_path")?;
            let target = Spectrum::read(path)?;
            inverse_stage(&mut run, &target, &bundle, &oracle)?;
        }
        Ok(())
    })();
    let sims = oracle.simulation_count();
    run.finish(result, sims)
}

/// Plans and verifies without training. Returns the verified task.
pub fn check(cfg: &EngineConfig, query: &str, answers: &Answers) -> Result<TaskSpec> {
    let client = build_client(cfg)?;
    let task = plan_task(query, answers, cfg.llm.planner, session(&client, "planner").as_ref())?;
    Ok(verify_inputs(&task)?)
}
