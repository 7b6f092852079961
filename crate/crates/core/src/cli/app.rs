//! Argument parsing and subcommand dispatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

use crate::cli::bench::{impute_benchmark, impute_benchmark_moe};
use crate::cli::protocols::{draw_splits, replicate, Protocol, ProtocolOptions};
use crate::cli::tune::{tune, TuneGrid};
use crate::datagen::{anomaly_groups, clustered_groups, draw_moe_truth, draw_truth, SynthSpec, TaskGroup};
use crate::error::{HermitError, Result};
use crate::io::{load_dataset, load_model, read_table, save_model, write_dataset, write_json, write_table, TaskSpec};
use crate::model::{impute, Dataset, MixtureModel};
use crate::moe::{fit_moe, predict_moe, GatingModel};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::robust::{fit_robust, outlier_scores, two_stage, RobustConfig};
use crate::solver::{fit, FitConfig, FitReport};
use crate::taskdiag::{cluster_tasks, concordant_scores, kernel_pca, task_similarity, two_means_split, SimilarityConfig};

#[derive(Debug, Parser)]
#[command(name = "hermit", version, about = "Sparse mixture regression for incomplete mixed-type targets")]
pub struct Cli {
    /// Worker threads for grid cells, replications and per-task fits.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw synthetic train/valid/test splits with their generating model.
    Simulate(SimulateArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Grid search over k and lambda by validation log-likelihood.
    Tune(TuneArgs),
    /// Fill missing targets of a dataset.
    Impute(ModelDataArgs),
    /// Predict every target from features alone.
    Predict(PredictArgs),
    /// Concordant score of every task; low scores flag anomaly tasks.
    ScoreTasks(ModelDataArgs),
    /// Task similarity, kernel-PCA embedding and k-means grouping.
    ClusterTasks(ClusterArgs),
    /// Rank samples by mean-shift magnitude and optionally refit without them.
    DetectOutliers(FitArgs),
    /// Hide part of the observed test targets and score their imputation.
    Evaluate(EvaluateArgs),
    /// Run a named simulation protocol several times and aggregate.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    Lasso,
    Group,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Lasso => PenaltyKind::Entrywise,
            PenaltyArg::Group => PenaltyKind::RowGroup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    LowDim,
    HighDim,
    VaryingK,
    Anomaly,
    Clusters,
    Moe,
    Scaling,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory, created if needed.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "low-dim")]
    pub preset: Preset,
    /// True number of components (varying-k, moe).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Task count for the scaling preset.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "lasso")]
    pub penalty: PenaltyArg,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Exponent on the mixture weights in the penalty.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 50)]
    pub t_out: usize,
    #[arg(long, default_value_t = 200)]
    pub t_in: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SolverArgs {
    fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig::new(self.penalty.into(), self.lambda).with_gamma(self.gamma)
    }

    fn config(&self) -> FitConfig {
        FitConfig { k: self.k, t_out: self.t_out, t_in: self.t_in, seed: self.seed, ..FitConfig::default() }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Fit a mixture of experts with a feature-dependent gate.
    #[arg(long)]
    pub moe: bool,
    /// Gate penalty (with --moe) or mean-shift penalty (with --robust).
    #[arg(long, default_value_t = 0.01)]
    pub lambda2: f64,
    /// Add per-sample mean shifts.
    #[arg(long)]
    pub robust: bool,
    /// Fraction of samples with the largest shifts to drop before refitting.
    #[arg(long, default_value_t = 0.0)]
    pub p_clean: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Comma-separated lambdas; default 30 log-spaced values in [1e-6, 1e3].
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    /// Comma-separated component counts; default 1..=10.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "lasso")]
    pub penalty: Vec<PenaltyArg>,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long)]
    pub moe: bool,
    /// Comma-separated gate penalties tried with --moe.
    #[arg(long, value_delimiter = ',', default_value = "0.001")]
    pub lambda2: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub t_out: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ModelDataArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV whose first d columns are features; further columns are ignored.
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Components of every single-task fit.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Comma-separated lambdas; with --valid the best is chosen per task.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub lambda: Vec<f64>,
    /// Number of task groups for k-means.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 2)]
    pub dims: usize,
    #[arg(long, default_value_t = 50)]
    pub t_out: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub hide_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    /// table1, fig1, table4, table2-scores, table3-clusters, table5-moe or scaling.
    #[arg(long)]
    pub protocol: String,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    #[arg(long, default_value_t = 0.2)]
    pub keep: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub t_out: Option<usize>,
    /// Comma-separated lambdas replacing the protocol's grid.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_column_csv(path: &Path, names: &[&str], columns: &[Vec<f64>]) -> Result<()> {
    let rows = columns.first().map_or(0, Vec::len);
    let table = Array2::from_shape_fn((rows, columns.len()), |(i, j)| columns[j][i]);
    write_table(path, &names.iter().map(|s| s.to_string()).collect::<Vec<_>>(), &table)
}

fn write_trace(out: &Path, report: &FitReport) -> Result<()> {
    let iters: Vec<f64> = (0..report.objective_trace.len()).map(|i| i as f64).collect();
    write_column_csv(&out.join("objective_trace.csv"), &["iteration", "objective"], &[iters, report.objective_trace.clone()])?;
    write_json(&out.join("fit_report.json"), report)
}

fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}{i}")).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(HermitError::InvalidConfig("--jobs must be positive".into()));
        }
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Impute(a) => impute_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::ScoreTasks(a) => score_tasks_cmd(a),
        Command::ClusterTasks(a) => cluster_cmd(a),
        Command::DetectOutliers(a) => outliers_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Replicate(a) => replicate_cmd(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let seed = a.seed;
    let (mut spec, groups): (SynthSpec, Option<Vec<TaskGroup>>) = match a.preset {
        Preset::LowDim => (SynthSpec::low_dim(seed), None),
        Preset::HighDim => (SynthSpec::high_dim(seed), None),
        Preset::VaryingK | Preset::Moe => (SynthSpec::varying_k(a.k.unwrap_or(3), seed), None),
        Preset::Anomaly => (SynthSpec { n: 2000, ..SynthSpec::varying_k(4, seed) }, Some(anomaly_groups())),
        Preset::Clusters => (SynthSpec { n: 2000, ..SynthSpec::varying_k(4, seed) }, Some(clustered_groups())),
        Preset::Scaling => (SynthSpec::scaling(a.d.unwrap_or(32), a.m.unwrap_or(15), seed), None),
    };
    if a.preset == Preset::Moe {
        spec.m_poisson = 0;
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let (Some(d), false) = (a.d, a.preset == Preset::Scaling) {
        spec.d = d;
    }
    if let Some(r) = a.missing_rate {
        spec.missing_rate = r;
    }
    let groups = groups.unwrap_or_else(|| {
        vec![TaskGroup { s: Some(spec.s), pi: spec.pi_true.clone(), ..TaskGroup::new(spec.k_true, spec.m_gaussian, spec.m_bernoulli, spec.m_poisson) }]
    });
    let truth = if a.preset == Preset::Moe { draw_moe_truth(&spec, 4)? } else { draw_truth(&spec, &groups)? };
    let s = draw_splits(&spec, &truth, spec.missing_rate, spec.missing_rate)?;
    let out = &a.out.out;
    prepare(out)?;
    write_dataset(&out.join("train.csv"), &s.train.data)?;
    write_dataset(&out.join("valid.csv"), &s.valid.data)?;
    write_dataset(&out.join("test.csv"), &s.test.data)?;
    write_json(&out.join("tasks.json"), &TaskSpec::of(&s.train.data))?;
    let task_group = s.train.task_groups();
    let doc = json!({
        "spec": spec,
        "groups": groups,
        "task_group": task_group,
        "models": truth.iter().map(|g| crate::io::ModelDoc::new(&g.model(), g.alpha.clone().map(|alpha| GatingModel { alpha }).as_ref())).collect::<Vec<_>>(),
        "train_memberships": s.train.delta,
    });
    write_json(&out.join("truth.json"), &doc)?;
    println!("wrote {} train / {} valid / {} test samples, {} tasks, to {}", s.train.data.n(), s.valid.data.n(), s.test.data.n(), s.train.data.m(), out.display());
    Ok(())
}

fn write_rho(out: &Path, rho: &Array2<f64>) -> Result<()> {
    write_table(&out.join("responsibilities.csv"), &numbered("r", rho.ncols()), rho)
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let data = load_dataset(&a.train, &a.tasks)?;
    let pen = a.solver.penalty();
    let cfg = a.solver.config();
    let out = &a.out.out;
    prepare(out)?;
    if a.moe && a.robust {
        return Err(HermitError::Unsupported("--moe and --robust cannot be combined".into()));
    }
    let (model, gate, rho, report) = if a.moe {
        let f = fit_moe(&data, &pen, a.lambda2, &cfg)?;
        (f.model, Some(f.gate), f.rho, f.report)
    } else if a.robust {
        let rcfg = RobustConfig::new(a.lambda2, cfg).with_p_clean(a.p_clean);
        if a.p_clean > 0.0 {
            let r = two_stage(&data, &pen, &rcfg)?;
            write_column_csv(&out.join("outlier_scores.csv"), &["sample", "score"], &[(0..data.n()).map(|i| i as f64).collect(), r.scores.to_vec()])?;
            let cleaned = data.select_rows(&r.kept);
            let rho = crate::model::responsibilities(&r.model, &cleaned, None)?;
            (r.model, None, rho, r.report)
        } else {
            let (model, rho, report) = fit_robust(&data, &pen, &rcfg)?;
            (model, None, rho, report)
        }
    } else {
        let (model, rho, report) = fit(&data, &pen, &cfg)?;
        (model, None, rho, report)
    };
    save_model(&out.join("model.json"), &model, gate.as_ref())?;
    write_trace(out, &report)?;
    write_rho(out, rho.rho())?;
    println!(
        "objective {:.6} after {} outer iterations ({}); model written to {}",
        report.final_objective(),
        report.n_outer,
        if report.converged { "converged" } else { "iteration cap" },
        out.join("model.json").display()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn tune_cmd(a: TuneArgs) -> Result<()> {
    let spec: TaskSpec = crate::io::read_json(&a.tasks)?;
    let train = crate::io::read_dataset(&a.train, &spec)?;
    let valid = crate::io::read_dataset(&a.valid, &spec)?;
    let mut grid = TuneGrid {
        kinds: a.penalty.iter().map(|&p| p.into()).collect(),
        moe: a.moe,
        lambda2s: a.lambda2.clone(),
        gamma: a.gamma,
        ..TuneGrid::default()
    };
    if !a.lambda.is_empty() {
        grid.lambdas = a.lambda.clone();
    }
    if !a.k.is_empty() {
        grid.ks = a.k.clone();
    }
    let cfg = FitConfig { t_out: a.t_out, seed: a.seed, ..FitConfig::default() };
    let res = tune(&train, &valid, &grid, &cfg)?;
    let out = &a.out.out;
    prepare(out)?;
    save_model(&out.join("model.json"), &res.best.model, res.best.gate.as_ref())?;
    write_trace(out, &res.best.report)?;
    write_json(&out.join("tune_report.json"), &json!({ "best": res.best.cell, "valid_loglik": res.best.valid_loglik, "cells": res.cells }))?;
    let mut w = csv::Writer::from_path(out.join("tune_cells.csv"))?;
    w.write_record(["k", "lambda", "penalty", "lambda2", "valid_loglik", "error"])?;
    for c in &res.cells {
        w.write_record([
            c.cell.k.to_string(),
            c.cell.lambda.to_string(),
            format!("{:?}", c.cell.kind),
            c.cell.lambda2.map_or(String::new(), |v| v.to_string()),
            c.valid_loglik.map_or(String::new(), |v| v.to_string()),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    println!(
        "best cell: k={} lambda={:.3e} penalty={:?} (validation log-likelihood {:.4}) out of {} cells",
        res.best.cell.k,
        res.best.cell.lambda,
        res.best.cell.kind,
        res.best.valid_loglik,
        res.cells.len()
    );
    Ok(())
}

fn load_with_data(a: &ModelDataArgs) -> Result<(MixtureModel, Option<GatingModel>, Dataset)> {
    let (model, gate) = load_model(&a.model)?;
    let data = load_dataset(&a.test, &a.tasks)?;
    if data.d() != model.d() || data.tasks() != model.families() {
        return Err(HermitError::Dimension("dataset features or task families do not match the model".into()));
    }
    Ok((model, gate, data))
}

fn impute_cmd(a: ModelDataArgs) -> Result<()> {
    let (model, gate, data) = load_with_data(&a)?;
    let filled = match gate {
        Some(g) => {
            let rho = crate::moe::moe_responsibilities(&model, &g, &data)?;
            let eta = crate::model::natural_params(&model, data.x().view())?;
            Array2::from_shape_fn((data.n(), data.m()), |(i, j)| {
                (0..model.k()).map(|r| rho.rho()[[i, r]] * model.families()[j].mean_unchecked(eta[[i, j, r]])).sum()
            })
        }
        None => impute(&model, &data)?,
    };
    let mut y = data.y_with_nan();
    let mut count = 0;
    for ((v, &o), &f) in y.iter_mut().zip(data.observed()).zip(&filled) {
        if !o {
            *v = f;
            count += 1;
        }
    }
    let out = &a.out.out;
    prepare(out)?;
    write_table(&out.join("imputed.csv"), &numbered("y", data.m()), &y)?;
    println!("filled {count} missing targets; written to {}", out.join("imputed.csv").display());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (model, gate) = load_model(&a.model)?;
    let (_, table) = read_table(&a.test)?;
    if table.ncols() < model.d() {
        return Err(HermitError::Dimension(format!("{} columns, model needs {} features", table.ncols(), model.d())));
    }
    let x = table.slice(ndarray::s![.., ..model.d()]).to_owned();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HermitError::InvalidData("features must be finite".into()));
    }
    let pred = match gate {
        Some(g) => predict_moe(&model, &g, &x)?,
        None => crate::model::predict_prior_mean(&model, x.view())?,
    };
    let out = &a.out.out;
    prepare(out)?;
    write_table(&out.join("predictions.csv"), &numbered("y", model.m()), &pred)?;
    println!("predicted {} x {} targets; written to {}", pred.nrows(), pred.ncols(), out.join("predictions.csv").display());
    Ok(())
}

fn score_tasks_cmd(a: ModelDataArgs) -> Result<()> {
    let (model, _, data) = load_with_data(&a)?;
    let scores = concordant_scores(&model, &data)?;
    let split = two_means_split(&scores);
    let out = &a.out.out;
    prepare(out)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[x].unwrap_or(f64::NAN).total_cmp(&scores[y].unwrap_or(f64::NAN)));
    let mut w = csv::Writer::from_path(out.join("task_scores.csv"))?;
    w.write_record(["task", "family", "score", "rank"])?;
    for (rank, &j) in order.iter().enumerate() {
        w.write_record([
            j.to_string(),
            data.tasks()[j].kind().as_str().to_owned(),
            scores[j].map_or(String::new(), |v| v.to_string()),
            rank.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &out.join("task_scores.json"),
        &json!({
            "scores": scores,
            "threshold": split.as_ref().map(|s| s.threshold),
            "suggested_anomalies": split.as_ref().map(|s| s.anomalous.clone()),
        }),
    )?;
    match split {
        Some(s) => println!("suggested anomaly tasks (score below {:.4e}): {:?}", s.threshold, s.anomalous),
        None => println!("scores do not split into two groups"),
    }
    Ok(())
}

fn cluster_cmd(a: ClusterArgs) -> Result<()> {
    let spec: TaskSpec = crate::io::read_json(&a.tasks)?;
    let data = crate::io::read_dataset(&a.train, &spec)?;
    let mut cfg = SimilarityConfig::new(a.k, a.lambda[0]);
    cfg.fit = FitConfig { k: a.k, t_out: a.t_out, seed: a.seed, ..FitConfig::default() };
    if let Some(v) = &a.valid {
        cfg.validation = Some(crate::io::read_dataset(v, &spec)?);
        cfg.lambda_grid = a.lambda.clone();
    }
    let sim = task_similarity(&data, &cfg)?;
    let emb = kernel_pca(sim.matrix.view(), a.dims)?;
    let labels = cluster_tasks(emb.view(), a.groups, a.seed)?;
    let out = &a.out.out;
    prepare(out)?;
    write_table(&out.join("similarity.csv"), &numbered("t", data.m()), &sim.matrix)?;
    write_table(&out.join("embedding.csv"), &numbered("pc", a.dims), &emb)?;
    write_json(&out.join("clusters.json"), &json!({ "labels": labels, "lambdas": sim.lambdas, "warnings": sim.warnings }))?;
    for w in &sim.warnings {
        eprintln!("warning: {w}");
    }
    println!("task groups: {labels:?}");
    Ok(())
}

fn outliers_cmd(a: FitArgs) -> Result<()> {
    let data = load_dataset(&a.train, &a.tasks)?;
    let pen = a.solver.penalty();
    let rcfg = RobustConfig::new(a.lambda2, a.solver.config()).with_p_clean(a.p_clean);
    let out = &a.out.out;
    prepare(out)?;
    let (stage1, _, report) = fit_robust(&data, &pen, &rcfg)?;
    let scores = outlier_scores(stage1.zeta().expect("robust fit carries shifts"));
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    write_column_csv(
        &out.join("outlier_scores.csv"),
        &["sample", "score", "rank"],
        &[
            order.iter().map(|&i| i as f64).collect(),
            order.iter().map(|&i| scores[i]).collect(),
            (0..order.len()).map(|r| r as f64).collect(),
        ],
    )?;
    write_trace(out, &report)?;
    if a.p_clean > 0.0 {
        let r = two_stage(&data, &pen, &rcfg)?;
        save_model(&out.join("model.json"), &r.model, None)?;
        write_json(&out.join("removed.json"), &r.removed)?;
        println!("removed {} samples; cleaned model written to {}", r.removed.len(), out.join("model.json").display());
    } else {
        save_model(&out.join("model.json"), &stage1, None)?;
        let top: Vec<usize> = order.iter().take(10).copied().collect();
        println!("largest shifts: {top:?}");
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let (model, gate) = load_model(&a.model)?;
    let data = load_dataset(&a.test, &a.tasks)?;
    let b = match &gate {
        Some(g) => impute_benchmark_moe(&model, g, &data, a.hide_fraction, a.seed)?,
        None => impute_benchmark(&model, &data, a.hide_fraction, a.seed)?,
    };
    let out = &a.out.out;
    prepare(out)?;
    write_json(&out.join("metrics.json"), &b)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
    println!("nMSE {}  aAUC {}  over {} hidden targets", fmt(b.scores.nmse), fmt(b.scores.aauc), b.scored_entries);
    Ok(())
}

fn replicate_cmd(a: ReplicateArgs) -> Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let opts = ProtocolOptions {
        replications: a.replications,
        keep: a.keep,
        seed: a.seed,
        t_out: a.t_out,
        lambdas: (!a.lambda.is_empty()).then(|| a.lambda.clone()),
        lambda2: a.lambda2,
        n: a.n,
        ..ProtocolOptions::default()
    };
    let report = replicate(protocol, &opts)?;
    let out = &a.out.out;
    prepare(out)?;
    write_json(&out.join("replicate.json"), &report)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["method", "metric", "mean", "sd", "count"])?;
    for (method, s) in &report.summary {
        for (metric, v) in &s.metrics {
            w.write_record([method.clone(), metric.clone(), v.mean.to_string(), v.sd.to_string(), v.count.to_string()])?;
            println!("{method:>24}  {metric:<24} {:>12.4} ± {:.4}", v.mean, v.sd);
        }
    }
    w.flush()?;
    Ok(())
}
