//! The experiment commands. Every output is a pure function of the config,
//! so reruns write byte-identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fog_core::dataset::{self, Dataset, MinMaxScaler};
use fog_core::fog::{self, EvalConfig};
use fog_core::forest::{self, BudgetRun, FieldOfGroves};
use fog_core::simarch::{self, SimConfig, SimStats};
use fog_core::CostParams;
use rayon::prelude::*;

use crate::config::{EvalSplit, ExperimentConfig};

/// FoG_opt is the smallest swept threshold whose accuracy is at most this
/// far below FoG_max.
pub const OPT_ACCURACY_TOLERANCE: f64 = 0.005;

pub const SWEEP_HEADER: [&str; 9] = [
    "dataset",
    "n_groves",
    "trees_per_grove",
    "threshold",
    "accuracy",
    "avg_hops",
    "energy_J",
    "latency_cycles",
    "edp",
];

/// Train/validation/test partitions, scaled with train statistics when
/// normalisation is on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub name: String,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub scaler: Option<MinMaxScaler>,
}

impl Prepared {
    pub fn scored(&self, which: EvalSplit) -> &Dataset {
        match which {
            EvalSplit::Validation => &self.validation,
            EvalSplit::Test => &self.test,
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let full = dataset::load_csv(&cfg.dataset, cfg.label_column, cfg.has_header)?;
    let spec = fog_core::SplitSpec {
        seed: cfg.seed,
        ..cfg.split
    };
    let (train, validation, test) = dataset::split(&full, &spec)?;
    let name = cfg
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    if !cfg.normalize {
        return Ok(Prepared {
            name,
            train,
            validation,
            test,
            scaler: None,
        });
    }
    let scaler = MinMaxScaler::fit(&train);
    Ok(Prepared {
        name,
        train: scaler.transform(&train),
        validation: scaler.transform(&validation),
        test: scaler.transform(&test),
        scaler: Some(scaler),
    })
}

/// Trained or loaded model plus the budget trajectory when budgeted.
pub struct Model {
    pub field: FieldOfGroves,
    pub trajectory: Vec<forest::BudgetPoint>,
}

pub fn build_model(cfg: &ExperimentConfig, data: &Prepared, cost: &CostParams) -> Result<Model> {
    if let Some(path) = &cfg.model {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let field = forest::deserialize_field(&text).with_context(|| format!("in {}", path.display()))?;
        if field.n_features() != data.train.n_features() || field.n_labels() != data.train.n_labels() {
            bail!(
                "model {} expects {} features / {} labels, dataset has {} / {}",
                path.display(),
                field.n_features(),
                field.n_labels(),
                data.train.n_features(),
                data.train.n_labels()
            );
        }
        return Ok(Model {
            field,
            trajectory: Vec::new(),
        });
    }
    if let Some(budget) = &cfg.budget {
        let run = BudgetRun {
            n_max: cfg.budget_n_max,
            parallelism: cfg.parallelism,
            seed: cfg.seed,
        };
        let out = forest::budget_rf_train(&data.train, &data.validation, budget, cost, &cfg.tree, &run)?;
        let k = cfg.k.min(out.forest.n_trees());
        return Ok(Model {
            field: forest::split(&out.forest, k)?,
            trajectory: out.trajectory,
        });
    }
    Ok(Model {
        field: forest::gc_train(cfg.n, cfg.k, &data.train, &cfg.tree, cfg.seed)?,
        trajectory: Vec::new(),
    })
}

/// One point of a sweep in the shared CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dataset: String,
    pub n_groves: usize,
    pub trees_per_grove: usize,
    /// `None` for points that ignore the threshold (RF, FoG_max).
    pub threshold: Option<f64>,
    pub accuracy: f64,
    pub avg_hops: f64,
    pub energy_j: f64,
    pub latency_cycles: f64,
    pub edp: f64,
}

impl SweepRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.n_groves.to_string(),
            self.trees_per_grove.to_string(),
            self.threshold.map(|t| t.to_string()).unwrap_or_default(),
            self.accuracy.to_string(),
            self.avg_hops.to_string(),
            self.energy_j.to_string(),
            self.latency_cycles.to_string(),
            self.edp.to_string(),
        ]
    }

    fn from_fields(f: &[&str]) -> Result<Self> {
        if f.len() != SWEEP_HEADER.len() {
            bail!("expected {} fields, got {}", SWEEP_HEADER.len(), f.len());
        }
        Ok(Self {
            dataset: f[0].to_string(),
            n_groves: f[1].parse()?,
            trees_per_grove: f[2].parse()?,
            threshold: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse()?)
            },
            accuracy: f[4].parse()?,
            avg_hops: f[5].parse()?,
            energy_j: f[6].parse()?,
            latency_cycles: f[7].parse()?,
            edp: f[8].parse()?,
        })
    }
}

fn sim_config(cfg: &ExperimentConfig, field: &FieldOfGroves, eval: EvalConfig) -> SimConfig {
    let mut sim = SimConfig::new(field.n_groves(), field.k(), eval);
    sim.parallelism = cfg.parallelism;
    sim.queue_capacity_bytes = cfg.queue_capacity;
    sim.record_events = cfg.record_events;
    sim
}

fn max_hops(cfg: &ExperimentConfig, field: &FieldOfGroves) -> Result<usize> {
    match cfg.max_hops {
        None => Ok(field.n_groves()),
        Some(h) if h <= field.n_groves() => Ok(h),
        Some(h) => bail!("max_hops {h} exceeds the {} groves of the model", field.n_groves()),
    }
}

/// Simulates `inputs` on `field` and summarises the run.
pub fn run_point(
    name: &str,
    inputs: &Dataset,
    field: &FieldOfGroves,
    sim: &SimConfig,
    cost: &CostParams,
) -> Result<(SweepRow, SimStats)> {
    let stats = simarch::simulate(inputs, field, sim, cost)?;
    let row = SweepRow {
        dataset: name.to_string(),
        n_groves: field.n_groves(),
        trees_per_grove: field.k(),
        threshold: sim.eval.early_exit.then_some(sim.eval.thresh),
        accuracy: stats.accuracy(inputs.labels()),
        avg_hops: stats.avg_hops(),
        energy_j: stats.mean_energy_j,
        latency_cycles: stats.mean_latency_cycles,
        edp: stats.edp,
    };
    Ok((row, stats))
}

fn threshold_rows(
    cfg: &ExperimentConfig,
    data: &Prepared,
    field: &FieldOfGroves,
    cost: &CostParams,
) -> Result<Vec<(SweepRow, SimStats)>> {
    let hops = max_hops(cfg, field)?;
    let inputs = data.scored(cfg.eval_split);
    cfg.thresholds
        .par_iter()
        .map(|&t| {
            let sim = sim_config(cfg, field, EvalConfig::new(t, hops, cfg.seed));
            run_point(&data.name, inputs, field, &sim, cost)
        })
        .collect()
}

fn create(dir: &Path, file: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(file);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(f)))
}

fn csv_writer(dir: &Path, file: &str) -> Result<(PathBuf, csv::Writer<File>)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(file);
    let w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, w))
}

pub fn write_sweep(dir: &Path, file: &str, rows: &[SweepRow]) -> Result<PathBuf> {
    let (path, mut w) = csv_writer(dir, file)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SWEEP_HEADER {
        bail!("{}: unexpected header {header:?}", path.display());
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            SweepRow::from_fields(&f).with_context(|| format!("{} row {}", path.display(), i + 1))
        })
        .collect()
}

/// Trains the model and writes `model.fog` and `train_report.csv` (plus
/// `budget_trajectory.csv` in budget mode).
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let model = build_model(cfg, &data, &cost)?;
    let field = &model.field;
    let (model_path, mut f) = create(&cfg.out, "model.fog")?;
    f.write_all(forest::serialize_field(field).as_bytes())?;
    f.flush()?;

    let rf = field.to_forest();
    let val = &data.validation;
    let acc = |pred: &dyn Fn(&[f64]) -> usize| {
        let hits = val.rows().zip(val.labels()).filter(|(x, y)| pred(x) == **y).count();
        hits as f64 / val.n_samples() as f64
    };
    let (report, mut w) = csv_writer(&cfg.out, "train_report.csv")?;
    w.write_record([
        "dataset",
        "n_trees",
        "n_groves",
        "trees_per_grove",
        "normalized",
        "n_train",
        "n_validation",
        "validation_accuracy_soft",
        "validation_accuracy_majority",
    ])?;
    w.write_record([
        data.name.clone(),
        field.n_trees().to_string(),
        field.n_groves().to_string(),
        field.k().to_string(),
        cfg.normalize.to_string(),
        data.train.n_samples().to_string(),
        val.n_samples().to_string(),
        acc(&|x| rf.predict_soft_label(x)).to_string(),
        acc(&|x| rf.predict_majority(x)).to_string(),
    ])?;
    w.flush()?;
    let mut written = vec![model_path, report];

    if !model.trajectory.is_empty() {
        let (path, mut w) = csv_writer(&cfg.out, "budget_trajectory.csv")?;
        w.write_record(["n_trees", "accuracy", "energy_J", "delay_s", "edp", "accepted"])?;
        for p in &model.trajectory {
            w.write_record([
                p.n_trees.to_string(),
                p.accuracy.to_string(),
                p.energy_j.to_string(),
                p.delay_s.to_string(),
                p.edp.to_string(),
                p.accepted.to_string(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Functional evaluation: one row per (threshold, input) in `eval.csv` and
/// one summary row per threshold in `eval_summary.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let field = build_model(cfg, &data, &cost)?.field;
    let hops = max_hops(cfg, &field)?;
    let inputs = data.scored(cfg.eval_split);
    let (detail, mut w) = csv_writer(&cfg.out, "eval.csv")?;
    let (summary, mut s) = csv_writer(&cfg.out, "eval_summary.csv")?;
    let mut header = vec!["threshold", "id", "truth", "label", "confidence", "hops", "start_grove"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..field.n_labels()).map(|i| format!("prob_{i}")));
    w.write_record(&header)?;
    s.write_record(["dataset", "n_groves", "trees_per_grove", "threshold", "accuracy", "avg_hops"])?;
    for &t in &cfg.thresholds {
        let res = fog::gc_eval(inputs, &field, &EvalConfig::new(t, hops, cfg.seed))?;
        for r in &res {
            let mut rec = vec![
                t.to_string(),
                r.input_id.to_string(),
                inputs.label(r.input_id as usize).to_string(),
                r.label.to_string(),
                r.confidence.to_string(),
                r.hops.to_string(),
                r.start_grove.to_string(),
            ];
            rec.extend(r.prob_norm.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        s.write_record([
            data.name.clone(),
            field.n_groves().to_string(),
            field.k().to_string(),
            t.to_string(),
            fog::accuracy(&res, inputs.labels())?.to_string(),
            fog::avg_hops(&res).to_string(),
        ])?;
    }
    w.flush()?;
    s.flush()?;
    Ok(vec![detail, summary])
}

/// Cycle-level simulation: per-input `simulate.csv`, per-threshold
/// `simulate_summary.csv`, the cost parameters used, and optional event
/// logs.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let field = build_model(cfg, &data, &cost)?.field;
    let points = threshold_rows(cfg, &data, &field, &cost)?;
    let inputs = data.scored(cfg.eval_split);

    let (detail, mut w) = csv_writer(&cfg.out, "simulate.csv")?;
    w.write_record([
        "threshold",
        "id",
        "truth",
        "label",
        "hops",
        "start_grove",
        "confidence",
        "energy_J",
        "latency_cycles",
        "turnaround_cycles",
    ])?;
    let (summary, mut s) = csv_writer(&cfg.out, "simulate_summary.csv")?;
    let mut header: Vec<&str> = SWEEP_HEADER.to_vec();
    header.extend(["throughput_per_s", "makespan_cycles", "mean_turnaround_cycles"]);
    s.write_record(&header)?;
    let mut written = vec![detail, summary];
    for (i, (row, stats)) in points.iter().enumerate() {
        let t = row.threshold.expect("swept points carry a threshold").to_string();
        for r in &stats.records {
            w.write_record([
                t.clone(),
                r.id.to_string(),
                inputs.label(r.id as usize).to_string(),
                r.label.to_string(),
                r.hops.to_string(),
                r.start_grove.to_string(),
                r.confidence.to_string(),
                r.energy_j.to_string(),
                r.latency_cycles.to_string(),
                r.turnaround_cycles().to_string(),
            ])?;
        }
        let mut rec = row.fields();
        rec.extend([
            stats.throughput.to_string(),
            stats.makespan_cycles.to_string(),
            stats.mean_turnaround_cycles.to_string(),
        ]);
        s.write_record(&rec)?;
        if cfg.record_events {
            let (path, mut f) = create(&cfg.out, &format!("events_{i}.csv"))?;
            writeln!(f, "cycle,grove,event,id,hops")?;
            for e in &stats.events {
                writeln!(f, "{e}")?;
            }
            f.flush()?;
            written.push(path);
        }
    }
    w.flush()?;
    s.flush()?;
    let (cost_path, mut f) = create(&cfg.out, "cost_params.cfg")?;
    f.write_all(cost.to_kv().as_bytes())?;
    f.flush()?;
    written.push(cost_path);
    Ok(written)
}

/// Trains one field per topology and simulates it at every threshold.
pub fn sweep_topology(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let groups: Vec<Vec<SweepRow>> = cfg
        .topologies
        .par_iter()
        .map(|&(groves, per)| {
            let field = forest::gc_train(groves * per, per, &data.train, &cfg.tree, cfg.seed)?;
            Ok(threshold_rows(cfg, &data, &field, &cost)?
                .into_iter()
                .map(|(row, _)| row)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(groups.into_iter().flatten().collect())
}

pub fn cmd_sweep_topology(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let rows = sweep_topology(cfg)?;
    Ok(vec![write_sweep(&cfg.out, "sweep_topology.csv", &rows)?])
}

/// Fixed topology, one row per threshold; every threshold sees the same
/// start groves.
pub fn sweep_threshold(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let field = build_model(cfg, &data, &cost)?.field;
    Ok(threshold_rows(cfg, &data, &field, &cost)?
        .into_iter()
        .map(|(row, _)| row)
        .collect())
}

pub fn cmd_sweep_threshold(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let rows = sweep_threshold(cfg)?;
    Ok(vec![write_sweep(&cfg.out, "sweep_threshold.csv", &rows)?])
}

/// Everything the report table is derived from, in a fixed order: RF soft
/// vote, RF majority vote, FoG_max, then the threshold sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportPoints {
    pub rf_soft: SweepRow,
    pub rf_majority: SweepRow,
    pub fog_max: SweepRow,
    pub sweep: Vec<SweepRow>,
}

const POINT_KINDS: [&str; 3] = ["rf_soft", "rf_majority", "fog_max"];

pub fn report_points(cfg: &ExperimentConfig) -> Result<ReportPoints> {
    let cost = cfg.cost()?;
    let data = prepare(cfg)?;
    let field = build_model(cfg, &data, &cost)?.field;
    let inputs = data.scored(cfg.eval_split);

    // the whole forest as one grove: every tree on every input
    let rf = field.to_forest();
    let single = forest::split(&rf, rf.n_trees())?;
    let rf_sim = sim_config(cfg, &single, EvalConfig::exhaustive(1, cfg.seed));
    let (mut rf_soft, _) = run_point(&data.name, inputs, &single, &rf_sim, &cost)?;
    let hits = inputs
        .rows()
        .zip(inputs.labels())
        .filter(|(x, y)| rf.predict_majority(x) == **y)
        .count();
    let rf_majority = SweepRow {
        accuracy: hits as f64 / inputs.n_samples() as f64,
        ..rf_soft.clone()
    };
    rf_soft.accuracy = {
        let hits = inputs
            .rows()
            .zip(inputs.labels())
            .filter(|(x, y)| rf.predict_soft_label(x) == **y)
            .count();
        hits as f64 / inputs.n_samples() as f64
    };

    let max_sim = sim_config(cfg, &field, EvalConfig::exhaustive(field.n_groves(), cfg.seed));
    let (fog_max, _) = run_point(&data.name, inputs, &field, &max_sim, &cost)?;
    let sweep = threshold_rows(cfg, &data, &field, &cost)?
        .into_iter()
        .map(|(row, _)| row)
        .collect();
    Ok(ReportPoints {
        rf_soft,
        rf_majority,
        fog_max,
        sweep,
    })
}

pub fn write_points(dir: &Path, points: &ReportPoints) -> Result<PathBuf> {
    let (path, mut w) = csv_writer(dir, "report_points.csv")?;
    let mut header = vec!["point"];
    header.extend(SWEEP_HEADER);
    w.write_record(&header)?;
    let fixed = [&points.rf_soft, &points.rf_majority, &points.fog_max];
    for (kind, row) in POINT_KINDS.iter().zip(fixed) {
        let mut rec = vec![kind.to_string()];
        rec.extend(row.fields());
        w.write_record(&rec)?;
    }
    for row in &points.sweep {
        let mut rec = vec!["sweep".to_string()];
        rec.extend(row.fields());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_points(path: &Path) -> Result<ReportPoints> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut fixed: Vec<Option<SweepRow>> = vec![None; 3];
    let mut sweep = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        let ctx = || format!("{} row {}", path.display(), i + 1);
        let Some((kind, rest)) = f.split_first() else {
            bail!("{}: empty record", ctx());
        };
        let row = SweepRow::from_fields(rest).with_context(ctx)?;
        match POINT_KINDS.iter().position(|k| k == kind) {
            Some(j) => fixed[j] = Some(row),
            None if *kind == "sweep" => sweep.push(row),
            None => bail!("{}: unknown point kind `{kind}`", ctx()),
        }
    }
    let mut take = |j: usize| {
        fixed[j]
            .take()
            .with_context(|| format!("{}: missing `{}` point", path.display(), POINT_KINDS[j]))
    };
    Ok(ReportPoints {
        rf_soft: take(0)?,
        rf_majority: take(1)?,
        fog_max: take(2)?,
        sweep,
    })
}

/// The swept point chosen as FoG_opt: lowest threshold within
/// [`OPT_ACCURACY_TOLERANCE`] of FoG_max, or FoG_max itself when none is.
pub fn select_opt(points: &ReportPoints) -> SweepRow {
    let floor = points.fog_max.accuracy - OPT_ACCURACY_TOLERANCE - 1e-12;
    points
        .sweep
        .iter()
        .filter(|r| r.accuracy >= floor)
        .min_by(|a, b| a.threshold.partial_cmp(&b.threshold).expect("finite thresholds"))
        .cloned()
        .unwrap_or_else(|| points.fog_max.clone())
}

pub const REPORT_HEADER: [&str; 8] = [
    "dataset",
    "model",
    "threshold",
    "accuracy",
    "energy_J",
    "latency_cycles",
    "edp",
    "avg_hops",
];

pub fn write_report(dir: &Path, points: &ReportPoints) -> Result<PathBuf> {
    let opt = select_opt(points);
    let (path, mut w) = csv_writer(dir, "report.csv")?;
    w.write_record(REPORT_HEADER)?;
    let rows = [
        ("rf_soft", &points.rf_soft),
        ("rf_majority", &points.rf_majority),
        ("fog_max", &points.fog_max),
        ("fog_opt", &opt),
    ];
    for (name, r) in rows {
        w.write_record([
            r.dataset.clone(),
            name.to_string(),
            r.threshold.map(|t| t.to_string()).unwrap_or_default(),
            r.accuracy.to_string(),
            r.energy_j.to_string(),
            r.latency_cycles.to_string(),
            r.edp.to_string(),
            r.avg_hops.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let points = report_points(cfg)?;
    let p = write_points(&cfg.out, &points)?;
    let r = write_report(&cfg.out, &points)?;
    Ok(vec![p, r])
}

/// Rebuilds `report.csv` in `out` from a saved `report_points.csv`.
pub fn cmd_report_from(points_csv: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let points = read_points(points_csv)?;
    Ok(vec![write_report(out, &points)?])
}
