//! Experiment configuration: one `key = value` file plus flag overrides.
//!
//! Relative paths in the file resolve against the file's directory; paths
//! given as flags resolve against the working directory. Cost-model keys
//! (`e_compare`, `clock_hz`, ...) may appear inline and take precedence over
//! `cost_config`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use fog_core::config::{self, Entry};
use fog_core::costmodel::COST_KEYS;
use fog_core::dataset::LabelColumn;
use fog_core::forest::{Budget, BudgetMetric, TreeParams};
use fog_core::{CostParams, SplitSpec};

/// Which held-out partition the eval, simulate, sweep and report commands
/// score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub label_column: LabelColumn,
    pub has_header: bool,
    pub normalize: bool,
    pub split: SplitSpec,
    pub tree: TreeParams,
    pub n: usize,
    pub k: usize,
    pub thresholds: Vec<f64>,
    /// `None` means every grove may be visited.
    pub max_hops: Option<usize>,
    /// (n_groves, trees_per_grove) pairs for the topology sweep.
    pub topologies: Vec<(usize, usize)>,
    pub parallelism: usize,
    pub queue_capacity: Option<usize>,
    pub budget: Option<Budget>,
    pub budget_n_max: usize,
    pub cost_config: Option<PathBuf>,
    pub cost_overrides: Vec<Entry>,
    pub seed: u64,
    pub out: PathBuf,
    /// Pre-trained field file; when absent the model is trained from config.
    pub model: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub record_events: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            label_column: LabelColumn::Last,
            has_header: true,
            normalize: true,
            split: SplitSpec::default(),
            tree: TreeParams::default(),
            n: 16,
            k: 2,
            thresholds: (1..=9).map(|i| i as f64 / 10.0).collect(),
            max_hops: None,
            topologies: vec![(8, 2), (4, 4)],
            parallelism: 1,
            queue_capacity: None,
            budget: None,
            budget_n_max: 16,
            cost_config: None,
            cost_overrides: Vec::new(),
            seed: 0,
            out: PathBuf::from("out"),
            model: None,
            eval_split: EvalSplit::Test,
            record_events: false,
        }
    }
}

/// Command-line values that replace config-file entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub thresh: Option<String>,
    pub max_hops: Option<usize>,
    pub seed: Option<u64>,
    pub cost_config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| anyhow!("line {}: bad value `{}` for `{}`", e.line, e.value, e.key))
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("line {}: `{}` expects true or false", e.line, e.key),
    }
}

fn auto_or<T: std::str::FromStr>(e: &Entry) -> Result<Option<T>> {
    if e.value == "auto" {
        Ok(None)
    } else {
        parse(e).map(Some)
    }
}

pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad threshold `{}`", t.trim()))
        })
        .collect()
}

pub fn parse_topologies(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            let (g, k) = t
                .split_once('x')
                .ok_or_else(|| anyhow!("topology `{t}` is not of the form GROVESxTREES"))?;
            Ok((
                g.parse().map_err(|_| anyhow!("bad grove count in `{t}`"))?,
                k.parse().map_err(|_| anyhow!("bad trees per grove in `{t}`"))?,
            ))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let entries = config::read_kv(path)?;
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.apply_entries(&entries, base)
                .with_context(|| format!("in {}", path.display()))?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_entries(&mut self, entries: &[Entry], base: &Path) -> Result<()> {
        let mut split_text = None;
        let mut metric = None;
        let mut limit = None;
        for e in entries {
            match e.key.as_str() {
                "dataset" => self.dataset = base.join(&e.value),
                "label_column" => {
                    self.label_column = if e.value == "last" {
                        LabelColumn::Last
                    } else {
                        LabelColumn::Index(parse(e)?)
                    }
                }
                "has_header" => self.has_header = parse_bool(e)?,
                "normalize" => self.normalize = parse_bool(e)?,
                "split" => split_text = Some(e.value.clone()),
                "seed" => self.seed = parse(e)?,
                "n" => self.n = parse(e)?,
                "k" => self.k = parse(e)?,
                "thresh" => self.thresholds = parse_thresholds(&e.value)?,
                "max_hops" => self.max_hops = auto_or(e)?,
                "topologies" => self.topologies = parse_topologies(&e.value)?,
                "max_depth" => self.tree.cart.max_depth = parse(e)?,
                "min_leaf" => self.tree.cart.min_leaf = parse(e)?,
                "features_per_tree" => self.tree.features_per_tree = auto_or(e)?,
                "bootstrap" => self.tree.bootstrap = parse_bool(e)?,
                "parallelism" => self.parallelism = parse(e)?,
                "queue_capacity" => self.queue_capacity = auto_or(e)?,
                "budget_metric" => {
                    metric = match e.value.as_str() {
                        "none" => None,
                        _ => Some(e.value.parse::<BudgetMetric>()?),
                    }
                }
                "budget_limit" => limit = Some(parse::<f64>(e)?),
                "budget_n_max" => self.budget_n_max = parse(e)?,
                "cost_config" => self.cost_config = Some(base.join(&e.value)),
                "out" => self.out = base.join(&e.value),
                "model" => self.model = Some(base.join(&e.value)),
                "eval_split" => {
                    self.eval_split = match e.value.as_str() {
                        "test" => EvalSplit::Test,
                        "validation" => EvalSplit::Validation,
                        _ => bail!("line {}: eval_split must be test or validation", e.line),
                    }
                }
                "record_events" => self.record_events = parse_bool(e)?,
                k if COST_KEYS.contains(&k) => self.cost_overrides.push(e.clone()),
                k => bail!("line {}: unknown key `{k}`", e.line),
            }
        }
        if let Some(text) = split_text {
            let parts = parse_thresholds(&text).context("split")?;
            let [train, validation, test] = parts[..] else {
                bail!("split needs three fractions, got `{text}`");
            };
            self.split.train_fraction = train;
            self.split.validation_fraction = validation;
            self.split.test_fraction = test;
        }
        self.budget = match (metric, limit) {
            (Some(metric), Some(limit)) => Some(Budget { metric, limit }),
            (Some(_), None) => bail!("budget_metric set without budget_limit"),
            (None, Some(_)) => bail!("budget_limit set without budget_metric"),
            (None, None) => None,
        };
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.dataset {
            self.dataset = d.clone();
        }
        if let Some(n) = o.n {
            self.n = n;
        }
        if let Some(k) = o.k {
            self.k = k;
        }
        if let Some(t) = &o.thresh {
            self.thresholds = parse_thresholds(t)?;
        }
        if let Some(h) = o.max_hops {
            self.max_hops = Some(h);
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = &o.cost_config {
            self.cost_config = Some(c.clone());
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            bail!("no dataset given (set `dataset` or pass --dataset)");
        }
        if !self.dataset.is_file() {
            bail!("dataset {} does not exist", self.dataset.display());
        }
        if let Some(c) = &self.cost_config {
            if !c.is_file() {
                bail!("cost config {} does not exist", c.display());
            }
        }
        if let Some(m) = &self.model {
            if !m.is_file() {
                bail!("model {} does not exist", m.display());
            }
        }
        self.split.validate()?;
        if self.n == 0 || self.k == 0 || self.k > self.n {
            bail!("need n >= 1 and 1 <= k <= n, got n={}, k={}", self.n, self.k);
        }
        if self.thresholds.is_empty() {
            bail!("threshold list is empty");
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            bail!("threshold {t} outside (0,1)");
        }
        if self.topologies.is_empty() {
            bail!("topology list is empty");
        }
        if self.topologies.iter().any(|&(g, k)| g == 0 || k == 0) {
            bail!("topologies need at least one grove of at least one tree");
        }
        if self.max_hops == Some(0) {
            bail!("max_hops must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.budget_n_max == 0 {
            bail!("budget_n_max must be at least 1");
        }
        self.cost()?;
        Ok(())
    }

    pub fn cost(&self) -> Result<CostParams> {
        let mut entries = match &self.cost_config {
            Some(p) => config::read_kv(p)?,
            None => Vec::new(),
        };
        entries.extend(self.cost_overrides.iter().cloned());
        Ok(CostParams::from_entries(&entries).map_err(|e| match &self.cost_config {
            Some(p) => anyhow!("{}: {e}", p.display()),
            None => anyhow!(e),
        })?)
    }
}
