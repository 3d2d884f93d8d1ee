//! Functional field-of-groves evaluation.
//!
//! Each input starts at a pseudo-random grove and walks the ring
//! `start, start+1, ...` (mod `n_groves`). After each grove the running
//! sum of grove distributions is normalised by the number of groves seen;
//! the walk stops as soon as the gap between the two largest normalised
//! probabilities reaches the threshold, or after `max_hops` groves.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::forest::{FieldOfGroves, GrovePrediction};

/// Slack on the confidence test. A normalised running mean carries
/// rounding error (0.4 - 0.30000000000000004 < 0.1), so confidences within
/// this distance below the threshold count as reaching it.
pub const CONFIDENCE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FogError {
    #[error("confidence needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error("result/truth mismatch: {0}")]
    Mismatch(String),
}

/// Anything that can play the role of the grove ring.
pub trait GroveSource: Sync {
    fn n_groves(&self) -> usize;
    fn n_labels(&self) -> usize;
    fn grove_size(&self, index: usize) -> usize;
    /// Mean class distribution of grove `index` for input `x`.
    fn predict(&self, index: usize, x: &[f64]) -> GrovePrediction;
}

impl GroveSource for FieldOfGroves {
    fn n_groves(&self) -> usize {
        FieldOfGroves::n_groves(self)
    }

    fn n_labels(&self) -> usize {
        FieldOfGroves::n_labels(self)
    }

    fn grove_size(&self, index: usize) -> usize {
        self.groves()[index].len()
    }

    fn predict(&self, index: usize, x: &[f64]) -> GrovePrediction {
        self.groves()[index].predict_prob(x)
    }
}

/// Gap between the two largest entries.
pub fn max_diff(prob: &[f64]) -> Result<f64, FogError> {
    if prob.len() < 2 {
        return Err(FogError::TooFewClasses(prob.len()));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in prob {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((first - second).abs())
}

/// Multi-output confidence: the smallest per-output gap.
pub fn max_diff_multi<S: AsRef<[f64]>>(outputs: &[S]) -> Result<f64, FogError> {
    if outputs.is_empty() {
        return Err(FogError::TooFewClasses(0));
    }
    outputs
        .iter()
        .map(|o| max_diff(o.as_ref()))
        .try_fold(f64::INFINITY, |m, d| Ok(m.min(d?)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Stopping threshold in (0, 1).
    pub thresh: f64,
    pub max_hops: usize,
    /// Seeds the per-input start grove.
    pub seed: u64,
    /// When false the threshold is ignored and every input visits
    /// `max_hops` groves: the "threshold at maximum" operating point.
    pub early_exit: bool,
    /// Multi-output layout: consecutive label segments, one per output.
    /// `None` for ordinary single-output classification.
    pub output_sizes: Option<Vec<usize>>,
}

impl EvalConfig {
    pub fn new(thresh: f64, max_hops: usize, seed: u64) -> Self {
        Self {
            thresh,
            max_hops,
            seed,
            early_exit: true,
            output_sizes: None,
        }
    }

    /// Every input visits every grove.
    pub fn exhaustive(n_groves: usize, seed: u64) -> Self {
        Self {
            thresh: 1.0 - f64::EPSILON,
            max_hops: n_groves,
            seed,
            early_exit: false,
            output_sizes: None,
        }
    }

    pub fn validate(&self, n_groves: usize, n_labels: usize) -> Result<(), FogError> {
        if !(self.thresh > 0.0 && self.thresh < 1.0) {
            return Err(FogError::Config(format!(
                "thresh must lie in (0,1), got {}",
                self.thresh
            )));
        }
        if self.max_hops < 1 || self.max_hops > n_groves {
            return Err(FogError::Config(format!(
                "max_hops must lie in 1..={n_groves}, got {}",
                self.max_hops
            )));
        }
        match &self.output_sizes {
            None if n_labels < 2 => Err(FogError::TooFewClasses(n_labels)),
            Some(sizes) if sizes.iter().sum::<usize>() != n_labels => Err(FogError::Config(
                format!("output sizes {sizes:?} do not cover {n_labels} labels"),
            )),
            Some(sizes) if sizes.iter().any(|&s| s < 2) => {
                Err(FogError::TooFewClasses(*sizes.iter().min().unwrap()))
            }
            _ => Ok(()),
        }
    }

    /// Confidence of a normalised distribution under this config's layout.
    pub fn confidence(&self, prob_norm: &[f64]) -> f64 {
        let conf = match &self.output_sizes {
            None => max_diff(prob_norm),
            Some(sizes) => {
                let mut rest = prob_norm;
                let mut parts = Vec::with_capacity(sizes.len());
                for &s in sizes {
                    let (head, tail) = rest.split_at(s);
                    parts.push(head);
                    rest = tail;
                }
                max_diff_multi(&parts)
            }
        };
        conf.expect("validated layout")
    }

    /// Stopping rule after `groves_seen` groves.
    pub fn should_stop(&self, confidence: f64, groves_seen: usize) -> bool {
        groves_seen >= self.max_hops
            || (self.early_exit && confidence >= self.thresh - CONFIDENCE_EPSILON)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub input_id: u64,
    pub prob_norm: Vec<f64>,
    pub label: usize,
    /// Groves consulted.
    pub hops: usize,
    pub start_grove: usize,
    pub confidence: f64,
}

/// Start grove for one input, drawn from a counter-based stream keyed by
/// `(seed, input_id)` so results do not depend on batch order.
pub fn start_grove(seed: u64, input_id: u64, n_groves: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(input_id);
    rng.gen_range(0..n_groves)
}

/// Evaluates one input from a fixed start grove.
pub fn eval_input<S: GroveSource + ?Sized>(
    source: &S,
    input_id: u64,
    x: &[f64],
    start: usize,
    cfg: &EvalConfig,
) -> EvalResult {
    let n_groves = source.n_groves();
    let mut prob = vec![0.0; source.n_labels()];
    let mut prob_norm = prob.clone();
    let mut confidence = 0.0;
    let mut hops = 0;
    for j in 0..cfg.max_hops {
        let index = (start + j) % n_groves;
        let out = source.predict(index, x);
        for (a, p) in prob.iter_mut().zip(&out.prob) {
            *a += p;
        }
        let denom = (j + 1) as f64;
        for (n, a) in prob_norm.iter_mut().zip(&prob) {
            *n = a / denom;
        }
        hops = j + 1;
        confidence = cfg.confidence(&prob_norm);
        if cfg.should_stop(confidence, hops) {
            break;
        }
    }
    EvalResult {
        input_id,
        label: crate::argmax(&prob_norm),
        prob_norm,
        hops,
        start_grove: start,
        confidence,
    }
}

/// Evaluates every row of `inputs`; row `i` has input id `i`.
pub fn gc_eval<S: GroveSource + ?Sized>(
    inputs: &Dataset,
    source: &S,
    cfg: &EvalConfig,
) -> Result<Vec<EvalResult>, FogError> {
    let n = source.n_groves();
    let starts: Vec<usize> = (0..inputs.n_samples() as u64)
        .map(|id| start_grove(cfg.seed, id, n))
        .collect();
    gc_eval_with_starts(inputs, source, cfg, &starts)
}

/// Like [`gc_eval`] with caller-supplied start groves (e.g. replayed from a
/// simulation).
pub fn gc_eval_with_starts<S: GroveSource + ?Sized>(
    inputs: &Dataset,
    source: &S,
    cfg: &EvalConfig,
    starts: &[usize],
) -> Result<Vec<EvalResult>, FogError> {
    let n_groves = source.n_groves();
    if n_groves == 0 {
        return Err(FogError::Config("no groves".into()));
    }
    cfg.validate(n_groves, source.n_labels())?;
    if starts.len() != inputs.n_samples() {
        return Err(FogError::Mismatch(format!(
            "{} start groves for {} inputs",
            starts.len(),
            inputs.n_samples()
        )));
    }
    if let Some(&s) = starts.iter().find(|&&s| s >= n_groves) {
        return Err(FogError::Config(format!("start grove {s} out of range")));
    }
    Ok((0..inputs.n_samples())
        .into_par_iter()
        .map(|i| eval_input(source, i as u64, inputs.row(i), starts[i], cfg))
        .collect())
}

/// Fraction of results whose label matches `truth[input_id]`.
pub fn accuracy(results: &[EvalResult], truth: &[usize]) -> Result<f64, FogError> {
    if results.len() != truth.len() || results.is_empty() {
        return Err(FogError::Mismatch(format!(
            "{} results for {} labels",
            results.len(),
            truth.len()
        )));
    }
    let mut correct = 0;
    for r in results {
        let t = truth.get(r.input_id as usize).ok_or_else(|| {
            FogError::Mismatch(format!("input id {} has no ground truth", r.input_id))
        })?;
        if r.label == *t {
            correct += 1;
        }
    }
    Ok(correct as f64 / results.len() as f64)
}

pub fn avg_hops(results: &[EvalResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().map(|r| r.hops as f64).sum::<f64>() / results.len() as f64
}

/// `id,label,confidence,hops,start_grove,prob_0..prob_{L-1}`
pub fn write_results_csv<W: Write>(results: &[EvalResult], mut w: W) -> io::Result<()> {
    let n_labels = results.first().map_or(0, |r| r.prob_norm.len());
    write!(w, "id,label,confidence,hops,start_grove")?;
    for l in 0..n_labels {
        write!(w, ",prob_{l}")?;
    }
    writeln!(w)?;
    for r in results {
        write!(
            w,
            "{},{},{},{},{}",
            r.input_id, r.label, r.confidence, r.hops, r.start_grove
        )?;
        for p in &r.prob_norm {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Grove `g` always returns `outputs[g]`; visited groves are recorded.
    struct Scripted {
        outputs: Vec<Vec<f64>>,
        visits: Mutex<Vec<usize>>,
    }

    impl Scripted {
        fn new(outputs: Vec<Vec<f64>>) -> Self {
            Self {
                outputs,
                visits: Mutex::new(Vec::new()),
            }
        }
    }

    impl GroveSource for Scripted {
        fn n_groves(&self) -> usize {
            self.outputs.len()
        }
        fn n_labels(&self) -> usize {
            self.outputs[0].len()
        }
        fn grove_size(&self, _: usize) -> usize {
            1
        }
        fn predict(&self, index: usize, _: &[f64]) -> GrovePrediction {
            self.visits.lock().unwrap().push(index);
            GrovePrediction {
                prob: self.outputs[index].clone(),
                tree_comparisons: vec![1],
            }
        }
    }

    fn approx(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn max_diff_examples() {
        assert!(approx(max_diff(&[0.32, 0.35, 0.33]).unwrap(), 0.02));
        assert_eq!(max_diff(&[1.0 / 3.0; 3]).unwrap(), 0.0);
        assert_eq!(max_diff(&[0.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(max_diff(&[0.5]), Err(FogError::TooFewClasses(1)));
        let m = max_diff_multi(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
        assert!(approx(m, 0.2));
        assert!(max_diff_multi(&[vec![0.9, 0.1], vec![1.0]]).is_err());
    }

    #[test]
    fn worked_example() {
        let src = Scripted::new(vec![vec![0.32, 0.35, 0.33], vec![0.28, 0.45, 0.27]]);
        let cfg = EvalConfig::new(0.1, 2, 0);
        let r = eval_input(&src, 0, &[0.0; 5], 0, &cfg);
        assert_eq!((r.label, r.hops), (1, 2));
        for (p, e) in r.prob_norm.iter().zip([0.30, 0.40, 0.30]) {
            assert!((p - e).abs() < 1e-9);
        }
        assert!((r.confidence - 0.1).abs() < 1e-9);
    }

    #[test]
    fn max_hops_caps_walk() {
        let src = Scripted::new(vec![vec![0.5, 0.5]; 4]);
        let cfg = EvalConfig::new(0.9, 1, 3);
        let ds = Dataset::from_rows("d", &vec![vec![0.0]; 20], vec![0; 20], 2).unwrap();
        let res = gc_eval(&ds, &src, &cfg).unwrap();
        assert!(res.iter().all(|r| r.hops == 1));
    }

    #[test]
    fn visits_wrap_without_repeats() {
        let src = Scripted::new(vec![vec![0.5, 0.5]; 5]);
        let cfg = EvalConfig::new(0.9, 5, 0);
        let r = eval_input(&src, 0, &[0.0], 3, &cfg);
        assert_eq!(r.hops, 5);
        assert_eq!(*src.visits.lock().unwrap(), vec![3, 4, 0, 1, 2]);
    }

    #[test]
    fn exhaustive_ignores_confidence() {
        let src = Scripted::new(vec![vec![1.0, 0.0]; 3]);
        let r = eval_input(&src, 0, &[0.0], 0, &EvalConfig::exhaustive(3, 0));
        assert_eq!(r.hops, 3);
        let r = eval_input(&src, 0, &[0.0], 0, &EvalConfig::new(0.99, 3, 0));
        assert_eq!(r.hops, 1);
    }

    #[test]
    fn multi_output_confidence_uses_min() {
        // two outputs of two labels each
        let src = Scripted::new(vec![
            vec![0.45, 0.05, 0.3, 0.2],
            vec![0.45, 0.05, 0.05, 0.45],
            vec![0.5, 0.5, 0.5, 0.5],
        ]);
        let mut cfg = EvalConfig::new(0.15, 3, 0);
        cfg.output_sizes = Some(vec![2, 2]);
        let r = eval_input(&src, 0, &[0.0], 0, &cfg);
        // after one grove min(0.4, 0.1) misses; after two min(0.4, 0.15) hits
        assert_eq!(r.hops, 2);
        assert!((r.confidence - 0.15).abs() < 1e-12);
        cfg.output_sizes = Some(vec![3, 1]);
        assert!(cfg.validate(2, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::new(0.0, 1, 0).validate(4, 3).is_err());
        assert!(EvalConfig::new(1.0, 1, 0).validate(4, 3).is_err());
        assert!(EvalConfig::new(0.5, 0, 0).validate(4, 3).is_err());
        assert!(EvalConfig::new(0.5, 5, 0).validate(4, 3).is_err());
        assert!(EvalConfig::new(0.5, 4, 0).validate(4, 3).is_ok());
        assert!(EvalConfig::new(0.5, 4, 0).validate(4, 1).is_err());
    }

    #[test]
    fn start_groves_are_keyed_by_id() {
        let a: Vec<usize> = (0..100).map(|id| start_grove(7, id, 8)).collect();
        let b: Vec<usize> = (0..100).rev().map(|id| start_grove(7, id, 8)).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
        assert!(a.iter().all(|&s| s < 8));
        // every grove gets used
        for g in 0..8 {
            assert!(a.contains(&g));
        }
        let c: Vec<usize> = (0..100).map(|id| start_grove(8, id, 8)).collect();
        assert_ne!(a, c);
    }

    fn result(id: u64, label: usize, hops: usize) -> EvalResult {
        EvalResult {
            input_id: id,
            prob_norm: vec![0.5, 0.5],
            label,
            hops,
            start_grove: 0,
            confidence: 0.0,
        }
    }

    #[test]
    fn accuracy_and_hops() {
        let all: Vec<EvalResult> = (0..4).map(|i| result(i, 1, 1)).collect();
        assert_eq!(accuracy(&all, &[1, 1, 1, 1]).unwrap(), 1.0);
        assert_eq!(avg_hops(&all), 1.0);
        // hand count: ids 0..7, correct at 0, 2, 3, 6 -> 4/7
        let labels = [0, 1, 2, 0, 1, 2, 0];
        let truth = [0, 0, 2, 0, 2, 1, 0];
        let hops = [1, 2, 3, 1, 1, 4, 2];
        let mixed: Vec<EvalResult> = (0..7).map(|i| result(i as u64, labels[i], hops[i])).collect();
        assert!((accuracy(&mixed, &truth).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert!((avg_hops(&mixed) - 2.0).abs() < 1e-15);
        assert!(accuracy(&mixed, &truth[..6]).is_err());
        let stray = vec![result(9, 0, 1)];
        assert!(accuracy(&stray, &[0]).is_err());
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        write_results_csv(&[result(0, 1, 2)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "id,label,confidence,hops,start_grove,prob_0,prob_1\n0,1,0,2,0,0.5,0.5\n"
        );
    }
}
