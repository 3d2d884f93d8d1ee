//! Field-of-groves (FoG) random forest inference.
//!
//! A trained random forest is cut into *groves* (small sub-forests). An
//! input starts at a random grove and hops around the ring of groves,
//! accumulating class probabilities, until the gap between the two most
//! likely classes clears a confidence threshold or the hop budget runs out.
//!
//! Modules, bottom up:
//!
//! - [`dataset`]: CSV loading, deterministic splits, min-max scaling.
//! - [`tree`]: CART trees with a flat, reprogrammable node array.
//! - [`forest`]: random forests, budgeted training, grove splitting.
//! - [`fog`]: the functional hop-chained evaluator.
//! - [`costmodel`]: per-operation energy/latency accounting.
//! - [`simarch`]: discrete-event simulator of the grove ring.

pub mod config;
pub mod costmodel;
pub mod dataset;
pub mod fog;
pub mod forest;
pub mod simarch;
pub mod tree;

pub use costmodel::{CostParams, OpTrace};
pub use dataset::{Dataset, MinMaxScaler, SplitSpec};
pub use fog::{EvalConfig, EvalResult, GroveSource};
pub use forest::{
    Budget, BudgetMetric, FieldOfGroves, Grove, GrovePrediction, RandomForest, SyntheticShape,
    TreeParams,
};
pub use simarch::{SimConfig, SimStats};
pub use tree::DecisionTree;

/// Absolute tolerance used for "sums to one" checks across the crate.
pub const PROB_TOLERANCE: f64 = 1e-9;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::argmax;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 1.0]), 2);
    }
}
