use std::collections::BTreeSet;

use thiserror::Error;

use crate::data::BeliefState;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("predictions ({predicted}) and references ({reference}) differ in length")]
    LengthMismatch { predicted: usize, reference: usize },
    #[error("no examples to score")]
    Empty,
}

fn fraction<T, F: Fn(&T, &T) -> bool>(pred: &[T], gold: &[T], eq: F) -> Result<f64, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            predicted: pred.len(),
            reference: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| eq(p, g)).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Share of turns whose predicted belief state equals the oracle exactly.
pub fn joint_goal_accuracy(predicted: &[BeliefState], oracle: &[BeliefState]) -> Result<f64, MetricError> {
    fraction(predicted, oracle, |a, b| a == b)
}

/// Share of examples whose predicted label set equals the gold set.
pub fn exact_match_accuracy(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<f64, MetricError> {
    fraction(predicted, gold, |a, b| a == b)
}
