use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Label;

/// Counts with `fake` as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_fake: usize,
    pub false_fake: usize,
    pub true_real: usize,
    pub false_real: usize,
}

impl Confusion {
    pub fn add(&mut self, verdict: Label, truth: Label) {
        match (verdict, truth) {
            (Label::Fake, Label::Fake) => self.true_fake += 1,
            (Label::Fake, Label::Real) => self.false_fake += 1,
            (Label::Real, Label::Real) => self.true_real += 1,
            (Label::Real, Label::Fake) => self.false_real += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.true_fake + self.false_fake + self.true_real + self.false_real
    }

    pub fn correct(&self) -> usize {
        self.true_fake + self.true_real
    }

    /// Percent correct; 0 for an empty set.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        100.0 * self.correct() as f64 / self.total() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub confusion: Confusion,
}

pub fn compute_metrics(verdicts: &[Label], truths: &[Label]) -> Result<Metrics> {
    if verdicts.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} verdicts for {} ground-truth labels",
            verdicts.len(),
            truths.len()
        )));
    }
    let mut confusion = Confusion::default();
    for (&v, &t) in verdicts.iter().zip(truths) {
        confusion.add(v, t);
    }
    Ok(Metrics { accuracy: confusion.accuracy(), confusion })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
