//! Chi-square goodness of fit and confusion bookkeeping for the
//! evaluation harnesses.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::stimuli::{Category, NUM_CATEGORIES};

/// Pearson statistic sum((obs - exp)^2 / exp).
pub fn chi_square_stat(observed: &[f64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::Shape {
            op: "chi_square_stat",
            detail: format!("{} observed vs {} expected", observed.len(), expected.len()),
        });
    }
    if expected.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidParam {
            op: "chi_square_stat",
            detail: "expected counts must be positive".into(),
        });
    }
    Ok(observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o - e) * (o - e) / e)
        .sum())
}

/// Upper-tail p-value of a chi-square statistic with one degree of
/// freedom: P(X > x) = erfc(sqrt(x / 2)).
pub fn chi_square_pvalue_1dof(stat: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    libm::erfc(libm::sqrt(stat / 2.0))
}

/// Goodness-of-fit test of a two-cell split against a 50/50 null.
/// Returns (statistic, p-value), one degree of freedom.
pub fn chi_square_even_split(count_a: f64, count_b: f64) -> Result<(f64, f64)> {
    let half = (count_a + count_b) / 2.0;
    let stat = chi_square_stat(&[count_a, count_b], &[half, half])?;
    Ok((stat, chi_square_pvalue_1dof(stat)))
}

/// Most frequent category; ties break toward the lowest id.
pub fn majority_vote(labels: &[Category]) -> Result<Category> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("majority_vote"));
    }
    let mut counts = [0usize; NUM_CATEGORIES];
    for &l in labels {
        counts[l.id() as usize] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Category::from_id(best as u8)
}

/// Row = true category, column = predicted category.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u32; NUM_CATEGORIES]; NUM_CATEGORIES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: Category, predicted: Category) {
        self.counts[truth.id() as usize][predicted.id() as usize] += 1;
    }

    pub fn counts(&self) -> &[[u32; NUM_CATEGORIES]; NUM_CATEGORIES] {
        &self.counts
    }

    pub fn row_sum(&self, truth: Category) -> u32 {
        self.counts[truth.id() as usize].iter().sum()
    }

    pub fn total(&self) -> u32 {
        (0..NUM_CATEGORIES as u8)
            .map(|i| self.row_sum(Category::from_id(i).unwrap()))
            .sum()
    }

    pub fn correct(&self) -> u32 {
        (0..NUM_CATEGORIES).map(|i| self.counts[i][i]).sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.correct() as f64 / total as f64
    }

    pub fn per_category_accuracy(&self) -> Vec<f64> {
        (0..NUM_CATEGORIES)
            .map(|i| {
                let row: u32 = self.counts[i].iter().sum();
                if row == 0 {
                    0.0
                } else {
                    self.counts[i][i] as f64 / row as f64
                }
            })
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.counts.iter().map(|r| r.to_vec()).collect()
    }
}
