//! Statistics for the generator's bias dial.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Fraction of examples whose background texture equals their label.
pub fn pairing_fraction(pairs: &[(usize, usize)]) -> f64 {
    let matched = pairs.iter().filter(|(label, texture)| label == texture).count();
    matched as f64 / pairs.len() as f64
}

/// Pearson chi-square test of independence on a `rows × cols` contingency
/// table built from (row, col) observations. Returns (statistic, p-value).
pub fn chi_square_independence(pairs: &[(usize, usize)], rows: usize, cols: usize) -> (f64, f64) {
    let mut table = vec![vec![0.0f64; cols]; rows];
    for &(r, c) in pairs {
        table[r][c] += 1.0;
    }
    let n = pairs.len() as f64;
    let row_sums: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let mut stat = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let expected = row_sums[r] * col_sums[c] / n;
            if expected > 0.0 {
                stat += (table[r][c] - expected).powi(2) / expected;
            }
        }
    }
    let dof = ((rows - 1) * (cols - 1)) as f64;
    let p = 1.0 - ChiSquared::new(dof).expect("degrees of freedom").cdf(stat);
    (stat, p)
}
