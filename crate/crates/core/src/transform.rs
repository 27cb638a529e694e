use nalgebra::DMatrix;

use crate::error::{invalid, Result};

pub const DEFAULT_PSEUDOCOUNT: f64 = 0.5;

/// Centered log-ratio transform of a `samples x taxa` count matrix: each row
/// becomes `log(c + pseudocount)` minus its row mean.
pub fn clr_transform(counts: &DMatrix<f64>, pseudocount: f64) -> Result<DMatrix<f64>> {
    if !(pseudocount.is_finite() && pseudocount > 0.0) {
        return invalid(format!("pseudocount must be positive, got {pseudocount}"));
    }
    if let Some(c) = counts.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
        return invalid(format!("counts must be finite and nonnegative, found {c}"));
    }
    let mut out = counts.map(|c| (c + pseudocount).ln());
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_composition_is_zero() {
        let out = clr_transform(&DMatrix::from_element(1, 4, 1.0), 0.5).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn two_taxa_by_hand() {
        let out = clr_transform(&DMatrix::from_row_slice(1, 2, &[0.0, 9.0]), 0.5).unwrap();
        let m = (0.5f64.ln() + 9.5f64.ln()) / 2.0;
        assert!((out[(0, 0)] - (0.5f64.ln() - m)).abs() < 1e-14);
        assert!((out[(0, 1)] - (9.5f64.ln() - m)).abs() < 1e-14);
    }

    #[test]
    fn rejects_negative_counts_and_bad_pseudocount() {
        assert!(clr_transform(&DMatrix::from_row_slice(1, 2, &[-1.0, 2.0]), 0.5).is_err());
        assert!(clr_transform(&DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn rows_sum_to_zero(v in proptest::collection::vec(0u32..10_000, 12), pc in 0.01f64..5.0) {
            let counts = DMatrix::from_iterator(3, 4, v.into_iter().map(f64::from));
            let out = clr_transform(&counts, pc).unwrap();
            for row in out.row_iter() {
                prop_assert!(row.sum().abs() < 1e-10);
            }
        }
    }
}
