//! The finite-difference suite run by `stegattn gradcheck`.

use crate::attention;
use crate::error::Result;
use crate::model;
use crate::numerics::gradcheck::{check, primitive_cases, GradCase};
use crate::numerics::parallel::map_items;
use crate::numerics::OpKind;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Spatial extent of the end-to-end instance.
pub const MODEL_IMAGE_SIZE: usize = 8;
/// Parameter coordinates sampled per tensor in the end-to-end check.
pub const MODEL_COORDS_PER_TENSOR: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub rel_error: f64,
    pub coords: usize,
    pub skipped: usize,
}

impl CheckReport {
    /// Passing needs at least one compared coordinate.
    pub fn passed(&self) -> bool {
        self.coords > 0 && self.rel_error <= TOLERANCE
    }
}

/// Every case of the suite, in 64-bit arithmetic.
pub fn cases(seed: u64, full: bool) -> Vec<GradCase<f64>> {
    let mut all = primitive_cases::<f64>(seed);
    all.extend(attention::gradcheck_cases::<f64>(seed));
    if full {
        all.extend(model::gradcheck_cases(seed, MODEL_IMAGE_SIZE, MODEL_COORDS_PER_TENSOR));
    }
    all
}

/// Run the suite; `fault` corrupts one backward rule as a negative control.
pub fn run(seed: u64, full: bool, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let cases = cases(seed, full);
    map_items(cases.len(), |i| {
        let r = check(&cases[i], STEP, fault, seed)?;
        Ok(CheckReport {
            name: r.name,
            rel_error: r.rel_error,
            coords: r.coords,
            skipped: r.skipped,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_level_suite_passes() {
        for r in run(0, false, None).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let reports = run(0, false, Some(OpKind::ChannelPool)).unwrap();
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.contains(&"channel_pool_avg"), "{failed:?}");
        assert!(!failed.contains(&"relu"));
    }
}
