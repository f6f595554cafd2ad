//! Central finite-difference gradient checking.
//!
//! Coordinates whose perturbation flips a ReLU mask or a max-pool argmax are
//! skipped: the objective is not differentiable across those kinks, so a
//! finite difference there says nothing about the analytic gradient. Callers
//! report the activation pattern as an opaque signature.

use serde::Serialize;

/// Step relative to `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is exactly zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-9;

/// Rounding slack of one objective evaluation, in units of its last place.
/// Long reductions in the loss drift by a few ulps; the quotient inherits
/// that drift divided by the step.
pub const ROUNDOFF_ULPS: f64 = 16.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_slack(analytic, numeric, 0.0)
}

/// Relative error after discounting `slack`, the absolute rounding
/// uncertainty of `numeric`.
pub fn relative_error_with_slack(analytic: f64, numeric: f64, slack: f64) -> f64 {
    ((analytic - numeric).abs() - slack).max(0.0) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Absolute rounding uncertainty of `(fp - fm) / step`.
pub fn quotient_slack(fp: f64, fm: f64, step: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / step
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct WorstCoordinate {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            groups: Vec::new(),
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    /// True when every group stayed under tolerance and at least one
    /// coordinate was actually compared.
    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

/// Checks the coordinates `coords` of one parameter group.
///
/// `eval(i, x)` evaluates the objective with coordinate `i` set to `x` (all
/// others at `values`) and returns the value with its kink signature.
pub fn check_group<F>(
    name: &str,
    values: &[f64],
    analytic: &[f64],
    coords: &[usize],
    base_signature: u64,
    mut eval: F,
) -> GroupError
where
    F: FnMut(usize, f64) -> (f64, u64),
{
    let mut out = GroupError {
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &i in coords {
        let x = values[i];
        let h = FD_STEP * x.abs().max(1.0);
        let (xp, xm) = (x + h, x - h);
        let (fp, sp) = eval(i, xp);
        let (fm, sm) = eval(i, xm);
        if sp != base_signature || sm != base_signature {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (xp - xm);
        let err = relative_error_with_slack(analytic[i], numeric, quotient_slack(fp, fm, xp - xm));
        out.checked += 1;
        if err > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = out.max_rel_error.max(err);
            out.worst = Some(WorstCoordinate {
                index: i,
                analytic: analytic[i],
                numeric,
            });
        }
    }
    out
}

/// Order-sensitive FNV-1a accumulator for kink signatures.
#[derive(Clone, Copy, Debug)]
pub struct Signature(u64);

impl Default for Signature {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Signature {
    pub fn push(&mut self, byte: u8) {
        self.0 ^= byte as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }

    pub fn push_mask<I: IntoIterator<Item = bool>>(&mut self, bits: I) {
        let mut acc = 0u8;
        let mut n = 0;
        for b in bits {
            acc = (acc << 1) | b as u8;
            n += 1;
            if n == 8 {
                self.push(acc);
                acc = 0;
                n = 0;
            }
        }
        self.push(acc);
        self.push(n);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let x = vec![0.5, -1.5, 3.0];
        let f = |v: &[f64]| v.iter().map(|a| a * a * a).sum::<f64>();
        let good: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        let bad: Vec<f64> = good.iter().map(|g| 2.0 * g).collect();
        for (analytic, expect) in [(good, true), (bad, false)] {
            let mut rep = GradCheckReport::new(1e-6);
            rep.groups.push(check_group("x", &x, &analytic, &[0, 1, 2], 0, |i, xi| {
                let mut v = x.clone();
                v[i] = xi;
                (f(&v), 0)
            }));
            assert_eq!(rep.passed(), expect, "{:?}", rep.groups);
        }
    }

    #[test]
    fn slack_only_absorbs_rounding() {
        // A zero gradient seen through a few ulps of cancellation passes.
        let step = 2e-5;
        let numeric = 4.0 * f64::EPSILON / step;
        assert_eq!(relative_error_with_slack(0.0, numeric, quotient_slack(1.0, 1.0, step)), 0.0);
        // A real mismatch is untouched by the slack.
        assert!(relative_error_with_slack(1e-3, 2e-3, quotient_slack(1.0, 1.0, step)) > 0.49);
    }

    #[test]
    fn kinks_are_skipped() {
        let x = vec![0.0];
        let g = check_group("relu", &x, &[0.5], &[0], 1, |_, xi| (xi.max(0.0), (xi > 0.0) as u64));
        assert_eq!(g.skipped, 1);
        assert_eq!(g.checked, 0);
    }
}
