use std::fmt;

/// Outcome of checking production values against an oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub len: usize,
    pub max_abs_err: f64,
    /// `|actual - reference| / max(1, |reference|)`, maximised over entries.
    pub max_scaled_err: f64,
    pub worst_index: Option<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for OracleResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} over {} values: max abs err {:.3e}, max scaled err {:.3e} (tol {:.1e}, worst index {:?})",
            if self.passed { "pass" } else { "FAIL" },
            self.len,
            self.max_abs_err,
            self.max_scaled_err,
            self.tolerance,
            self.worst_index
        )
    }
}

/// Entry-wise comparison; lengths must agree and non-finite values fail.
pub fn compare(reference: &[f64], actual: &[f64], tolerance: f64) -> OracleResult {
    let mut r = OracleResult {
        len: reference.len(),
        max_abs_err: 0.0,
        max_scaled_err: 0.0,
        worst_index: None,
        tolerance,
        passed: reference.len() == actual.len(),
    };
    for (i, (a, b)) in reference.iter().zip(actual).enumerate() {
        let abs = (a - b).abs();
        let scaled = abs / a.abs().max(1.0);
        if !abs.is_finite() {
            r.passed = false;
            r.worst_index = Some(i);
            r.max_abs_err = f64::INFINITY;
            r.max_scaled_err = f64::INFINITY;
            break;
        }
        if scaled > r.max_scaled_err || r.worst_index.is_none() {
            r.max_scaled_err = r.max_scaled_err.max(scaled);
            r.worst_index = Some(i);
        }
        r.max_abs_err = r.max_abs_err.max(abs);
    }
    r.passed &= r.max_scaled_err <= tolerance;
    r
}
