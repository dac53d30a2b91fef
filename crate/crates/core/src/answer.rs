//! Answer equivalence used for verification, voting, and hard/soft estimation.

/// Decides whether two final answers are the same answer.
pub trait AnswerEquality: Send + Sync {
    fn equivalent(&self, a: &str, b: &str) -> bool;
}

/// Whitespace/case-normalized string match with an optional numeric fallback.
///
/// Numbers are parsed as decimals or `p/q` rationals and compared with a
/// relative tolerance, so `"5.0"` matches `"5"` and `"1/2"` matches `"0.5"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedMatch {
    pub numeric_rel_tol: Option<f64>,
}

impl Default for NormalizedMatch {
    fn default() -> Self {
        Self {
            numeric_rel_tol: Some(1e-6),
        }
    }
}

impl NormalizedMatch {
    pub fn exact() -> Self {
        Self { numeric_rel_tol: None }
    }
}

impl AnswerEquality for NormalizedMatch {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        let (na, nb) = (normalize(a), normalize(b));
        if na == nb {
            return true;
        }
        match (self.numeric_rel_tol, parse_number(&na), parse_number(&nb)) {
            (Some(tol), Some(x), Some(y)) => {
                let scale = x.abs().max(y.abs());
                (x - y).abs() <= tol * scale
            }
            _ => false,
        }
    }
}

/// Lowercases, trims, collapses internal whitespace runs, and drops trailing
/// periods.
pub fn normalize(answer: &str) -> String {
    let collapsed = answer.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches('.').trim_end().to_owned()
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.replace(' ', "");
    if let Some((num, den)) = s.split_once('/') {
        let (n, d) = (num.parse::<f64>().ok()?, den.parse::<f64>().ok()?);
        if d == 0.0 {
            return None;
        }
        return Some(n / d).filter(|x| x.is_finite());
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}
