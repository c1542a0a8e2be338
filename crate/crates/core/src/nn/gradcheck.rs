//! Black-box central-difference gradient verification.

/// Outcome of comparing analytic and numerical partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic[i]` to `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// `i` in `indices`.
///
/// The relative error of one coordinate is `|a - n| / max(|a|, |n|, floor)`;
/// the floor keeps coordinates whose true derivative is ~0 from dividing
/// round-off by round-off.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let mut probe = x.to_vec();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0 };
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}


/// Up to `per_entry` distinct coordinates from every tensor of `layout`,
/// always including each tensor's first element.
pub fn sample_indices(layout: &super::ParamLayout, per_entry: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut out = Vec::new();
    for e in layout.entries() {
        let take = per_entry.min(e.len());
        let mut picks: Vec<usize> = sample(&mut rng, e.len(), take).into_iter().collect();
        if !picks.contains(&0) {
            picks[0] = 0;
        }
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|p| e.offset + p));
    }
    out
}
