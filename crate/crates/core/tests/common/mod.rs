#![allow(dead_code)]

/// Exhaustive threshold sweep: -inf, every midpoint between adjacent
/// distinct scores, +inf. Accept when `score >= threshold`.
pub fn sweep(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<f64> = targets.iter().chain(nontargets).cloned().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&th| {
            let miss = targets.iter().filter(|&&s| s < th).count();
            let fa = nontargets.iter().filter(|&&s| s >= th).count();
            (miss as f64 / targets.len() as f64, fa as f64 / nontargets.len() as f64)
        })
        .collect()
}

/// First sweep point with `p_miss >= p_fa`, linearly interpolated against
/// the previous one.
pub fn oracle_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let pts = sweep(targets, nontargets);
    let k = pts.iter().position(|(m, f)| m >= f).unwrap();
    let (m1, f1) = pts[k];
    if m1 == f1 {
        return m1;
    }
    let (m0, f0) = pts[k - 1];
    let alpha = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    m0 + alpha * (m1 - m0)
}

pub fn oracle_dcf(targets: &[f64], nontargets: &[f64], c_m: f64, c_fa: f64, p_t: f64) -> f64 {
    sweep(targets, nontargets)
        .iter()
        .map(|(m, f)| c_m * p_t * m + c_fa * (1.0 - p_t) * f)
        .fold(f64::INFINITY, f64::min)
}

/// Random score sets on a coarse grid so ties occur.
pub fn random_scores(seed: u64, max_len: usize) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let mut r = dmha::rng::stream(seed, "scores");
    let nt = r.random_range(1..max_len);
    let nn = r.random_range(1..=max_len - nt);
    let grid = if r.random::<bool>() { 20.0 } else { 1e6 };
    let mut draw = |n: usize, shift: f64| -> Vec<f64> {
        (0..n).map(|_| ((r.random::<f64>() + shift) * grid).round() / grid).collect()
    };
    let t = draw(nt, 0.3);
    let n = draw(nn, 0.0);
    (t, n)
}
