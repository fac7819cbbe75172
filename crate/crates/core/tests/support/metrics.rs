//! Brute-force average precision.

use losh::ScoredSample;

/// Area under p_interp(r) = max_{r' >= r} p(r'), evaluated at every
/// recall step by scanning the whole ranking.
pub fn brute_ap(samples: &[ScoredSample], theta: f64) -> f64 {
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
    let n = samples.len() as f64;
    let pr: Vec<(f64, f64)> = (0..order.len())
        .map(|k| {
            let tp = order[..=k].iter().filter(|s| s.iou >= theta).count() as f64;
            (tp / n, tp / (k + 1) as f64)
        })
        .collect();
    let mut area = 0.0;
    let mut prev = 0.0;
    for &(r, _) in &pr {
        if r > prev {
            let p = pr.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            area += (r - prev) * p;
            prev = r;
        }
    }
    area
}
