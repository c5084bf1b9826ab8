//! Modality matching on the reference granularity and driving-style target
//! selection.

use crate::error::Result;
use crate::trajectory::{dist, Point2, SpeedBins, WaypointSet};

/// Matched modality, shared by every granularity group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub ref_index: usize,
    /// Supervised modality per granularity; every entry equals `ref_index`.
    pub per_granularity: Vec<usize>,
}

/// Mean distance between predicted and ground-truth waypoints over the
/// unpadded ground-truth entries, `None` if all are padded.
pub fn mean_unpadded_l2(pred: &[Point2], gt: &WaypointSet) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for ((p, g), &pad) in pred.iter().zip(&gt.waypoints).zip(&gt.padded) {
        if !pad {
            s += dist(*p, *g);
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Winner-takes-all over modalities on the reference granularity, broadcast
/// to all `num_granularities` groups. Ties go to the lower modality index.
/// Returns `None` when the reference ground truth is fully padded.
pub fn align_match(pred_ref: &[Vec<Point2>], gt_ref: &WaypointSet, num_granularities: usize) -> Option<MatchResult> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in pred_ref.iter().enumerate() {
        let d = mean_unpadded_l2(p, gt_ref)?;
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    let (i, _) = best?;
    Some(MatchResult {
        ref_index: i,
        per_granularity: vec![i; num_granularities],
    })
}

/// Speed bin of the mean ground-truth step speed, per frequency group. An
/// empty speed list reads as standing still.
pub fn select_style_granularity(gt_speeds: &[Vec<f64>], bins: &SpeedBins) -> Result<Vec<usize>> {
    gt_speeds
        .iter()
        .map(|v| {
            let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            bins.classify(mean)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::GranularitySpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(points: Vec<Point2>) -> WaypointSet {
        WaypointSet::unpadded(GranularitySpec::temporal(2.0, points.len()), points)
    }

    #[test]
    fn exact_modality_wins() {
        let g = gt(vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let p0 = g.waypoints.clone();
        let p1: Vec<Point2> = p0.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let m = align_match(&[p0, p1], &g, 4).unwrap();
        assert_eq!(m.ref_index, 0);
        assert_eq!(m.per_granularity, vec![0; 4]);
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let g = gt(vec![[1.0, 0.0], [2.0, 0.0]]);
        let a: Vec<Point2> = g.waypoints.iter().map(|p| [p[0], p[1] + 1.0]).collect();
        let b: Vec<Point2> = g.waypoints.iter().map(|p| [p[0], p[1] - 1.0]).collect();
        assert_eq!(align_match(&[a, b], &g, 1).unwrap().ref_index, 0);
    }

    #[test]
    fn padded_points_are_ignored_and_all_padded_skips() {
        let mut g = gt(vec![[1.0, 0.0], [2.0, 0.0]]);
        g.padded[1] = true;
        let a = vec![[1.0, 0.0], [50.0, 0.0]];
        let b = vec![[1.5, 0.0], [2.0, 0.0]];
        assert_eq!(align_match(&[b.clone(), a.clone()], &g, 1).unwrap().ref_index, 1);
        g.padded[0] = true;
        assert!(align_match(&[a, b], &g, 1).is_none());
    }

    #[test]
    fn random_cases_match_brute_force_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let g = gt((0..4).map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(-3.0..3.0)]).collect());
            let preds: Vec<Vec<Point2>> = (0..4)
                .map(|_| (0..4).map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(-3.0..3.0)]).collect())
                .collect();
            let mut best = (0, f64::INFINITY);
            for (i, p) in preds.iter().enumerate() {
                let d: f64 = p
                    .iter()
                    .zip(&g.waypoints)
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .sum::<f64>()
                    / 4.0;
                if d < best.1 {
                    best = (i, d);
                }
            }
            assert_eq!(align_match(&preds, &g, 10).unwrap().ref_index, best.0);
        }
    }

    #[test]
    fn style_bin_follows_mean_speed() {
        let bins = SpeedBins::new(vec![0.0, 0.4, 3.0, 10.0]).unwrap();
        assert_eq!(select_style_granularity(&[vec![0.1, 0.3]], &bins).unwrap(), vec![0]);
        assert_eq!(select_style_granularity(&[vec![4.0, 6.0], vec![1.0]], &bins).unwrap(), vec![2, 1]);
        assert_eq!(select_style_granularity(&[vec![]], &bins).unwrap(), vec![0]);
    }
}
