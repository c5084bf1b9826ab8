use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::queries::AGENT_ANCHOR_DIM;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scene::world::{EGO_LENGTH, EGO_WIDTH};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Always returns `k` centers;
/// clusters that lose every point keep their previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let Some(first) = points.first() else {
        return Err(Error::Data("k-means needs at least one point".into()));
    };
    let dim = first.len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Data("k-means points have different lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centers).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut i = 0;
            while i + 1 < d2.len() && r >= d2[i] {
                r -= d2[i];
                i += 1;
            }
            i
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (c, _) = nearest(p, &centers);
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved |= mean != centers[c];
            centers[c] = mean;
        }
        if !moved {
            break;
        }
    }
    Ok(centers)
}

/// Vehicle-sized boxes on a grid ahead of the ego.
pub fn grid_agent_anchors(n: usize) -> Tensor {
    let cols = ((n as f64 / 2.0).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    let mut t = Tensor::zeros(&[n, AGENT_ANCHOR_DIM]);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let x = 5.0 + 30.0 * (r as f64 + 0.5) / rows as f64;
        let y = -6.0 + 12.0 * (c as f64 + 0.5) / cols as f64;
        t.data_mut()[i * AGENT_ANCHOR_DIM..(i + 1) * AGENT_ANCHOR_DIM]
            .copy_from_slice(&[x, y, EGO_LENGTH, EGO_WIDTH, 0.0]);
    }
    t
}
