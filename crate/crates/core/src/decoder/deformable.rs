use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::INVISIBLE_PIXEL;
use crate::numerics::{Bound, LayerNorm, Linear, ParamStore, Pinhole, Tape, Tensor, Var};

/// Level-0 pixel expressed in the coordinates of pyramid level `level`,
/// where each level halves the resolution by 2×2 averaging.
pub fn level_pixel(px: [f64; 2], level: usize) -> [f64; 2] {
    let s = (1u32 << level) as f64;
    [(px[0] + 0.5) / s - 0.5, (px[1] + 0.5) / s - 0.5]
}

/// Differentiable projection of ego-frame points `[P, 3]` into every camera
/// and pyramid level, each `[P, 2]`.
pub fn project_reference_vars(
    tape: &mut Tape,
    points: Var,
    cams: &[Pinhole],
    levels: usize,
) -> Result<Vec<Vec<Var>>> {
    let mut out = Vec::with_capacity(cams.len());
    for cam in cams {
        let px = tape.project_points(points, cam)?;
        let p = tape.shape(px)[0];
        let mut lv = vec![px];
        for l in 1..levels {
            let s = (1u32 << l) as f64;
            let scaled = tape.scale(px, 1.0 / s);
            let shift = tape.constant(Tensor::filled(&[p, 2], 0.5 / s - 0.5));
            lv.push(tape.add(scaled, shift)?);
        }
        out.push(lv);
    }
    Ok(out)
}

/// Projected reference points per camera per level, each `[P, 2]`. Points
/// at or behind a camera map to [`INVISIBLE_PIXEL`].
pub fn project_references(points: &[[f64; 3]], cams: &[Pinhole], levels: usize) -> Vec<Vec<Tensor>> {
    cams.iter()
        .map(|cam| {
            let px: Vec<Option<[f64; 2]>> = points
                .iter()
                .map(|&p| cam.pixel_of_camera_point(cam.to_camera(p)))
                .collect();
            (0..levels)
                .map(|l| {
                    let data = px
                        .iter()
                        .flat_map(|p| match p {
                            Some(p) => level_pixel(*p, l),
                            None => [INVISIBLE_PIXEL, INVISIBLE_PIXEL],
                        })
                        .collect();
                    Tensor::new(vec![points.len(), 2], data).expect("two columns")
                })
                .collect()
        })
        .collect()
}

/// Sums, over views, the weighted bilinear samples around each reference
/// point.
///
/// `maps[v][l]` is `[H_l, W_l, C]`; `base[v][l]` holds the projected
/// reference points `[N·R, 2]`. Per query, `offsets` is laid out as
/// `[level][ref][sample][2]` and `weights` as `[level][ref][sample]`; the
/// same weights apply to every view.
pub fn deformable_aggregate(
    tape: &mut Tape,
    maps: &[Vec<Var>],
    base: &[Vec<Var>],
    offsets: Var,
    weights: Var,
    refs: usize,
    samples: usize,
) -> Result<Var> {
    let n = tape.shape(weights)[0];
    let levels = maps.first().map_or(0, |m| m.len());
    let k = refs * samples;
    if maps.is_empty() || levels == 0 {
        return Err(Error::Contract("deformable attention needs at least one view".into()));
    }
    if tape.shape(offsets) != [n, levels * k * 2] || tape.shape(weights) != [n, levels * k] {
        return Err(Error::dim(
            "deformable_aggregate",
            tape.shape(offsets),
            tape.shape(weights),
        ));
    }
    if base.len() != maps.len() || base.iter().any(|b| b.len() != levels) {
        return Err(Error::Layout("reference points do not match the views".into()));
    }
    let rep: Vec<usize> = (0..n * refs).flat_map(|r| std::iter::repeat(r).take(samples)).collect();
    let mut acc: Option<Var> = None;
    for l in 0..levels {
        let off = tape.slice_cols(offsets, l * k * 2, k * 2)?;
        let off = tape.reshape(off, &[n * k, 2])?;
        let w = tape.slice_cols(weights, l * k, k)?;
        for (v, view) in maps.iter().enumerate() {
            let b = base[v][l];
            if tape.shape(b) != [n * refs, 2] {
                return Err(Error::dim("deformable_aggregate", tape.shape(b), &[n * refs, 2]));
            }
            let b = tape.gather_rows(b, &rep)?;
            let pts = tape.add(b, off)?;
            let smp = tape.bilinear_sample(view[l], pts)?;
            let part = tape.weighted_row_sum(smp, w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, part)?,
                None => part,
            });
        }
    }
    Ok(acc.expect("at least one view and level"))
}

/// Pre-norm deformable aggregation with a residual connection.
#[derive(Clone, Debug)]
pub struct DeformBlock {
    pub norm: LayerNorm,
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub refs: usize,
    pub samples: usize,
    pub levels: usize,
    pub range_px: f64,
}

/// Initial sample ring radius in pixels.
const RING_PX: f64 = 2.0;

impl DeformBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        refs: usize,
        samples: usize,
        levels: usize,
        range_px: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = levels * refs * samples;
        let offsets = Linear::zeroed(store, &format!("{name}.offsets"), channels, k * 2)?;
        let r = (RING_PX / range_px).min(0.5);
        let mut bias = Vec::with_capacity(k * 2);
        for _ in 0..levels * refs {
            for s in 0..samples {
                let a = std::f64::consts::TAU * s as f64 / samples as f64;
                bias.push((r * a.cos()).atanh());
                bias.push((r * a.sin()).atanh());
            }
        }
        *store.get_mut(offsets.bias) = Tensor::new(vec![k * 2], bias)?;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels)?,
            offsets,
            weights: Linear::zeroed(store, &format!("{name}.weights"), channels, k)?,
            out: Linear::new(store, &format!("{name}.out"), channels, channels, rng)?,
            refs,
            samples,
            levels,
            range_px,
        })
    }

    /// `x + O(aggregate(LN(x)))` with offsets `tanh(·)·range` and softmax
    /// weights over every level, reference and sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        maps: &[Vec<Var>],
        base: &[Vec<Var>],
    ) -> Result<Var> {
        let xn = self.norm.forward(tape, b, x)?;
        let off = self.offsets.forward(tape, b, xn)?;
        let off = tape.tanh(off);
        let off = tape.scale(off, self.range_px);
        let w = self.weights.forward(tape, b, xn)?;
        let w = tape.softmax_last(w)?;
        let agg = deformable_aggregate(tape, maps, base, off, w, self.refs, self.samples)?;
        let h = self.out.forward(tape, b, agg)?;
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cam() -> Pinhole {
        Pinhole {
            rot: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            trans: [0.0, 0.0, 0.0],
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 4.0,
        }
    }

    fn feature_map(rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![8, 16, 3], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn level_pixel_maps_block_centers() {
        assert_eq!(level_pixel([0.5, 2.5], 1), [0.0, 1.0]);
        assert_eq!(level_pixel([3.0, 4.0], 0), [3.0, 4.0]);
    }

    #[test]
    fn tape_projection_matches_plain_projection() {
        let pts = [[5.0, 0.3, 0.2], [7.0, -0.4, -0.1], [-3.0, 0.0, 0.0]];
        let plain = project_references(&pts, &[cam()], 2);
        let mut tape = Tape::new();
        let flat: Vec<f64> = pts.iter().flatten().copied().collect();
        let p = tape.constant(Tensor::new(vec![3, 3], flat).unwrap());
        let vars = project_reference_vars(&mut tape, p, &[cam()], 2).unwrap();
        for l in 0..2 {
            let t = tape.value(vars[0][l]);
            for r in 0..2 {
                assert!((t.at2(r, 0) - plain[0][l].at2(r, 0)).abs() < 1e-12);
                assert!((t.at2(r, 1) - plain[0][l].at2(r, 1)).abs() < 1e-12);
            }
            assert!(t.at2(2, 0) < -1e5);
        }
    }

    #[test]
    fn points_behind_camera_are_invisible() {
        let refs = project_references(&[[-5.0, 0.0, 0.0], [5.0, 0.0, 0.0]], &[cam()], 1);
        assert_eq!(refs[0][0].row(0), &[INVISIBLE_PIXEL, INVISIBLE_PIXEL]);
        assert_eq!(refs[0][0].row(1), &[8.0, 4.0]);
    }

    #[test]
    fn one_hot_zero_offset_is_a_bare_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = feature_map(&mut rng);
        let pts = [[5.0, 0.3, 0.2], [7.0, -0.4, -0.1]];
        let base = project_references(&pts, &[cam()], 1);
        let mut tape = Tape::new();
        let m = tape.constant(fm);
        let bv = vec![vec![tape.constant(base[0][0].clone())]];
        let off = tape.constant(Tensor::zeros(&[2, 6]));
        let w = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let agg = deformable_aggregate(&mut tape, &[vec![m]], &bv, off, w, 1, 3).unwrap();
        let p = tape.constant(base[0][0].clone());
        let direct = tape.bilinear_sample(m, p).unwrap();
        assert!(tape.value(agg).max_abs_diff(tape.value(direct)) < 1e-12);
    }
}
