use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

pub fn dist(a: Point2, b: Point2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn lerp(a: Point2, b: Point2, t: f64) -> Point2 {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Time-stamped ego positions, in meters and seconds from the reference
/// instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct Trajectory {
    points: Vec<Point2>,
    timestamps: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    points: Vec<Point2>,
    timestamps: Vec<f64>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = Error;

    fn try_from(r: RawTrajectory) -> Result<Self> {
        Trajectory::new(r.points, r.timestamps)
    }
}

impl Trajectory {
    pub fn new(points: Vec<Point2>, timestamps: Vec<f64>) -> Result<Self> {
        if points.len() < 2 || points.len() != timestamps.len() {
            return Err(Error::Contract(format!(
                "trajectory needs >= 2 points with matching timestamps ({} points, {} stamps)",
                points.len(),
                timestamps.len()
            )));
        }
        if points.iter().flatten().chain(&timestamps).any(|v| !v.is_finite()) {
            return Err(Error::Contract("trajectory has non-finite values".into()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract(
                "trajectory timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { points, timestamps })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.timestamps[self.timestamps.len() - 1] - self.timestamps[0]
    }

    /// Linear interpolation in time. Returns the clamped position and whether
    /// `t` fell past the last timestamp.
    pub fn position_at(&self, t: f64) -> (Point2, bool) {
        let ts = &self.timestamps;
        let last = ts.len() - 1;
        if t > ts[last] {
            return (self.points[last], true);
        }
        if t <= ts[0] {
            return (self.points[0], false);
        }
        let k = ts.partition_point(|&x| x <= t).min(last);
        let (t0, t1) = (ts[k - 1], ts[k]);
        (
            lerp(self.points[k - 1], self.points[k], (t - t0) / (t1 - t0)),
            false,
        )
    }
}

/// Piecewise-linear arc-length parameterization of a polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    vertices: Vec<Point2>,
    cumulative: Vec<f64>,
}

impl Path {
    pub fn from_points(points: &[Point2]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Contract(format!(
                "path needs >= 2 points, got {}",
                points.len()
            )));
        }
        let mut vertices = vec![points[0]];
        let mut cumulative = vec![0.0];
        for &p in &points[1..] {
            let d = dist(*vertices.last().expect("nonempty"), p);
            if d > 0.0 {
                cumulative.push(cumulative.last().expect("nonempty") + d);
                vertices.push(p);
            }
        }
        if vertices.len() < 2 {
            return Err(Error::DegeneratePath(points.len()));
        }
        Ok(Self {
            vertices,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("nonempty")
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Position at arc length `s`, clamped to `[0, length]`.
    pub fn at(&self, s: f64) -> Point2 {
        let c = &self.cumulative;
        if s <= 0.0 {
            return self.vertices[0];
        }
        if s >= self.length() {
            return *self.vertices.last().expect("nonempty");
        }
        let k = c.partition_point(|&x| x <= s).clamp(1, c.len() - 1);
        let t = (s - c[k - 1]) / (c[k] - c[k - 1]);
        lerp(self.vertices[k - 1], self.vertices[k], t)
    }

    /// Heading (rad) of the segment containing arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let c = &self.cumulative;
        let k = c.partition_point(|&x| x <= s).clamp(1, c.len() - 1);
        let (a, b) = (self.vertices[k - 1], self.vertices[k]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    }

    /// Arc length of the closest point on the path and the distance to it.
    pub fn project(&self, p: Point2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for k in 1..self.vertices.len() {
            let (a, b) = (self.vertices[k - 1], self.vertices[k]);
            let seg = [b[0] - a[0], b[1] - a[1]];
            let len2 = seg[0] * seg[0] + seg[1] * seg[1];
            let t = (((p[0] - a[0]) * seg[0] + (p[1] - a[1]) * seg[1]) / len2).clamp(0.0, 1.0);
            let q = lerp(a, b, t);
            let d = dist(p, q);
            if d < best.1 {
                best = (self.cumulative[k - 1] + t * len2.sqrt(), d);
            }
        }
        best
    }
}

/// Piecewise-linear fit of a trajectory's positions by arc length.
pub fn fit_path(traj: &Trajectory) -> Result<Path> {
    Path::from_points(traj.points())
}
