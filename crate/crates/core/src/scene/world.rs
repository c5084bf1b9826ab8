use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::camera::CameraModel;
use crate::trajectory::{dist, Path, Point2, Trajectory};

pub const EGO_LENGTH: f64 = 4.5;
pub const EGO_WIDTH: f64 = 2.0;
pub const EGO_HEIGHT: f64 = 1.5;

/// High-level route command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Straight,
    Right,
    LaneChangeLeft,
    LaneChangeRight,
    Stop,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Left,
        Command::Straight,
        Command::Right,
        Command::LaneChangeLeft,
        Command::LaneChangeRight,
        Command::Stop,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn one_hot(self) -> [f64; 6] {
        let mut v = [0.0; 6];
        v[self.index()] = 1.0;
        v
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Point2 {
        [self.x, self.y]
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, p: Point2) -> Point2 {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn heading_to_local(&self, h: f64) -> f64 {
        wrap_angle(h - self.heading)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

/// Oriented box with a height, in whatever frame the caller works in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxState {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub speed: f64,
}

impl BoxState {
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        let f = [c * hl, s * hl];
        let l = [-s * hw, c * hw];
        let p = self.center;
        [
            [p[0] + f[0] + l[0], p[1] + f[1] + l[1]],
            [p[0] + f[0] - l[0], p[1] + f[1] - l[1]],
            [p[0] - f[0] - l[0], p[1] - f[1] - l[1]],
            [p[0] - f[0] + l[0], p[1] - f[1] + l[1]],
        ]
    }

    pub fn in_frame(&self, pose: &Pose) -> BoxState {
        BoxState {
            center: pose.to_local(self.center),
            heading: pose.heading_to_local(self.heading),
            ..*self
        }
    }

    pub fn inflated(&self, margin: f64) -> BoxState {
        BoxState {
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
            ..*self
        }
    }
}

/// Separating-axis overlap test of two oriented rectangles.
pub fn boxes_overlap(a: &BoxState, b: &BoxState) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [
        a.heading.sin_cos(),
        (a.heading + PI / 2.0).sin_cos(),
        b.heading.sin_cos(),
        (b.heading + PI / 2.0).sin_cos(),
    ];
    for (s, c) in axes {
        let proj = |pts: &[Point2; 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in pts {
                let v = p[0] * c + p[1] * s;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

/// Scripted road user: follows `path` from arc length `start_s` with a
/// piecewise-linear speed profile of `(t, v)` keyframes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub path: Vec<Point2>,
    pub start_s: f64,
    pub speed_profile: Vec<[f64; 2]>,
}

impl Agent {
    pub fn speed_at(&self, t: f64) -> f64 {
        let k = &self.speed_profile;
        if t <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            if t <= w[1][0] {
                let f = (t - w[0][0]) / (w[1][0] - w[0][0]);
                return w[0][1] + f * (w[1][1] - w[0][1]);
            }
        }
        k[k.len() - 1][1]
    }

    /// Distance travelled since t = 0.
    pub fn travelled(&self, t: f64) -> f64 {
        let k = &self.speed_profile;
        let mut s = 0.0;
        let mut t0 = 0.0;
        let mut v0 = self.speed_at(0.0);
        let mut knots: Vec<f64> = k.iter().map(|p| p[0]).filter(|&x| x > 0.0 && x < t).collect();
        knots.push(t);
        for &t1 in &knots {
            let v1 = self.speed_at(t1);
            s += 0.5 * (v0 + v1) * (t1 - t0);
            t0 = t1;
            v0 = v1;
        }
        s
    }

    pub fn state_at(&self, t: f64) -> Result<BoxState> {
        let path = Path::from_points(&self.path)?;
        let s = self.start_s + self.travelled(t.max(0.0));
        let moving = s < path.length();
        Ok(BoxState {
            center: path.at(s),
            heading: path.heading_at(s.min(path.length())),
            length: self.length,
            width: self.width,
            height: self.height,
            speed: if moving { self.speed_at(t) } else { 0.0 },
        })
    }

    fn validate(&self) -> Result<()> {
        let finite = self.path.iter().flatten().all(|v| v.is_finite())
            && self.speed_profile.iter().flatten().all(|v| v.is_finite());
        if !finite || self.speed_profile.is_empty() {
            return Err(Error::Data(format!("agent {} has invalid geometry", self.id)));
        }
        if self.speed_profile.windows(2).any(|w| w[1][0] <= w[0][0])
            || self.speed_profile.iter().any(|k| k[1] < 0.0)
        {
            return Err(Error::Data(format!("agent {} speed profile is malformed", self.id)));
        }
        Path::from_points(&self.path).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Obstacle {
    pub fn as_box(&self) -> BoxState {
        BoxState {
            center: self.center,
            heading: self.heading,
            length: self.length,
            width: self.width,
            height: self.height,
            speed: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    LaneCenter,
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub kind: PolylineKind,
    pub points: Vec<Point2>,
}

/// The command applies while driving towards `position`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePoint {
    pub position: Point2,
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EmergencyBrake,
    ObstacleDetour,
    UnprotectedLeft,
    Merge,
    Overtake,
    PedestrianYield,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::EmergencyBrake,
        Family::ObstacleDetour,
        Family::UnprotectedLeft,
        Family::Merge,
        Family::Overtake,
        Family::PedestrianYield,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::EmergencyBrake => "emergency_brake",
            Family::ObstacleDetour => "obstacle_detour",
            Family::UnprotectedLeft => "unprotected_left",
            Family::Merge => "merge",
            Family::Overtake => "overtake",
            Family::PedestrianYield => "pedestrian_yield",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoStart {
    pub pose: Pose,
    pub speed: f64,
}

/// One scripted driving situation in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub family: Family,
    pub seed: u64,
    pub ego: EgoStart,
    pub agents: Vec<Agent>,
    pub map: Vec<MapPolyline>,
    pub obstacles: Vec<Obstacle>,
    pub cameras: Vec<CameraModel>,
    pub route: Vec<RoutePoint>,
    /// Expert positions at 10 Hz from t = 0, continuing past the goal.
    pub expert: Trajectory,
    pub expert_heading: Vec<f64>,
    pub expert_speed: Vec<f64>,
    /// Arc length along the expert path at which the route is complete.
    pub goal_s: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Data(format!("{}: no cameras", self.id)));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        if self.route.is_empty() {
            return Err(Error::Data(format!("{}: empty route", self.id)));
        }
        let n = self.expert.len();
        if self.expert_heading.len() != n || self.expert_speed.len() != n {
            return Err(Error::Data(format!("{}: expert arrays disagree in length", self.id)));
        }
        if dist(self.expert.points()[0], self.ego.pose.position()) > 1e-9 {
            return Err(Error::Data(format!(
                "{}: expert trajectory does not start at the ego pose",
                self.id
            )));
        }
        let finite = [self.ego.pose.x, self.ego.pose.y, self.ego.pose.heading, self.ego.speed]
            .iter()
            .chain(self.map.iter().flat_map(|m| m.points.iter().flatten()))
            .chain(self.route.iter().flat_map(|r| r.position.iter()))
            .chain(self.expert_heading.iter())
            .chain(self.expert_speed.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("{}: non-finite geometry", self.id)));
        }
        for a in &self.agents {
            a.validate()?;
        }
        Ok(())
    }

    pub fn expert_path(&self) -> Result<Path> {
        Path::from_points(self.expert.points())
    }

    /// Index of the last expert sample at or before `t`.
    pub fn expert_index(&self, t: f64) -> usize {
        let ts = self.expert.timestamps();
        ts.partition_point(|&x| x <= t + 1e-9).saturating_sub(1)
    }

    pub fn expert_pose(&self, k: usize) -> Pose {
        let p = self.expert.points()[k];
        Pose::new(p[0], p[1], self.expert_heading[k])
    }

    pub fn agent_boxes(&self, t: f64) -> Result<Vec<(AgentKind, BoxState)>> {
        self.agents.iter().map(|a| Ok((a.kind, a.state_at(t)?))).collect()
    }

    /// Active route point for an ego at arc length `s` along the expert
    /// path: the first one not yet reached.
    pub fn route_target(&self, path: &Path, s: f64) -> RoutePoint {
        for rp in &self.route {
            let (rs, _) = path.project(rp.position);
            if rs > s + 1.0 {
                return *rp;
            }
        }
        *self.route.last().expect("validated route")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scn: Scenario = serde_json::from_str(s).map_err(|e| Error::Data(e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }
}

pub fn ego_box(pose: &Pose, speed: f64) -> BoxState {
    BoxState {
        center: pose.position(),
        heading: pose.heading,
        length: EGO_LENGTH,
        width: EGO_WIDTH,
        height: EGO_HEIGHT,
        speed,
    }
}
