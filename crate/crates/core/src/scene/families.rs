//! Scripted scenario families and the rule-based expert that drives them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::camera::CameraModel;
use crate::scene::world::{
    Agent, AgentKind, Command, EgoStart, Family, MapPolyline, Obstacle, PolylineKind, Pose,
    RoutePoint, Scenario, EGO_LENGTH, EGO_WIDTH,
};
use crate::trajectory::{Path, Point2, Trajectory};

pub const LANE_WIDTH: f64 = 3.5;
pub const EXPERT_DT: f64 = 0.1;
/// Seconds of expert motion kept past the goal so late frames still have
/// a full future.
pub const EXPERT_TAIL_S: f64 = 8.0;

#[derive(Default)]
struct PathBuilder {
    pts: Vec<Point2>,
}

impl PathBuilder {
    fn start(p: Point2) -> Self {
        Self { pts: vec![p] }
    }

    fn last(&self) -> Point2 {
        *self.pts.last().expect("started")
    }

    fn line_to(&mut self, p: Point2, step: f64) -> &mut Self {
        let a = self.last();
        let d = ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
        let n = (d / step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let f = k as f64 / n as f64;
            self.pts.push([a[0] + f * (p[0] - a[0]), a[1] + f * (p[1] - a[1])]);
        }
        self
    }

    /// Cosine-blended lateral shift to `y1` over `len` meters along +x.
    fn lane_change(&mut self, len: f64, y1: f64) -> &mut Self {
        let a = self.last();
        let n = (len / 0.5).ceil() as usize;
        for k in 1..=n {
            let f = k as f64 / n as f64;
            let y = a[1] + (y1 - a[1]) * (1.0 - (PI * f).cos()) / 2.0;
            self.pts.push([a[0] + f * len, y]);
        }
        self
    }

    /// Quarter-circle left turn from heading +x to heading +y.
    fn left_quarter(&mut self, radius: f64) -> &mut Self {
        let a = self.last();
        let c = [a[0], a[1] + radius];
        let n = ((PI / 2.0) * radius / 0.25).ceil() as usize;
        for k in 1..=n {
            let th = -PI / 2.0 + (PI / 2.0) * k as f64 / n as f64;
            self.pts.push([c[0] + radius * th.cos(), c[1] + radius * th.sin()]);
        }
        self
    }

    fn build(&self) -> Vec<Point2> {
        self.pts.clone()
    }
}

fn straight(a: Point2, b: Point2) -> Vec<Point2> {
    vec![a, b]
}

fn polyline(kind: PolylineKind, points: Vec<Point2>) -> MapPolyline {
    MapPolyline { kind, points }
}

/// Two same-direction lanes centred on y = 0 and y = LANE_WIDTH.
fn two_lane_road(x0: f64, x1: f64) -> Vec<MapPolyline> {
    let w = LANE_WIDTH;
    vec![
        polyline(PolylineKind::LaneCenter, straight([x0, 0.0], [x1, 0.0])),
        polyline(PolylineKind::LaneCenter, straight([x0, w], [x1, w])),
        polyline(PolylineKind::Boundary, straight([x0, -w / 2.0], [x1, -w / 2.0])),
        polyline(PolylineKind::Boundary, straight([x0, w / 2.0], [x1, w / 2.0])),
        polyline(PolylineKind::Boundary, straight([x0, 1.5 * w], [x1, 1.5 * w])),
    ]
}

fn vehicle(id: usize, path: Vec<Point2>, start_s: f64, profile: Vec<[f64; 2]>) -> Agent {
    Agent {
        id,
        kind: AgentKind::Vehicle,
        length: 4.5,
        width: 2.0,
        height: 1.5,
        path,
        start_s,
        speed_profile: profile,
    }
}

/// A standing constraint: keep the ego centre behind `s_stop` until
/// `until_t`.
#[derive(Clone, Copy, Debug)]
struct StopLine {
    s_stop: f64,
    until_t: f64,
}

struct ExpertPlan {
    path: Vec<Point2>,
    start_speed: f64,
    cruise: f64,
    /// `(s0, s1, v)` speed caps on path intervals.
    slow_zones: Vec<(f64, f64, f64)>,
    /// Agents the expert yields to by waiting for them to clear its path.
    yield_to: Vec<usize>,
    goal_s: f64,
}

const IDM_ACCEL: f64 = 2.0;
const IDM_DECEL: f64 = 3.0;
const IDM_GAP: f64 = 2.5;
const IDM_HEADWAY: f64 = 1.2;
const EXPERT_MAX_BRAKE: f64 = 8.0;

fn speed_cap(plan: &ExpertPlan, s: f64) -> f64 {
    plan.slow_zones
        .iter()
        .filter(|z| s + 8.0 >= z.0 && s <= z.1)
        .map(|z| z.2)
        .fold(plan.cruise, f64::min)
}

/// Time window during which `agent` occupies the ego path corridor, and the
/// smallest path arc length it occupies.
fn conflict_window(path: &Path, agent: &Agent, horizon: f64) -> Result<Option<(f64, f64, f64)>> {
    let corridor = (EGO_WIDTH + agent.width) / 2.0 + 0.6;
    let mut window: Option<(f64, f64, f64)> = None;
    let n = (horizon / EXPERT_DT) as usize;
    for k in 0..=n {
        let t = k as f64 * EXPERT_DT;
        let st = agent.state_at(t)?;
        let (s, d) = path.project(st.center);
        if d < corridor && s > 0.5 && s < path.length() - 0.5 {
            window = Some(match window {
                None => (t, t, s),
                Some((t0, _, s0)) => (t0, t, s0.min(s)),
            });
        }
    }
    Ok(window)
}

/// Integrates an IDM driver along the planned path at 10 Hz.
fn drive_expert(
    plan: &ExpertPlan,
    agents: &[Agent],
) -> Result<(Trajectory, Vec<f64>, Vec<f64>)> {
    let path = Path::from_points(&plan.path)?;
    let mut stops = Vec::new();
    for &id in &plan.yield_to {
        let agent = agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::Data(format!("no agent {id} to yield to")))?;
        if let Some((_, t1, s)) = conflict_window(&path, agent, 40.0)? {
            stops.push(StopLine {
                s_stop: s - (EGO_LENGTH / 2.0 + agent.length.max(agent.width) / 2.0 + 2.5),
                until_t: t1 + 0.5,
            });
        }
    }

    let (mut s, mut v, mut t) = (0.0f64, plan.start_speed, 0.0f64);
    let mut pts = Vec::new();
    let mut stamps = Vec::new();
    let mut heads = Vec::new();
    let mut speeds = Vec::new();
    let mut t_goal: Option<f64> = None;
    loop {
        pts.push(path.at(s));
        stamps.push(t);
        heads.push(path.heading_at(s));
        speeds.push(v);
        if t_goal.is_none() && s >= plan.goal_s {
            t_goal = Some(t);
        }
        if let Some(tg) = t_goal {
            if t >= tg + EXPERT_TAIL_S - 1e-9 {
                break;
            }
        }
        if t > 120.0 {
            return Err(Error::Data("expert never reached the goal".into()));
        }

        let mut lead: Option<(f64, f64)> = None;
        let mut consider = |gap: f64, vl: f64| {
            if lead.map_or(true, |(g, _)| gap < g) {
                lead = Some((gap, vl));
            }
        };
        for a in agents {
            let st = a.state_at(t)?;
            let (sa, d) = path.project(st.center);
            let corridor = (EGO_WIDTH + a.width) / 2.0 + 0.3;
            if d < corridor && sa > s {
                let along = (st.heading - path.heading_at(sa)).cos();
                consider(sa - s - (EGO_LENGTH + a.length) / 2.0, (st.speed * along).max(0.0));
            }
        }
        for sl in &stops {
            if t < sl.until_t && sl.s_stop > s - 0.5 {
                consider(sl.s_stop - s + IDM_GAP, 0.0);
            }
        }

        let v0 = speed_cap(plan, s).max(0.1);
        let mut a = IDM_ACCEL * (1.0 - (v / v0).powi(4));
        if let Some((gap, vl)) = lead {
            let dv = v - vl;
            let s_star =
                IDM_GAP + (v * IDM_HEADWAY + v * dv / (2.0 * (IDM_ACCEL * IDM_DECEL).sqrt())).max(0.0);
            a -= IDM_ACCEL * (s_star / gap.max(0.1)).powi(2);
        }
        let a = a.clamp(-EXPERT_MAX_BRAKE, IDM_ACCEL);
        let v_new = (v + a * EXPERT_DT).max(0.0);
        s += 0.5 * (v + v_new) * EXPERT_DT;
        v = v_new;
        t = ((stamps.len()) as f64) * EXPERT_DT;
        if s > path.length() {
            return Err(Error::Data("expert path too short for its tail".into()));
        }
    }
    Ok((Trajectory::new(pts, stamps)?, heads, speeds))
}

struct Draft {
    agents: Vec<Agent>,
    map: Vec<MapPolyline>,
    obstacles: Vec<Obstacle>,
    route: Vec<RoutePoint>,
    plan: ExpertPlan,
}

fn rp(position: Point2, command: Command) -> RoutePoint {
    RoutePoint { position, command }
}

fn emergency_brake(rng: &mut ChaCha8Rng) -> Draft {
    let v0 = rng.gen_range(4.5..6.5);
    let gap = rng.gen_range(14.0..20.0);
    let tb = rng.gen_range(1.5..3.0);
    let decel = rng.gen_range(4.0..6.0);
    let stand = rng.gen_range(1.0..3.0);
    let t_stop = tb + v0 / decel;
    let t_go = t_stop + stand;
    let lead = vehicle(
        0,
        straight([-10.0, 0.0], [400.0, 0.0]),
        10.0 + gap,
        vec![[0.0, v0], [tb, v0], [t_stop, 0.0], [t_go, 0.0], [t_go + v0 / 2.0, v0]],
    );
    let goal = 60.0;
    Draft {
        agents: vec![lead],
        map: two_lane_road(-20.0, 200.0),
        obstacles: vec![],
        route: vec![rp([goal, 0.0], Command::Straight)],
        plan: ExpertPlan {
            path: PathBuilder::start([0.0, 0.0]).line_to([goal + 90.0, 0.0], 1.0).build(),
            start_speed: v0,
            cruise: v0 + 0.5,
            slow_zones: vec![],
            yield_to: vec![],
            goal_s: goal,
        },
    }
}

fn obstacle_detour(rng: &mut ChaCha8Rng) -> Draft {
    let xo = rng.gen_range(26.0..32.0);
    let v0 = rng.gen_range(4.0..6.0);
    let w = LANE_WIDTH;
    let path = PathBuilder::start([0.0, 0.0])
        .line_to([xo - 18.0, 0.0], 1.0)
        .lane_change(12.0, w)
        .line_to([xo + 6.0, w], 1.0)
        .lane_change(12.0, 0.0)
        .line_to([xo + 130.0, 0.0], 1.0)
        .build();
    let goal_x = xo + 35.0;
    Draft {
        agents: vec![],
        map: two_lane_road(-20.0, 220.0),
        obstacles: vec![Obstacle {
            center: [xo, rng.gen_range(-0.3..0.3)],
            heading: rng.gen_range(-0.2..0.2),
            length: 2.5,
            width: 2.0,
            height: 1.2,
        }],
        route: vec![
            rp([xo - 6.0, w], Command::LaneChangeLeft),
            rp([xo + 6.0, w], Command::Straight),
            rp([xo + 18.0, 0.0], Command::LaneChangeRight),
            rp([goal_x, 0.0], Command::Straight),
        ],
        plan: ExpertPlan {
            path,
            start_speed: v0,
            cruise: v0,
            slow_zones: vec![],
            yield_to: vec![],
            goal_s: goal_x + 1.0,
        },
    }
}

fn unprotected_left(rng: &mut ChaCha8Rng) -> Draft {
    let w = LANE_WIDTH;
    let xc = rng.gen_range(34.0..40.0);
    let radius = 7.0;
    let x_turn = xc + w / 2.0 - radius;
    let path = PathBuilder::start([0.0, 0.0])
        .line_to([x_turn, 0.0], 1.0)
        .left_quarter(radius)
        .line_to([xc + w / 2.0, radius + 120.0], 1.0)
        .build();
    let arc_s = x_turn;
    let goal_y = radius + 30.0;
    let goal_s = arc_s + PI / 2.0 * radius + (goal_y - radius);
    let v_on = rng.gen_range(6.0..8.0);
    let arrive = rng.gen_range(3.0..4.5);
    let x_start = xc + 2.0 + v_on * arrive;
    let oncoming = vehicle(
        0,
        straight([xc + 150.0, w], [xc - 200.0, w]),
        xc + 150.0 - x_start,
        vec![[0.0, v_on]],
    );
    let mut map = vec![
        polyline(PolylineKind::LaneCenter, straight([-20.0, 0.0], [xc + 80.0, 0.0])),
        polyline(PolylineKind::LaneCenter, straight([xc + 80.0, w], [-20.0, w])),
        polyline(PolylineKind::LaneCenter, straight([xc + w / 2.0, -40.0], [xc + w / 2.0, 120.0])),
        polyline(PolylineKind::LaneCenter, straight([xc - w / 2.0, 120.0], [xc - w / 2.0, -40.0])),
    ];
    for (a, b) in [
        ([-20.0, -w / 2.0], [xc - w, -w / 2.0]),
        ([xc + w, -w / 2.0], [xc + 80.0, -w / 2.0]),
        ([-20.0, 1.5 * w], [xc - w, 1.5 * w]),
        ([xc + w, 1.5 * w], [xc + 80.0, 1.5 * w]),
        ([xc - w, 1.5 * w], [xc - w, 120.0]),
        ([xc + w, 1.5 * w], [xc + w, 120.0]),
        ([xc - w, -w / 2.0], [xc - w, -40.0]),
        ([xc + w, -w / 2.0], [xc + w, -40.0]),
    ] {
        map.push(polyline(PolylineKind::Boundary, straight(a, b)));
    }
    Draft {
        agents: vec![oncoming],
        map,
        obstacles: vec![],
        route: vec![
            rp([xc + w / 2.0, radius + 5.0], Command::Left),
            rp([xc + w / 2.0, goal_y], Command::Straight),
        ],
        plan: ExpertPlan {
            path,
            start_speed: rng.gen_range(4.0..5.5),
            cruise: 6.0,
            slow_zones: vec![(arc_s - 2.0, arc_s + PI / 2.0 * radius, 4.0)],
            yield_to: vec![0],
            goal_s,
        },
    }
}

fn merge(rng: &mut ChaCha8Rng) -> Draft {
    let w = LANE_WIDTH;
    let v0 = rng.gen_range(4.5..6.0);
    let x_lc = rng.gen_range(12.0..18.0);
    let lc_len = 16.0;
    let lane_end = x_lc + lc_len + 8.0;
    let path = PathBuilder::start([0.0, w])
        .line_to([x_lc, w], 1.0)
        .lane_change(lc_len, 0.0)
        .line_to([x_lc + lc_len + 150.0, 0.0], 1.0)
        .build();
    let goal_x = x_lc + lc_len + 30.0;
    let lead = vehicle(
        0,
        straight([-60.0, 0.0], [400.0, 0.0]),
        60.0 + rng.gen_range(8.0..14.0),
        vec![[0.0, v0 - 0.5]],
    );
    let trailing = vehicle(
        1,
        straight([-60.0, 0.0], [400.0, 0.0]),
        60.0 - rng.gen_range(28.0..34.0),
        vec![[0.0, v0 - 1.0]],
    );
    let map = vec![
        polyline(PolylineKind::LaneCenter, straight([-20.0, 0.0], [250.0, 0.0])),
        polyline(PolylineKind::LaneCenter, straight([-20.0, w], [lane_end, w])),
        polyline(PolylineKind::Boundary, straight([-20.0, -w / 2.0], [250.0, -w / 2.0])),
        polyline(PolylineKind::Boundary, straight([-20.0, w / 2.0], [x_lc, w / 2.0])),
        polyline(
            PolylineKind::Boundary,
            straight([-20.0, 1.5 * w], [lane_end, 1.5 * w]),
        ),
        polyline(
            PolylineKind::Boundary,
            straight([lane_end, 1.5 * w], [lane_end + 10.0, w / 2.0]),
        ),
        polyline(PolylineKind::Boundary, straight([lane_end + 10.0, w / 2.0], [250.0, w / 2.0])),
    ];
    Draft {
        agents: vec![lead, trailing],
        map,
        obstacles: vec![],
        route: vec![
            rp([x_lc + lc_len, 0.0], Command::LaneChangeRight),
            rp([goal_x, 0.0], Command::Straight),
        ],
        plan: ExpertPlan {
            path,
            start_speed: v0,
            cruise: v0,
            slow_zones: vec![],
            yield_to: vec![],
            goal_s: goal_x + 1.0,
        },
    }
}

fn overtake(rng: &mut ChaCha8Rng) -> Draft {
    let w = LANE_WIDTH;
    let v0: f64 = rng.gen_range(5.5..6.5);
    let v_lead = rng.gen_range(1.5..2.5);
    let lead_gap = rng.gen_range(16.0..22.0);
    let x_lc = 4.0;
    let lc_len = 14.0;
    // ego passes the lead by 10 m before moving back
    let t_pass = (lead_gap + 10.0) / (v0 - v_lead);
    let x_back = (v0 * t_pass).max(x_lc + lc_len + 4.0);
    let path = PathBuilder::start([0.0, 0.0])
        .line_to([x_lc, 0.0], 1.0)
        .lane_change(lc_len, w)
        .line_to([x_back, w], 1.0)
        .lane_change(lc_len, 0.0)
        .line_to([x_back + lc_len + 140.0, 0.0], 1.0)
        .build();
    let goal_x = x_back + lc_len + 15.0;
    let lead = vehicle(
        0,
        straight([-10.0, 0.0], [400.0, 0.0]),
        10.0 + lead_gap,
        vec![[0.0, v_lead]],
    );
    Draft {
        agents: vec![lead],
        map: two_lane_road(-20.0, x_back + 200.0),
        obstacles: vec![],
        route: vec![
            rp([x_lc + lc_len, w], Command::LaneChangeLeft),
            rp([x_back, w], Command::Straight),
            rp([x_back + lc_len, 0.0], Command::LaneChangeRight),
            rp([goal_x, 0.0], Command::Straight),
        ],
        plan: ExpertPlan {
            path,
            start_speed: v0,
            cruise: v0,
            slow_zones: vec![],
            yield_to: vec![],
            goal_s: goal_x + 1.0,
        },
    }
}

fn pedestrian_yield(rng: &mut ChaCha8Rng) -> Draft {
    let xp = rng.gen_range(26.0..32.0);
    let v_ped = rng.gen_range(0.9..1.2);
    let t_in = rng.gen_range(4.0..6.0);
    let y_start = -2.6 - v_ped * t_in;
    let ped = Agent {
        id: 0,
        kind: AgentKind::Pedestrian,
        length: 0.6,
        width: 0.6,
        height: 1.7,
        path: straight([xp, -12.0], [xp, 14.0]),
        start_s: y_start + 12.0,
        speed_profile: vec![[0.0, v_ped]],
    };
    let start_speed = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(3.0..5.0) };
    let goal = 60.0;
    Draft {
        agents: vec![ped],
        map: two_lane_road(-20.0, 200.0),
        obstacles: vec![],
        route: vec![rp([goal, 0.0], Command::Straight)],
        plan: ExpertPlan {
            path: PathBuilder::start([0.0, 0.0]).line_to([goal + 90.0, 0.0], 1.0).build(),
            start_speed,
            cruise: 5.5,
            slow_zones: vec![],
            yield_to: vec![0],
            goal_s: goal,
        },
    }
}

/// Builds one scenario of `family`, fully determined by `seed`.
pub fn generate(family: Family, seed: u64, cameras: &[CameraModel]) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    let draft = match family {
        Family::EmergencyBrake => emergency_brake(&mut rng),
        Family::ObstacleDetour => obstacle_detour(&mut rng),
        Family::UnprotectedLeft => unprotected_left(&mut rng),
        Family::Merge => merge(&mut rng),
        Family::Overtake => overtake(&mut rng),
        Family::PedestrianYield => pedestrian_yield(&mut rng),
    };
    let (expert, heading, speed) = drive_expert(&draft.plan, &draft.agents)?;
    let start = expert.points()[0];
    let scn = Scenario {
        id: format!("{}_{seed}", family.name()),
        family,
        seed,
        ego: EgoStart {
            pose: Pose::new(start[0], start[1], heading[0]),
            speed: draft.plan.start_speed,
        },
        agents: draft.agents,
        map: draft.map,
        obstacles: draft.obstacles,
        cameras: cameras.to_vec(),
        route: draft.route,
        expert,
        expert_heading: heading,
        expert_speed: speed,
        goal_s: draft.plan.goal_s,
    };
    scn.validate()?;
    Ok(scn)
}

/// `count` scenarios cycling through every family; scenario `i` uses seed
/// `base_seed * 1000 + i`.
pub fn generate_batch(count: usize, base_seed: u64, cameras: &[CameraModel]) -> Result<Vec<Scenario>> {
    (0..count)
        .map(|i| {
            let family = Family::ALL[i % Family::ALL.len()];
            generate(family, base_seed.wrapping_mul(1000).wrapping_add(i as u64), cameras)
        })
        .collect()
}
