//! Waypoint selection, driving-style consistency check, and conversion of
//! the selected waypoints into steering and acceleration.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::ControlConfig;
use crate::error::Result;
use crate::planning_head::{argmax, GranularityLayout, PlanningOutput};
use crate::trajectory::{dist, Point2, SpeedBins, WaypointSet};

/// Which set drives longitudinal control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Style,
    TemporalFallback,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Style => "style",
            SourceTag::TemporalFallback => "temporal_fallback",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedPlan {
    pub modality: usize,
    /// Densest spatial set, or the high-frequency temporal set when the
    /// layout has no spatial granularity.
    pub lateral: WaypointSet,
    pub longitudinal: WaypointSet,
    /// Predicted style bin, when the style head is on.
    pub bin: Option<usize>,
    pub source: SourceTag,
}

/// Mean implied speed of the set lies in `[lo, hi)`. Sets with fewer than
/// two unpadded waypoints never pass.
pub fn consistency_check(candidate: &WaypointSet, range: (f64, f64)) -> bool {
    if candidate.num_unpadded() < 2 {
        return false;
    }
    let v = candidate.implied_speeds();
    if v.is_empty() {
        return false;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    mean >= range.0 && mean < range.1
}

/// Picks the best modality, its dense spatial set for steering and, for the
/// speed, its high-frequency style set of the predicted bin if that set is
/// consistent with the bin, else its high-frequency temporal set.
pub fn select(out: &PlanningOutput, layout: &GranularityLayout, bins: &SpeedBins) -> Result<SelectedPlan> {
    let modality = argmax(&out.modality_scores);
    let hf = layout
        .high_frequency()
        .ok_or_else(|| crate::Error::Layout("control needs a temporal granularity".into()))?;
    let temporal = out.set(modality, hf);
    let lateral = match layout.dense_spatial() {
        Some(j) => out.set(modality, j),
        None => temporal.clone(),
    };
    let bin = out.style_scores.as_ref().map(|s| argmax(&s[modality]));
    let style = bin.and_then(|b| layout.style(b, hf).map(|j| (b, out.set(modality, j))));
    let (longitudinal, source) = match style {
        Some((b, set)) if consistency_check(&set, bins.range(b)) => (set, SourceTag::Style),
        _ => (temporal, SourceTag::TemporalFallback),
    };
    Ok(SelectedPlan {
        modality,
        lateral,
        longitudinal,
        bin,
        source,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    /// Front wheel angle, radians, positive to the left.
    pub steering: f64,
    /// m/s².
    pub acceleration: f64,
}

/// Point at arc length `s` along the polyline that starts at the ego origin
/// and runs through `path`; the last point if the polyline is shorter.
fn lookahead_point(path: &[Point2], s: f64) -> Point2 {
    let mut prev = [0.0, 0.0];
    let mut acc = 0.0;
    for &p in path {
        let d = dist(prev, p);
        if acc + d >= s && d > 0.0 {
            let u = (s - acc) / d;
            return [prev[0] + u * (p[0] - prev[0]), prev[1] + u * (p[1] - prev[1])];
        }
        acc += d;
        prev = p;
    }
    prev
}

/// Pure pursuit on ego-frame waypoints.
pub fn lateral_control(speed: f64, path: &[Point2], cfg: &ControlConfig) -> f64 {
    let ld = (cfg.lookahead_gain * speed).clamp(cfg.lookahead_min, cfg.lookahead_max);
    let p = lookahead_point(path, ld);
    let d = dist([0.0, 0.0], p);
    if !(d > 1e-6) {
        return 0.0;
    }
    let alpha = p[1].atan2(p[0]);
    let delta = (2.0 * cfg.wheelbase * alpha.sin()).atan2(d);
    if delta.is_finite() {
        delta.clamp(-cfg.max_steer, cfg.max_steer)
    } else {
        0.0
    }
}

/// Speed controller with an anti-windup integrator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pid {
    pub integral: f64,
}

impl Pid {
    pub fn step(&mut self, target: f64, speed: f64, dt: f64, cfg: &ControlConfig) -> f64 {
        let e = target - speed;
        self.integral = (self.integral + e * dt).clamp(-cfg.integral_limit, cfg.integral_limit);
        let a = cfg.kp * e + cfg.ki * self.integral;
        if a.is_finite() {
            a.clamp(-cfg.max_decel, cfg.max_accel)
        } else {
            0.0
        }
    }
}

/// Waypoints stay within `stop_span_m` of the ego.
pub fn is_stop(set: &WaypointSet, cfg: &ControlConfig) -> bool {
    set.waypoints.iter().all(|&p| dist([0.0, 0.0], p) < cfg.stop_span_m)
}

/// Speed of the first segment, from the ego to the first waypoint.
pub fn target_speed(set: &WaypointSet) -> f64 {
    set.waypoints.first().map_or(0.0, |&p| dist([0.0, 0.0], p) * set.spec.frequency())
}

/// Tracks the first segment speed of time-indexed waypoints; a stop plan
/// brakes to standstill.
pub fn longitudinal_control(speed: f64, set: &WaypointSet, pid: &mut Pid, dt: f64, cfg: &ControlConfig) -> f64 {
    if is_stop(set, cfg) {
        pid.integral = 0.0;
        if speed <= 0.0 {
            return 0.0;
        }
        return -(cfg.kp * speed + 1.0).min(cfg.max_decel);
    }
    pid.step(target_speed(set), speed, dt, cfg)
}

/// Steering from the lateral set and acceleration from the longitudinal
/// set.
pub fn control(speed: f64, plan: &SelectedPlan, pid: &mut Pid, dt: f64, cfg: &ControlConfig) -> ControlCommand {
    ControlCommand {
        steering: lateral_control(speed, &plan.lateral.waypoints, cfg),
        acceleration: longitudinal_control(speed, &plan.longitudinal, pid, dt, cfg),
    }
}

/// One row of the command trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub t: f64,
    pub command: ControlCommand,
    pub source: SourceTag,
    pub modality: usize,
    pub bin: Option<usize>,
}

pub const COMMAND_CSV_HEADER: &str = "t,steering,acceleration,source,modality,bin";

pub fn write_command_csv<W: Write>(mut w: W, records: &[CommandRecord]) -> Result<()> {
    writeln!(w, "{COMMAND_CSV_HEADER}")?;
    for r in records {
        let bin = r.bin.map_or(String::new(), |b| b.to_string());
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t, r.command.steering, r.command.acceleration, r.source, r.modality, bin
        )?;
    }
    Ok(())
}
