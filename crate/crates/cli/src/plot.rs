//! Bird's-eye SVG of one frame in the ego frame: map, agents, ground truth
//! and predicted waypoints colored by type.

use std::fmt::Write;

use hipad_core::planning_head::PlanningOutput;
use hipad_core::scene::{AgentTruth, FrameTruth};
use hipad_core::trajectory::{GranularityKind, GroundTruth, Point2};

pub const SPATIAL_COLOR: &str = "skyblue";
pub const TEMPORAL_COLOR: &str = "darkorange";
pub const STYLE_COLOR: &str = "mediumorchid";
pub const GT_COLOR: &str = "dimgray";

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 640.0;
const SCALE: f64 = 12.0;
const ORIGIN_Y: f64 = HEIGHT - 120.0;

/// Ego x points up the page, ego y to the left.
fn px(p: Point2) -> (f64, f64) {
    (WIDTH / 2.0 - p[1] * SCALE, ORIGIN_Y - p[0] * SCALE)
}

fn kind_color(kind: GranularityKind) -> &'static str {
    match kind {
        GranularityKind::Temporal => TEMPORAL_COLOR,
        GranularityKind::Spatial => SPATIAL_COLOR,
        GranularityKind::DrivingStyle => STYLE_COLOR,
    }
}

fn kind_label(kind: GranularityKind) -> &'static str {
    match kind {
        GranularityKind::Temporal => "temporal waypoints",
        GranularityKind::Spatial => "spatial waypoints",
        GranularityKind::DrivingStyle => "driving-style waypoints",
    }
}

fn polyline(svg: &mut String, pts: &[Point2], stroke: &str, width: f64, class: &str) {
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = px(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline class="{class}" points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#,
        coords.join(" ")
    );
}

fn dots(svg: &mut String, pts: &[Point2], fill: &str, r: f64, class: &str) {
    for &p in pts {
        let (x, y) = px(p);
        let _ = writeln!(svg, r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}"/>"#);
    }
}

fn agent(svg: &mut String, a: &AgentTruth) {
    let [x, y, l, w, h] = a.bbox;
    let (c, s) = (h.cos(), h.sin());
    let corners: Vec<Point2> = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .iter()
        .map(|&(u, v)| {
            let (dx, dy) = (u * l / 2.0, v * w / 2.0);
            [x + dx * c - dy * s, y + dx * s + dy * c]
        })
        .collect();
    polyline(svg, &corners, "firebrick", 1.5, "agent");
}

/// Renders the frame. `pred` is drawn for its best-scoring modality.
pub fn render(truth: &FrameTruth, gt: &GroundTruth, pred: Option<&PlanningOutput>, hash: &str) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, "<!-- config_hash: {hash} -->");
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    for line in &truth.map {
        polyline(&mut svg, line, "lightgray", 1.0, "map");
    }
    for a in &truth.agents {
        agent(&mut svg, a);
    }
    let ego: Vec<Point2> = vec![[2.4, 0.95], [2.4, -0.95], [-2.4, -0.95], [-2.4, 0.95], [2.4, 0.95]];
    polyline(&mut svg, &ego, "black", 2.0, "ego");
    polyline(&mut svg, truth.future.points(), GT_COLOR, 1.0, "gt-future");
    for set in &gt.sets {
        let pts: Vec<Point2> = set.waypoints.iter().zip(&set.padded).filter(|(_, &p)| !p).map(|(w, _)| *w).collect();
        dots(&mut svg, &pts, GT_COLOR, 1.5, "gt");
    }
    let mut kinds = Vec::new();
    if let Some(out) = pred {
        let m = out.best_modality();
        for (spec, pts) in out.specs.iter().zip(&out.waypoints[m]) {
            let color = kind_color(spec.kind);
            dots(&mut svg, pts, color, 3.0, &format!("pred {}", spec.id()));
            if !kinds.contains(&spec.kind) {
                kinds.push(spec.kind);
            }
        }
    }
    let mut entries: Vec<(&str, &str)> = vec![(GT_COLOR, "ground truth")];
    entries.extend(kinds.iter().map(|&k| (kind_color(k), kind_label(k))));
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, (color, label)) in entries.iter().enumerate() {
        let y = 20.0 + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<circle cx="16" cy="{y}" r="5" fill="{color}"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="28" y="{}" font-family="sans-serif" font-size="12">{label}</text>"#,
            y + 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}
