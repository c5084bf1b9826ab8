use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scene::{default_rig, generate, Family};
use crate::test_support::{randomize, tiny_config};
use crate::training::observe;

fn scenario(f: Family, seed: u64) -> Scenario {
    generate(f, seed, &default_rig(48, 24)).unwrap()
}

#[test]
fn straight_step_advances_along_heading() {
    let s = BicycleState {
        x: 1.0,
        y: 2.0,
        heading: 0.3,
        speed: 2.0,
    };
    let n = bicycle_step(&s, &ControlCommand::default(), 0.1, 2.8);
    assert!((dist([s.x, s.y], [n.x, n.y]) - 0.2).abs() < 1e-12);
    assert!(((n.y - s.y).atan2(n.x - s.x) - 0.3).abs() < 1e-12);
    assert_eq!(n.speed, 2.0);
}

#[test]
fn standing_vehicle_does_not_turn() {
    let s = BicycleState {
        x: 0.0,
        y: 0.0,
        heading: 1.0,
        speed: 0.0,
    };
    let c = ControlCommand {
        steering: 0.5,
        acceleration: 0.0,
    };
    assert_eq!(bicycle_step(&s, &c, 0.1, 2.8).heading, 1.0);
}

#[test]
fn constant_steering_closes_the_circle() {
    let (wb, delta, v, dt) = (2.8, 0.3f64, 3.0, 0.01);
    let r = wb / delta.tan();
    let circumference = 2.0 * std::f64::consts::PI * r;
    let steps = (circumference / v / dt).round() as usize;
    let mut s = BicycleState {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        speed: v,
    };
    let c = ControlCommand {
        steering: delta,
        acceleration: 0.0,
    };
    let mut max_y: f64 = 0.0;
    for _ in 0..steps {
        s = bicycle_step(&s, &c, dt, wb);
        max_y = max_y.max(s.y);
    }
    assert!(dist([s.x, s.y], [0.0, 0.0]) < 0.01 * circumference);
    assert!((max_y - 2.0 * r).abs() < 0.01 * 2.0 * r);
}

#[test]
fn zero_acceleration_keeps_speed_and_full_braking_stops_on_time() {
    let (dt, a_max) = (0.1, 6.0);
    let mut s = BicycleState {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
        speed: 7.0,
    };
    for _ in 0..20 {
        s = bicycle_step(&s, &ControlCommand::default(), dt, 2.8);
        assert_eq!(s.speed, 7.0);
    }
    let brake = ControlCommand {
        steering: 0.0,
        acceleration: -a_max,
    };
    let mut t = 0.0;
    while s.speed > 0.0 {
        s = bicycle_step(&s, &brake, dt, 2.8);
        t += dt;
    }
    assert!((t - 7.0 / a_max).abs() <= dt + 1e-9);
}

#[test]
fn expert_oracle_completes_every_family() {
    let c = RunConfig::default();
    for f in Family::ALL {
        for seed in 0..3 {
            let scn = scenario(f, seed);
            let r = run_episode(&scn, Policy::Expert, &c).unwrap();
            assert_eq!(r.status, Status::Success, "{} {:?}", scn.id, r.status);
            assert_eq!(r.completion, 1.0);
        }
    }
}

#[test]
fn zero_planner_times_out() {
    let c = RunConfig::default();
    let scn = scenario(Family::ObstacleDetour, 1);
    let r = run_episode(&scn, Policy::Zero, &c).unwrap();
    assert_eq!(r.status, Status::Timeout);
    assert!(r.completion < 1.0);
    assert_eq!(r.trace.len(), 400);
}

#[test]
fn memory_slots_rotate_every_step() {
    let c = tiny_config();
    let m = Model::new(&c).unwrap();
    let scn = scenario(Family::Merge, 0);
    let path = scn.expert_path().unwrap();
    let mut bank = m.memory_bank().unwrap();
    let mut seen = Vec::new();
    for step in 0..10 {
        seen.push(bank.active);
        let k = step.min(scn.expert.len() - 1);
        let x = observe(&scn, &path, &scn.expert_pose(k), scn.expert_speed[k], step as f64 * 0.1, &c).unwrap();
        m.infer(&x, &mut bank, true).unwrap();
    }
    assert_eq!(seen, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
}

#[test]
fn corrupting_one_slot_only_touches_its_steps() {
    let c = tiny_config();
    let m = Model::new(&c).unwrap();
    let mut m = m;
    randomize(&mut m.store, 3, 0.3);
    let scn = scenario(Family::Overtake, 2);
    let path = scn.expert_path().unwrap();
    let inputs: Vec<_> = (0..20)
        .map(|k| observe(&scn, &path, &scn.expert_pose(k), scn.expert_speed[k], k as f64 * 0.1, &c).unwrap())
        .collect();
    let run = |corrupt: bool| {
        let mut bank = m.memory_bank().unwrap();
        let mut outs = Vec::new();
        for (step, x) in inputs.iter().enumerate() {
            if corrupt && step == 8 {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let slot = bank.slots[3].as_mut().unwrap();
                for v in slot.plan.features.data_mut().iter_mut().chain(slot.agent.features.data_mut()) {
                    *v += rng.gen_range(-1.0..1.0);
                }
            }
            outs.push(m.infer(x, &mut bank, true).unwrap().output);
        }
        outs
    };
    let (a, b) = (run(false), run(true));
    for (step, (x, y)) in a.iter().zip(&b).enumerate() {
        let affected = step >= 8 && step % 5 == 3;
        assert_eq!(x != y, affected, "step {step}");
    }
}

#[test]
fn model_episodes_are_deterministic() {
    let mut c = tiny_config();
    c.sim.time_budget_s = 3.0;
    let m = Model::new(&c).unwrap();
    let scn = scenario(Family::EmergencyBrake, 4);
    let p = Policy::Model {
        model: &m,
        style_on: true,
    };
    let a = run_episode(&scn, p, &c).unwrap();
    let b = run_episode(&scn, p, &c).unwrap();
    assert_eq!(a, b);
    assert!(!a.trace.is_empty());
}

#[test]
fn open_loop_l2_cases() {
    let spec = GranularitySpec::temporal(2.0, 6);
    let gt = WaypointSet::unpadded(spec.clone(), (1..=6).map(|k| [k as f64, 0.5]).collect());
    assert_eq!(open_loop_l2(&gt, &gt), Some(0.0));
    let shifted = WaypointSet::unpadded(spec.clone(), gt.waypoints.iter().map(|p| [p[0] + 1.0, p[1]]).collect());
    assert!((open_loop_l2(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
    let short = WaypointSet::unpadded(spec, vec![[0.0, 0.0]; 3]);
    assert_eq!(open_loop_l2(&short, &short), None);
}

#[test]
fn open_loop_l2_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = GranularitySpec::temporal(2.0, 6);
    for _ in 0..50 {
        let mut pts = || -> Vec<[f64; 2]> { (0..6).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect() };
        let (p, g) = (pts(), pts());
        let mut gt = WaypointSet::unpadded(spec.clone(), g.clone());
        gt.padded[3] = rng.gen_bool(0.5);
        let mut errs = Vec::new();
        for k in 0..4 {
            if !gt.padded[k] {
                errs.push(((p[k][0] - g[k][0]).powi(2) + (p[k][1] - g[k][1]).powi(2)).sqrt());
            }
        }
        let want = errs.iter().sum::<f64>() / errs.len() as f64;
        let got = open_loop_l2(&WaypointSet::unpadded(spec.clone(), p), &gt).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

fn result(status: Status, completion: f64, collisions: usize) -> EpisodeResult {
    EpisodeResult {
        scenario: "x".into(),
        status,
        completion,
        collisions,
        duration_s: 1.0,
        trace: Vec::new(),
        commands: Vec::new(),
    }
}

#[test]
fn aggregate_examples() {
    let all = vec![result(Status::Success, 1.0, 0); 3];
    assert_eq!(aggregate_metrics(&all).unwrap().success_rate, 1.0);
    let mixed = vec![
        result(Status::Success, 1.0, 0),
        result(Status::Success, 1.0, 0),
        result(Status::Success, 1.0, 0),
        result(Status::Collision, 1.0, 1),
    ];
    let s = aggregate_metrics(&mixed).unwrap();
    assert_eq!(s.success_rate, 0.75);
    assert!((s.driving_score - (3.0 + 0.5) / 4.0).abs() < 1e-12);
    let to = vec![
        result(Status::Timeout, 0.2, 0),
        result(Status::Success, 1.0, 0),
        result(Status::Timeout, 0.5, 0),
        result(Status::OffRoute, 0.1, 0),
    ];
    assert_eq!(aggregate_metrics(&to).unwrap().timeout_rate, 0.5);
    assert!(aggregate_metrics(&[]).is_err());
}

#[test]
fn trace_csv_has_one_row_per_step() {
    let c = RunConfig::default();
    let r = run_episode(&scenario(Family::Merge, 1), Policy::Expert, &c).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, &r.trace).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert_eq!(s.lines().count(), r.trace.len() + 1);
    assert!(s.starts_with(TRACE_CSV_HEADER));
}
