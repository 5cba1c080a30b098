use chunklab::envs::{self, snap, TaskSpec, GRID_RESOLUTION};
use chunklab::{Action, RobotState};
use proptest::prelude::*;

fn grid_action(bound: f64) -> impl Strategy<Value = Vec<f64>> {
    let steps = (bound / GRID_RESOLUTION) as i64;
    prop::collection::vec((-steps..=steps).prop_map(|k| k as f64 * GRID_RESOLUTION), 2)
}

proptest! {
    #[test]
    fn rollforward_matches_stepping(seed in 0u64..1000, acts in prop::collection::vec(grid_action(0.5), 0..40)) {
        let task = TaskSpec::chase();
        let (mut s, _, start) = envs::reset(&task, seed);
        let mut sum = start.clone();
        for a in acts.iter().take(task.episode_len as usize) {
            let a = Action(a.clone());
            s = envs::step(&task, &s, &a).unwrap();
            sum = sum.advanced(&a);
        }
        prop_assert_eq!(s.robot, sum);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories(seed in 0u64..1000, acts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..30)) {
        let task = TaskSpec::catch();
        let run = || {
            let (mut s, _, _) = envs::reset(&task, seed);
            let mut out = vec![s.clone()];
            for a in &acts {
                s = envs::step(&task, &s, &Action(a.clone())).unwrap();
                out.push(s.clone());
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn admissible_is_idempotent_and_bounded(a in prop::collection::vec(-3.0f64..3.0, 2)) {
        let task = TaskSpec::reach();
        let once = task.admissible(&Action(a));
        prop_assert_eq!(task.admissible(&once), once.clone());
        prop_assert!(once.0.iter().all(|v| v.abs() <= task.bounds.action && snap(*v) == *v));
    }
}

#[test]
fn events_are_never_visible_early() {
    let task = TaskSpec::catch();
    let event = &task.event_schedule[0];
    let v: Vec<f64> = event.velocity.clone().unwrap().into_iter().map(snap).collect();
    for seed in 0..20 {
        let (mut s, o, _) = envs::reset(&task, seed);
        assert_ne!(&o.features[2..], v.as_slice());
        while s.tick < task.episode_len {
            s = envs::step(&task, &s, &Action::zeros(2)).unwrap();
            let o = envs::observe(&task, &s);
            assert_eq!(&o.features[2..] == v.as_slice(), s.tick >= event.tick, "tick {}", s.tick);
        }
    }
}

#[test]
fn quantized_env_tracks_micro_env_at_block_starts() {
    let task = TaskSpec::chase();
    let q = 2;
    let qt = task.quantized(q).unwrap();
    let (mut micro, _, _) = envs::reset(&task, 4);
    let (mut macro_s, _, _) = envs::reset(&qt, 4);
    assert_eq!(micro, macro_s);
    for i in 0..qt.episode_len {
        let a = Action(vec![0.25, -0.125]);
        for _ in 0..q {
            micro = envs::step(&task, &micro, &a).unwrap();
        }
        macro_s = envs::step(&qt, &macro_s, &Action(vec![0.5, -0.25])).unwrap();
        assert_eq!(micro.robot, macro_s.robot, "block {i}");
        assert_eq!(micro.target, macro_s.target, "block {i}");
    }
    assert_eq!(RobotState(vec![0.0]).dim(), 1);
}
