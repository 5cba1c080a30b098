use chunklab::data::{self, Dataset};
use chunklab::envs::{self, TaskSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn chase_demo_generation_success_rate() {
    let (ds, report) = data::generate_dataset(&TaskSpec::chase(), 200, 0).unwrap();
    assert_eq!(ds.len(), 200);
    assert!(report.success_rate() >= 0.95, "expert success {}", report.success_rate());
    assert!(ds.trajectories.iter().all(|t| t.delta_violation().is_none()));
}

#[test]
fn delta_frequencies_within_three_sigma() {
    let (ds, _) = data::generate_dataset(&TaskSpec::reach(), 5, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let batch = data::sample_batch(&ds, n, 3, 8, &mut rng).unwrap();
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for d in 0..=3 {
        let c = batch.iter().filter(|s| s.delta == d).count() as f64;
        assert!((c - n as f64 * p).abs() <= 3.0 * sigma, "delta {d}: {c}");
    }
}

fn arb_trajectory() -> impl Strategy<Value = data::Trajectory> {
    (1usize..40, any::<u64>()).prop_map(|(len, seed)| {
        let task = TaskSpec::reach();
        let (mut s, _, _) = envs::reset(&task, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::new();
        for _ in 0..len {
            use rand::Rng;
            let raw = chunklab::Action((0..2).map(|_| rng.random_range(-0.3..0.3)).collect());
            let a = task.admissible(&raw);
            steps.push(data::Step { obs: envs::observe(&task, &s), state: s.robot.clone(), action: a.clone() });
            s = envs::step(&task, &s, &a).unwrap();
        }
        data::Trajectory { task: task.name, seed, steps }
    })
}

proptest! {
    #[test]
    fn quantization_telescopes(traj in arb_trajectory(), q in 1usize..6) {
        let qt = data::quantize_trajectory(&traj, q).unwrap();
        prop_assert_eq!(qt.len(), traj.len() / q);
        prop_assert!(qt.delta_violation().is_none());
        // brute-force prefix sums over micro actions
        let mut micro = traj.steps[0].state.0.clone();
        let mut macro_sum = micro.clone();
        for i in 0..qt.len() {
            for k in i * q..(i + 1) * q {
                for d in 0..2 {
                    micro[d] += traj.steps[k].action.0[d];
                }
            }
            for d in 0..2 {
                macro_sum[d] += qt.steps[i].action.0[d];
            }
            prop_assert_eq!(&macro_sum, &micro);
        }
        if !qt.is_empty() {
            let end = qt.len() * q;
            prop_assert_eq!(qt.state_at(qt.len()), traj.state_at(end));
        }
    }

    #[test]
    fn save_load_roundtrip(trajs in prop::collection::vec(arb_trajectory(), 0..4)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = Dataset { trajectories: trajs };
        data::save_dataset(&ds, &path).unwrap();
        prop_assert_eq!(data::load_dataset(&path).unwrap(), ds);
    }
}
