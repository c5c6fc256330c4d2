use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sd3::agent::{
    actor_critic_update, q_learning_update, sample_skill, AcBatch, ActorCritic, ActorCriticConfig, ReplayBuffer,
    TabularPolicy, TabularSample,
};
use sd3::diffnet::Tensor2;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn buffer_keeps_the_newest_items(cap in 1usize..40, pushes in 0usize..120) {
        let mut buf = ReplayBuffer::new(cap).unwrap();
        for i in 0..pushes {
            buf.push(i);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        prop_assert_eq!(buf.inserted(), pushes as u64);
        let mut held: Vec<usize> = buf.items().to_vec();
        held.sort_unstable();
        let expect: Vec<usize> = (pushes.saturating_sub(cap)..pushes).collect();
        prop_assert_eq!(held, expect);
    }
}

#[test]
fn buffer_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(10).unwrap();
    for i in 0..25 {
        buf.push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws / 50 {
        for i in buf.sample_indices(50, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    assert!(chi2 < 27.88, "chi-square {chi2}, counts {counts:?}");
}

#[test]
fn skills_are_drawn_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 10];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_skill(10, &mut rng).unwrap()] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.1).abs() <= 0.005, "frequency {f}");
    }
}

fn sweep(policy: &mut TabularPolicy, next: impl Fn(usize, usize) -> usize, reward: impl Fn(usize) -> f64) {
    let batch: Vec<TabularSample> = (0..policy.n_states)
        .flat_map(|s| (0..policy.n_actions).map(move |a| (s, a)))
        .map(|(s, a)| TabularSample {
            state: s,
            skill: 0,
            action: a,
            reward: reward(s),
            next_state: next(s, a),
        })
        .collect();
    q_learning_update(policy, &batch).unwrap();
}

#[test]
fn constant_reward_converges_to_geometric_value() {
    // Deterministic 3x3 grid, actions move right/left/down/up with clamping.
    let next = |s: usize, a: usize| {
        let (x, y) = (s % 3, s / 3);
        let (x, y) = match a {
            0 => ((x + 1).min(2), y),
            1 => (x.saturating_sub(1), y),
            2 => (x, (y + 1).min(2)),
            _ => (x, y.saturating_sub(1)),
        };
        y * 3 + x
    };
    let mut policy = TabularPolicy::new(9, 1, 4, 0.0, 1.0, 0.9).unwrap();
    for _ in 0..200 {
        sweep(&mut policy, next, |_| 1.0);
    }
    for s in 0..9 {
        for a in 0..4 {
            assert!((policy.q(s, 0, a) - 10.0).abs() < 1e-4);
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn two_state_mdp_matches_value_iteration() {
    // Action 0 stays, action 1 switches; only state 1 pays.
    let next = |s: usize, a: usize| if a == 0 { s } else { 1 - s };
    let reward = |s: usize| if s == 1 { 1.0 } else { 0.0 };
    let gamma = 0.9;
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..1000 {
        let mut q2 = q;
        for s in 0..2 {
            for a in 0..2 {
                let n = next(s, a);
                q2[s][a] = reward(s) + gamma * q[n][0].max(q[n][1]);
            }
        }
        q = q2;
    }
    let mut policy = TabularPolicy::new(2, 1, 2, 0.0, 1.0, gamma).unwrap();
    for _ in 0..400 {
        sweep(&mut policy, next, reward);
    }
    for s in 0..2 {
        for a in 0..2 {
            assert!((policy.q(s, 0, a) - q[s][a]).abs() < 1e-6, "Q({s},{a})");
        }
    }
    assert!((q[1][0] - 10.0).abs() < 1e-9);
    assert!((q[0][1] - 9.0).abs() < 1e-9);
}

#[test]
fn critic_regresses_to_zero_without_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = ActorCriticConfig {
        hidden: 16,
        critic_lr: 3e-3,
        actor_lr: 0.0,
        gamma: 0.5,
        tau: 0.1,
        ..ActorCriticConfig::default()
    };
    let mut ac = ActorCritic::new(2, 3, 2, cfg, &mut rng).unwrap();
    let n = 32;
    let states = sd3::density::standard_normal(n, 2, &mut rng);
    let next_states = sd3::density::standard_normal(n, 2, &mut rng);
    let skills: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let actions = ac.act_batch(&states, &skills).unwrap();
    let batch = AcBatch {
        states: states.clone(),
        skills: skills.clone(),
        actions: actions.clone(),
        rewards: vec![0.0; n],
        next_states,
    };
    let mean_abs = |ac: &ActorCritic| {
        let q: Tensor2 = ac.q_values(&ac.critic_store, &states, &skills, &actions).unwrap();
        q.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64
    };
    let start = mean_abs(&ac);
    for _ in 0..1500 {
        actor_critic_update(&mut ac, &batch).unwrap();
    }
    let end = mean_abs(&ac);
    assert!(end < 0.05, "mean |Q| went from {start} to {end}");
}
