//! Soft-modular conditional VAE estimating per-skill state densities.

mod cvae;
mod network;
mod routing;

pub use cvae::{
    gaussian_log_density, standard_normal, Cvae, CvaeCheckpoint, CvaeConfig, ElboBreakdown, ElboVars, LatentPosterior,
};
pub use network::{NetOutput, NetShape, SoftModularNet};
pub use routing::{
    check_routing_weights, modular_forward, route_initial, route_next, row_softmax, ModularLayer, RoutingState,
    ROUTING_ROW_TOL,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{check_param_gradients, ParamStore, Tensor2, LOG_STD_MAX, LOG_STD_MIN};
    use crate::parallel::Execution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(soft: bool) -> CvaeConfig {
        CvaeConfig {
            n_skills: 3,
            state_dim: 2,
            latent_dim: 2,
            modules: 2,
            layers: 2,
            width: 4,
            soft_modularization: soft,
            ..CvaeConfig::default()
        }
    }

    fn lin(store: &ParamStore, l: &crate::diffnet::DenseLayer, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        let mut y = vec![0.0; l.out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = b.get(0, o);
            for (i, xi) in x.iter().enumerate() {
                acc += w.get(o, i) * xi;
            }
            *yo = acc;
        }
        y
    }

    #[test]
    fn routing_matches_straight_line_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = CvaeConfig { width: 3, ..tiny(true) };
        let cvae = Cvae::new(cfg, &mut rng).unwrap();
        let store = &cvae.store;
        let s = [0.37, -1.2];
        let z = 1;
        let (f1, f2, w0, pairs) = cvae.encoder().routing_layers();

        // Straight-line evaluation of the recurrence.
        let u = lin(store, &f1, &s);
        let v = lin(store, &f2, &[0.0, 1.0, 0.0]);
        let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a * b).collect();
        let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
        let mut p = lin(store, &w0, &uv.iter().map(|x| relu(*x)).collect::<Vec<_>>());
        let mut expected = vec![p.clone()];
        for (g, w) in &pairs {
            let gp = lin(store, g, &p);
            let act: Vec<f64> = gp.iter().zip(&uv).map(|(a, b)| relu(a * b)).collect();
            p = lin(store, w, &act);
            expected.push(p.clone());
        }

        let via_fn = {
            let p1 = route_initial(store, &u, &v, &w0, 2).unwrap();
            let p2 = route_next(store, &p1, &u, &v, &pairs[0].0, &pairs[0].1).unwrap();
            vec![p1, p2]
        };
        let state = cvae.encoder_routing(&s, z).unwrap().unwrap();
        state.check_normalized().unwrap();
        for (l, exp) in expected.iter().enumerate() {
            for (i, e) in exp.iter().enumerate() {
                assert!((via_fn[l].data()[i] - e).abs() < 1e-12);
                assert!((state.logits[l].data()[i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_module_equals_plain_network() {
        let on = CvaeConfig {
            modules: 1,
            ..tiny(true)
        };
        let off = CvaeConfig {
            modules: 1,
            ..tiny(false)
        };
        let a = Cvae::new(on, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = Cvae::new(off, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.store, b.store);
        let states = Tensor2::from_rows(&[[0.1, 0.2], [-0.5, 0.9], [1.0, -1.0]]).unwrap();
        let noise = Tensor2::from_rows(&[[0.3, -0.1], [1.0, 0.5], [-0.7, 0.0]]).unwrap();
        let ea = a.elbo_batch(&states, &[0, 1, 2], &noise).unwrap();
        let eb = b.elbo_batch(&states, &[0, 1, 2], &noise).unwrap();
        assert_eq!(ea, eb);
        let st = a.encoder_routing(&[0.1, 0.2], 0).unwrap().unwrap();
        assert_eq!(st.weights[0].data(), &[1.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Unit decoder variance keeps the loss O(1), so central differences are
        // not swamped by rounding on near-zero routing gradients.
        for (seed, soft) in (0..5).flat_map(|s| [(s, true), (s, false)]) {
            let cfg = CvaeConfig {
                sigma_dec: 1.0,
                ..tiny(soft)
            };
            let cvae = Cvae::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let states = standard_normal(4, 2, &mut rng);
            let noise = standard_normal(4, 2, &mut rng);
            let skills = [0, 2, 1, 2];
            let err =
                check_param_gradients(&cvae.store, |tape| cvae.loss_var(tape, &states, &skills, &noise), 1e-4).unwrap();
            assert!(err < 1e-4, "seed={seed} soft={soft} err={err}");
        }
    }

    #[test]
    fn encode_is_clamped_deterministic_and_skill_dependent() {
        let cvae = Cvae::new(tiny(true), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = [0.4, -0.3];
        let a = cvae.encode(&s, 0).unwrap();
        let b = cvae.encode(&s, 0).unwrap();
        let c = cvae.encode(&s, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for ls in &a.log_std {
            assert!((LOG_STD_MIN..=LOG_STD_MAX).contains(ls));
        }
        assert!(cvae.encode(&s, 3).is_err());
        assert!(cvae.encode(&[0.0], 0).is_err());
    }

    #[test]
    fn decode_log_density_examples() {
        // -2 ln(0.1 sqrt(2 pi)), evaluated independently: 2.767293119578746
        let v = gaussian_log_density(&[0.3, 0.4], &[0.3, 0.4], 0.1);
        assert!((v - 2.767_293_119_578_746).abs() < 1e-12, "{v}");
        let w = gaussian_log_density(&[1.0], &[0.0], 1.0);
        assert!((w + 1.418_938_533_204_672_7).abs() < 1e-12, "{w}");
        let cvae = Cvae::new(tiny(true), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(
            cvae.decode(&[0.1, 0.2], 1).unwrap(),
            cvae.decode(&[0.1, 0.2], 1).unwrap()
        );
        assert!(cvae.decode(&[0.1], 1).is_err());
    }

    #[test]
    fn elbo_breakdown_consistency() {
        let cvae = Cvae::new(tiny(true), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let s = [0.2, 0.1];
        let noise = [0.5, -0.2];
        let e = cvae.elbo(&s, 2, &noise).unwrap();
        assert!(e.kl >= 0.0);
        assert!(e.elbo <= e.recon);
        assert!((e.elbo - (e.recon - e.kl)).abs() < 1e-12);
        let post = cvae.encode(&s, 2).unwrap();
        assert!((post.kl_to_standard() - e.kl).abs() < 1e-12);

        let mut heavy = cvae.clone();
        heavy.config.beta = 5.0;
        let e5 = heavy.elbo(&s, 2, &noise).unwrap();
        assert!((e5.elbo - (e.recon - 5.0 * e.kl)).abs() < 1e-12);
    }

    #[test]
    fn all_skills_matches_individual_calls() {
        let cvae = Cvae::new(tiny(true), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let states = standard_normal(40, 2, &mut rng);
        let noise = standard_normal(40 * 3, 2, &mut rng);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let all = cvae.elbo_all_skills(&states, &noise, exec).unwrap();
            assert_eq!(all.shape(), (40, 3));
            for r in [0, 17, 39] {
                for z in 0..3 {
                    let e = cvae.elbo(states.row(r), z, noise.row(r * 3 + z)).unwrap();
                    assert!((all.get(r, z) - e.elbo).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny(true);
        cfg.learning_rate = 0.0;
        let mut cvae = Cvae::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let before = cvae.store.clone();
        let mut opt = cvae.new_optimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = standard_normal(8, 2, &mut rng);
        let loss = cvae.train_step(&mut opt, &states, &[0; 8], &mut rng).unwrap();
        assert!(loss.is_finite());
        assert_eq!(cvae.store, before);
        assert!(cvae.train_step(&mut opt, &Tensor2::zeros(0, 2), &[], &mut rng).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            CvaeConfig {
                n_skills: 1,
                ..tiny(true)
            },
            CvaeConfig {
                modules: 0,
                ..tiny(true)
            },
            CvaeConfig {
                beta: 0.0,
                ..tiny(true)
            },
            CvaeConfig {
                sigma_dec: -1.0,
                ..tiny(true)
            },
        ] {
            assert!(Cvae::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        }
    }
}
