mod common;

use common::*;
use fedgp::federation::{
    aggregate_full, aggregate_sampled, client_stream, local_update, local_update_traced, run_federation,
    run_federation_with, select_clients, server_stream, ClientState, FederationConfig, Participation,
    ScheduleSpec,
};
use fedgp::gp::{self, GradScaling};
use fedgp::{Dataset, GPParams, KernelFamily, KernelSpec, ParamBox};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wide_box(n_ell: usize) -> ParamBox {
    ParamBox::from_ranges((0.05, 10.0), (0.01, 2.0), (0.01, 5.0), n_ell).unwrap()
}

fn toy_clients(sizes: &[usize], seed: u64) -> Vec<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes.iter().map(|&n| random_dataset(n, 2, &mut rng)).collect()
}

fn start() -> GPParams {
    GPParams::new(1.0, 0.5, vec![0.7])
}

fn config(seed: u64) -> FederationConfig {
    let mut cfg = FederationConfig::new(wide_box(1), seed);
    cfg.rounds = 6;
    cfg.local_steps = 3;
    cfg.lr_schedule = ScheduleSpec::InverseTime { beta1: 0.1 };
    cfg
}

#[test]
fn every_client_holds_the_aggregate_after_each_round() {
    let spec = KernelSpec::isotropic(KernelFamily::Matern32);
    let mut clients = ClientState::from_datasets(toy_clients(&[8, 12, 5], 1), 4, &start()).unwrap();
    let traces = run_federation_with(&spec, &mut clients, &config(3), |_, theta, cl| {
        assert!(cl.iter().all(|c| &c.params == theta));
        Ok(None)
    })
    .unwrap();
    assert_eq!(traces.len(), 6);
    assert!(clients.iter().all(|c| c.params == traces[5].aggregated));
    for (i, t) in traces.iter().enumerate() {
        assert_eq!(t.round, i + 1);
        assert_eq!(t.selected, vec![0, 1, 2]);
    }
}

/// Centralised projected SGD written out step by step.
fn centralized_sgd(spec: &KernelSpec, data: &Dataset, cfg: &FederationConfig, batch: usize) -> GPParams {
    let mut theta = start().to_vec();
    let beta1 = match cfg.lr_schedule {
        ScheduleSpec::InverseTime { beta1 } => beta1,
        _ => unreachable!(),
    };
    for c in 0..cfg.rounds {
        let mut rng = client_stream(cfg.seed, 0, c);
        for s in 0..cfg.local_steps {
            let idx = gp::sample_batch(data.len(), batch, &mut rng).unwrap();
            let p = GPParams::from_slice(&theta).unwrap();
            let g = gp::full_grad(spec, &p, &data.subset(&idx).unwrap()).unwrap();
            let t = (c * cfg.local_steps + s) as f64;
            let eta = beta1 / (1.0 + t);
            for (i, v) in theta.iter_mut().enumerate() {
                *v = (*v - eta * g[i]).clamp(cfg.param_box.lower()[i], cfg.param_box.upper()[i]);
            }
        }
    }
    GPParams::from_slice(&theta).unwrap()
}

#[test]
fn single_client_is_centralized_sgd() {
    let spec = KernelSpec::isotropic(KernelFamily::Rbf);
    let data = toy_clients(&[20], 2).remove(0);
    let cfg = config(9);
    let mut clients = ClientState::from_datasets(vec![data.clone()], 6, &start()).unwrap();
    assert_eq!(clients[0].weight, 1.0);
    let traces = run_federation(&spec, &mut clients, &cfg).unwrap();
    let expected = centralized_sgd(&spec, &data, &cfg, 6);
    for (a, b) in traces.last().unwrap().aggregated.to_vec().iter().zip(expected.to_vec()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn full_batch_aggregate_is_permutation_invariant() {
    let spec = KernelSpec::isotropic(KernelFamily::Matern52);
    let datasets = toy_clients(&[6, 9, 4, 7], 3);
    let cfg = config(5);
    let run = |order: &[usize]| {
        let ds: Vec<Dataset> = order.iter().map(|&i| datasets[i].clone()).collect();
        let mut clients = ClientState::from_datasets(ds, 100, &start()).unwrap();
        run_federation(&spec, &mut clients, &cfg).unwrap().pop().unwrap().aggregated
    };
    let a = run(&[0, 1, 2, 3]);
    let b = run(&[2, 0, 3, 1]);
    for (u, v) in a.to_vec().iter().zip(b.to_vec()) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn identical_clients_match_their_common_local_update() {
    let spec = KernelSpec::isotropic(KernelFamily::Rbf);
    let d = toy_clients(&[10], 4).remove(0);
    let mut cfg = config(1);
    cfg.rounds = 1;
    let mut clients = ClientState::from_datasets(vec![d.clone(), d.clone(), d], 100, &start()).unwrap();
    let trace = run_federation(&spec, &mut clients, &cfg).unwrap().remove(0);
    // Full batches in different orders: equal up to summation order.
    for (_, p) in &trace.local_params {
        for (u, v) in p.to_vec().iter().zip(trace.aggregated.to_vec()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let spec = KernelSpec::ard(KernelFamily::Rbf);
    let datasets = toy_clients(&[15, 30, 8, 22, 11], 6);
    let mut cfg = FederationConfig::new(wide_box(2), 42);
    cfg.rounds = 5;
    cfg.participation = Participation::Asynchronous { sample_clients: 3 };
    cfg.scaling = GradScaling::with_tau(2.0);
    let init = cfg.sample_initial();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut clients = ClientState::from_datasets(datasets.clone(), 8, &init).unwrap();
            run_federation(&spec, &mut clients, &cfg).unwrap()
        })
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    let bits = |t: &[fedgp::federation::RoundTrace]| -> Vec<u64> {
        t.iter().flat_map(|r| r.aggregated.to_vec()).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&a), bits(&b));

    let mut other = cfg.clone();
    other.seed = 43;
    let mut clients = ClientState::from_datasets(datasets.clone(), 8, &other.sample_initial()).unwrap();
    assert_ne!(run_federation(&spec, &mut clients, &other).unwrap(), a);
}

#[test]
fn asynchronous_rounds_train_each_selected_client_once() {
    let spec = KernelSpec::isotropic(KernelFamily::Rbf);
    let mut cfg = config(8);
    cfg.participation = Participation::Asynchronous { sample_clients: 4 };
    let mut clients = ClientState::from_datasets(toy_clients(&[5, 40, 5, 10, 7], 7), 4, &start()).unwrap();
    let traces = run_federation(&spec, &mut clients, &cfg).unwrap();
    let mut server = server_stream(8);
    let weights: Vec<f64> = clients.iter().map(|c| c.weight).collect();
    for t in &traces {
        assert_eq!(t.selected.len(), 4);
        assert_eq!(t.selected, select_clients(&weights, 4, &mut server).unwrap());
        let mut ids: Vec<usize> = t.local_params.iter().map(|(i, _)| *i).collect();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n);
        let slots: Vec<GPParams> = t
            .selected
            .iter()
            .map(|id| t.local_params.iter().find(|(i, _)| i == id).unwrap().1.clone())
            .collect();
        assert_eq!(t.aggregated, cfg.param_box.project(&aggregate_sampled(&slots).unwrap()).unwrap());
    }
}

#[test]
fn selection_frequencies_follow_weights() {
    let w = [0.1, 0.3, 0.6];
    let mut rng = server_stream(10);
    let draws = select_clients(&w, 30_000, &mut rng).unwrap();
    for (k, p) in w.iter().enumerate() {
        let f = draws.iter().filter(|&&d| d == k).count() as f64 / draws.len() as f64;
        assert!((f - p).abs() < 0.01, "client {k}: {f}");
    }
}

#[test]
fn aggregation_counts_duplicate_slots() {
    let p = |t1: f64| GPParams::new(t1, 0.5, vec![1.0]);
    let a = aggregate_sampled(&[p(1.0), p(1.0), p(2.5)]).unwrap();
    assert!((a.theta1 - 1.5).abs() < 1e-15);
    let b = wide_box(1);
    let f = aggregate_full(&[p(1.0), p(3.0)], &[1.0, 0.0], &b).unwrap();
    assert_eq!(f, p(1.0));
}

#[test]
fn step_counter_continues_across_calls() {
    let spec = KernelSpec::isotropic(KernelFamily::Matern12);
    let b = wide_box(1);
    let mut client = ClientState::from_datasets(toy_clients(&[12], 11), 4, &start()).unwrap().remove(0);
    let cfg = {
        let mut c = FederationConfig::new(b.clone(), 0);
        c.lr_schedule = ScheduleSpec::InverseTime { beta1: 0.3 };
        c
    };
    let sgd = cfg.local_sgd();
    let both = local_update(&spec, &client, 2, 7, &sgd, &mut client_stream(0, 0, 0)).unwrap();
    let mut rng = client_stream(0, 0, 0);
    client.params = local_update(&spec, &client, 1, 7, &sgd, &mut rng).unwrap();
    let split = local_update(&spec, &client, 1, 8, &sgd, &mut rng).unwrap();
    assert_eq!(both, split);
}

#[test]
fn validation_rejects_bad_federations() {
    let spec = KernelSpec::isotropic(KernelFamily::Rbf);
    let mut cfg = config(0);
    cfg.participation = Participation::Asynchronous { sample_clients: 2 };
    let mut clients = ClientState::from_datasets(toy_clients(&[5, 5], 0), 4, &start()).unwrap();
    assert!(run_federation(&spec, &mut clients, &cfg).is_err());

    let cfg = config(0);
    let mut clients = ClientState::from_datasets(toy_clients(&[5, 5], 0), 4, &start()).unwrap();
    clients[1].params = GPParams::new(2.0, 0.5, vec![0.7]);
    assert!(run_federation(&spec, &mut clients, &cfg).is_err());

    let outside = GPParams::new(50.0, 0.5, vec![0.7]);
    let mut clients = ClientState::from_datasets(toy_clients(&[5, 5], 0), 4, &outside).unwrap();
    assert!(run_federation(&spec, &mut clients, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iterates_stay_in_box_and_respect_clip_and_freeze(
        seed in 0u64..10_000,
        beta1 in 0.01f64..20.0,
        clip in 0.05f64..5.0,
        freeze in any::<bool>(),
        tau in proptest::option::of(0.5f64..10.0),
    ) {
        let spec = KernelSpec::ard(KernelFamily::Matern32);
        let b = wide_box(2);
        let mut cfg = FederationConfig::new(b.clone(), seed);
        cfg.rounds = 3;
        cfg.lr_schedule = ScheduleSpec::InverseTime { beta1 };
        cfg.clip_norm = Some(clip);
        cfg.freeze_lengthscales = freeze;
        cfg.scaling = tau.map_or(GradScaling::disabled(), GradScaling::with_tau);
        let init = cfg.sample_initial();
        let mut clients = ClientState::from_datasets(toy_clients(&[9, 14, 6], seed), 5, &init).unwrap();

        for c in &clients {
            let (p, grads) = local_update_traced(&spec, c, 4, 0, &cfg.local_sgd(), &mut client_stream(seed, c.id, 0)).unwrap();
            prop_assert!(b.contains(&p));
            for g in grads {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm <= clip * (1.0 + 1e-12));
                if freeze {
                    prop_assert!(g[2..].iter().all(|&v| v == 0.0));
                }
            }
        }

        let traces = run_federation(&spec, &mut clients, &cfg).unwrap();
        for t in &traces {
            prop_assert!(b.contains(&t.aggregated));
            for (_, p) in &t.local_params {
                prop_assert!(b.contains(p));
            }
            if freeze {
                prop_assert_eq!(&t.aggregated.lengthscales, &init.lengthscales);
            }
        }
    }
}
