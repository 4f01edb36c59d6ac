//! PPO, VAE and IDQN building blocks against direct formulas and finite
//! differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use signal_lab::agents::{
    actor_objective, clipped_surrogate_loss, critic_objective, deltas, epsilon_at, gae,
    select_action, td_targets, ActMode, FixedTimeController, IdqnConfig, Net, PpoConfig,
    Trajectory,
};
use signal_lab::autodiff::{ParamStore, Tape, Tensor};
use signal_lab::env::OBS_DIM;
use signal_lab::vae::{
    kl_divergence, reparameterize, reparameterize_with, vae_loss, Vae, VaeConfig,
};

// ---- finite differences over parameters -------------------------------------

/// Compares analytic parameter gradients with central differences on up to
/// `coords` randomly chosen scalars; returns the relative error of the two
/// gradient vectors. Parameters are jittered first: freshly initialised
/// biases are exactly zero, which parks dead-input ReLUs right on their kink.
fn param_gradcheck(
    store: &mut ParamStore,
    coords: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&ParamStore) -> (f64, Vec<Tensor>),
) -> f64 {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let (_, grads) = loss(store);
    let sizes: Vec<usize> = store.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for _ in 0..coords.min(total) {
        let mut k = rng.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let orig = store.tensors()[t].data()[k];
        store.tensors_mut()[t].data_mut()[k] = orig + h;
        let up = loss(store).0;
        store.tensors_mut()[t].data_mut()[k] = orig - h;
        let down = loss(store).0;
        store.tensors_mut()[t].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].data()[k];
        diff += (numeric - analytic).powi(2);
        na += analytic * analytic;
        nn += numeric * numeric;
    }
    let norm = na.sqrt() + nn.sqrt();
    if norm < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / norm
    }
}

fn small_vae_cfg() -> VaeConfig {
    VaeConfig {
        in_channels: 4,
        channels: [3, 4, 5],
        latent_dim: 3,
        lr: 1e-3,
    }
}

fn random_tensor(
    shape: Vec<usize>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut ChaCha8Rng) -> f64,
) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f(rng)).collect()).unwrap()
}

#[test]
fn vae_loss_gradients_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let grids = [(2, 2), (3, 3), (4, 2), (3, 5), (4, 4)];
    for inst in 0..20 {
        let (r, c) = grids[inst % grids.len()];
        let vae = Vae::new(r, c, small_vae_cfg(), inst as u64).unwrap();
        let n = 1 + inst % 3;
        let x = random_tensor(vec![n, 4, r, c], &mut rng, |g| g.random::<f64>());
        let eps = random_tensor(vec![n, 3], &mut rng, |g| g.sample(StandardNormal));
        let mut store = vae.params().clone();
        let rel = param_gradcheck(&mut store, 60, &mut rng, |s| {
            let mut v = vae.clone();
            v.params_mut().copy_from(s);
            let (l, g) = v.loss_and_grads(&x, &eps).unwrap();
            (l.total, g)
        });
        assert!(
            rel < 1e-4,
            "instance {inst} ({r}x{c}, batch {n}): relative error {rel:e}"
        );
    }
}

#[test]
fn actor_and_critic_loss_gradients_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let cfg = PpoConfig {
        entropy_coef: 0.01,
        ..PpoConfig::default()
    };
    for inst in 0..20 {
        let (d, h, a, n) = (3 + inst % 5, 4 + inst % 3, 2 + inst % 7, 4 + inst % 9);
        let actor = Net::three_layer("pi", d, h, a, 1e-3, &mut rng);
        let critic = Net::three_layer("v", d, h, 1, 1e-3, &mut rng);
        let x = random_tensor(vec![n, d], &mut rng, |g| g.random_range(-1.0..1.0));
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..a)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // old log-probs near the current ones so both clip regimes show up
        let probs = actor.probabilities(&x).unwrap();
        let logp_old: Vec<f64> = (0..n)
            .map(|i| probs.data()[i * a + actions[i]].ln() + rng.random_range(-0.4..0.4))
            .collect();
        let mut store = actor.store.clone();
        let rel = param_gradcheck(&mut store, 50, &mut rng, |s| {
            let mut net = actor.clone();
            net.store.copy_from(s);
            let mut tape = Tape::new();
            let b = net.store.bind(&mut tape);
            let (loss, _) =
                actor_objective(&net, &mut tape, &b, &x, &actions, &logp_old, &adv, &cfg).unwrap();
            let v = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (v, net.store.collect_grads(&b, &g))
        });
        assert!(rel < 1e-4, "actor instance {inst}: {rel:e}");

        let y = random_tensor(vec![n, 1], &mut rng, |g| g.sample(StandardNormal));
        let mut store = critic.store.clone();
        let rel = param_gradcheck(&mut store, 50, &mut rng, |s| {
            let mut net = critic.clone();
            net.store.copy_from(s);
            let mut tape = Tape::new();
            let b = net.store.bind(&mut tape);
            let loss = critic_objective(&net, &mut tape, &b, &x, &y).unwrap();
            let v = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (v, net.store.collect_grads(&b, &g))
        });
        assert!(rel < 1e-4, "critic instance {inst}: {rel:e}");
    }
}

// ---- clipped surrogate --------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn clip_zeroes_exactly_the_clipped_samples(
        rows in proptest::collection::vec((-1.0f64..1.0, -3.0f64..3.0, -3.0f64..3.0), 1..40),
    ) {
        let eps = 0.2;
        let logp_new: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let logp_old: Vec<f64> = rows.iter().map(|r| r.1 - r.0).collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let mut tape = Tape::new();
        let lp = tape.leaf(Tensor::vector(logp_new.clone()));
        let loss = clipped_surrogate_loss(&mut tape, lp, &logp_old, &adv, eps).unwrap();
        let n = rows.len() as f64;
        let g = tape.backward(loss).unwrap().get(lp).unwrap().clone();
        let mut expect_loss = 0.0;
        for i in 0..rows.len() {
            let ratio = (logp_new[i] - logp_old[i]).exp();
            let a = adv[i];
            let active = (a > 0.0 && ratio > 1.0 + eps) || (a < 0.0 && ratio < 1.0 - eps);
            expect_loss -= (ratio * a).min(ratio.clamp(1.0 - eps, 1.0 + eps) * a) / n;
            if active {
                prop_assert_eq!(g.data()[i], 0.0, "sample {} ratio {} adv {}", i, ratio, a);
            } else {
                // d/dlogp of -(ratio * a)/n
                let want = -ratio * a / n;
                prop_assert!((g.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0), "sample {}", i);
            }
        }
        prop_assert!((tape.value(loss).item() - expect_loss).abs() < 1e-12 * expect_loss.abs().max(1.0));
    }
}

#[test]
fn unit_ratio_makes_surrogate_the_mean_advantage() {
    let adv = [0.5, -1.0, 2.0, 0.25];
    let logp = [-0.3, -1.2, -2.0, -0.7];
    let mut tape = Tape::new();
    let lp = tape.leaf(Tensor::vector(logp.to_vec()));
    let loss = clipped_surrogate_loss(&mut tape, lp, &logp, &adv, 0.2).unwrap();
    assert!((tape.value(loss).item() + adv.iter().sum::<f64>() / 4.0).abs() < 1e-15);
}

// ---- advantages ----------------------------------------------------------------

fn gae_direct(delta: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    (0..delta.len())
        .map(|t| {
            (t..delta.len())
                .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
                .sum()
        })
        .collect()
}

fn traj_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64, f64)> {
    (1usize..=50).prop_flat_map(|t| {
        (
            proptest::collection::vec(-5.0f64..5.0, t),
            proptest::collection::vec(-5.0f64..5.0, t),
            0.01f64..=1.0,
            prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn gae_recursion_matches_direct_sum((rewards, values, gamma, lambda) in traj_strategy()) {
        let mut v = values.clone();
        v.push(0.0);
        let d = deltas(&rewards, &v, gamma).unwrap();
        let rec = gae(&d, gamma, lambda);
        let direct = gae_direct(&d, gamma, lambda);
        for (a, b) in rec.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        if lambda == 0.0 {
            prop_assert_eq!(&rec, &d);
        }
        if lambda == 1.0 {
            // discounted return minus the baseline
            for t in 0..rewards.len() {
                let ret: f64 = (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
                prop_assert!((rec[t] - (ret - values[t])).abs() < 1e-10);
            }
        }
        // the trajectory path agrees and builds targets as advantage + value
        let mut tr = Trajectory::default();
        for t in 0..rewards.len() {
            tr.push(vec![], vec![], 0, 0.0, values[t]);
            tr.record_outcome(rewards[t], t + 1 == rewards.len());
        }
        let cfg = PpoConfig { gamma, lambda, ..PpoConfig::default() };
        let (adv, targets) = tr.advantages(&cfg).unwrap();
        for t in 0..rewards.len() {
            prop_assert!((adv[t] - direct[t]).abs() < 1e-10);
            prop_assert!((targets[t] - (adv[t] + values[t])).abs() < 1e-12);
        }
    }
}

#[test]
fn deltas_reject_wrong_value_count() {
    assert!(deltas(&[1.0, 2.0], &[0.0, 0.0], 0.9).is_err());
}

// ---- latent space ------------------------------------------------------------

/// KL(N(mu, s^2) || N(0, 1)) by Simpson quadrature over +-12 sd.
fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let s = (0.5 * logvar).exp();
    let (a, b, n) = (mu - 12.0 * s, mu + 12.0 * s, 4000);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let lp = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        lq.exp() * (lq - lp)
    };
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn kl_is_non_negative(v in proptest::collection::vec((-5.0f64..5.0, -6.0f64..4.0), 1..20)) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(kl_divergence(&mu, &lv) >= 0.0);
    }
}

#[test]
fn kl_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let lv: f64 = rng.random_range(-2.0..1.5);
        let q = kl_quadrature(mu, lv);
        let k = kl_divergence(&[mu], &[lv]);
        assert!((q - k).abs() < 1e-8, "mu {mu} lv {lv}: {q} vs {k}");
    }
    assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
}

#[test]
fn reparameterized_samples_have_the_right_moments() {
    let mu = [1.5, -0.5];
    let lv = [0.8f64, -1.2];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 200_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let s = reparameterize(&mu, &lv, &mut rng);
        for d in 0..2 {
            assert_eq!(s.z[d], mu[d] + s.eps[d] * (lv[d] / 2.0).exp());
            sum[d] += s.z[d];
            sq[d] += s.z[d] * s.z[d];
        }
    }
    for d in 0..2 {
        let var = lv[d].exp();
        let mean = sum[d] / n as f64;
        let v = sq[d] / n as f64 - mean * mean;
        // five standard errors
        assert!(
            (mean - mu[d]).abs() < 5.0 * (var / n as f64).sqrt(),
            "mean {mean}"
        );
        assert!(
            (v - var).abs() < 5.0 * var * (2.0 / n as f64).sqrt(),
            "var {v} vs {var}"
        );
    }
    let z = reparameterize_with(&[0.0], &[0.0], &[0.3]).z;
    assert_eq!(z, vec![0.3]);
}

#[test]
fn logit_loss_agrees_with_probability_space_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (r, c) in [(4, 4), (3, 5), (2, 2)] {
        let vae = Vae::new(r, c, small_vae_cfg(), 3).unwrap();
        let n = 2;
        let x = random_tensor(vec![n, 4, r, c], &mut rng, |g| g.random::<f64>());
        let eps = random_tensor(vec![n, 3], &mut rng, |g| g.sample(StandardNormal));
        let (mu, lv) = vae.encode(&x).unwrap();
        let z: Vec<f64> = (0..n * 3)
            .map(|i| mu.data()[i] + eps.data()[i] * (lv.data()[i] / 2.0).exp())
            .collect();
        let p = vae.decode(&Tensor::new(vec![n, 3], z).unwrap()).unwrap();
        assert_eq!(p.shape(), x.shape());
        let reference = vae_loss(&x, &p, mu.data(), lv.data()).unwrap();
        let (got, _) = vae.loss_and_grads(&x, &eps).unwrap();
        assert!((got.total - reference.total / n as f64).abs() < 1e-9 * reference.total.abs());
        assert!((got.kl - reference.kl / n as f64).abs() < 1e-12 * reference.kl.abs().max(1.0));
    }
}

#[test]
fn default_vae_geometry() {
    let vae = Vae::new(4, 4, VaeConfig::default(), 0).unwrap();
    assert_eq!(vae.flatten_size(), 1024);
    assert_eq!(vae.latent_dim(), 16);
    let x = Tensor::filled(&[2, OBS_DIM, 4, 4], 0.5);
    assert_eq!(vae.features(&x).unwrap().shape(), &[2, 1024]);
    let (mu, lv) = vae.encode(&x).unwrap();
    assert_eq!((mu.shape(), lv.shape()), (&[2, 16][..], &[2, 16][..]));
    assert_eq!(vae.decode(&mu).unwrap().shape(), &[2, OBS_DIM, 4, 4]);
    // odd grids round-trip too
    let odd = Vae::new(5, 3, VaeConfig::default(), 0).unwrap();
    let y = Tensor::filled(&[1, OBS_DIM, 5, 3], 0.0);
    let (m, _) = odd.encode(&y).unwrap();
    assert_eq!(odd.decode(&m).unwrap().shape(), &[1, OBS_DIM, 5, 3]);
    assert!(Vae::new(4, 3, VaeConfig::default(), 0).is_err());
}

// ---- action selection and baselines ----------------------------------------------

#[test]
fn sampled_actions_follow_the_policy() {
    let probs = [0.05, 0.1, 0.4, 0.2, 0.0, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 100_000;
    let mut counts = [0usize; 6];
    for _ in 0..n {
        let (a, lp) = select_action(&probs, ActMode::Sample, &mut rng);
        assert_eq!(lp, probs[a].ln());
        counts[a] += 1;
    }
    assert_eq!(counts[4], 0);
    // chi-square with 4 dof over the support; 99.9% quantile 18.47
    let chi: f64 = probs
        .iter()
        .zip(&counts)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, &c)| (c as f64 - p * n as f64).powi(2) / (p * n as f64))
        .sum();
    assert!(chi < 18.47, "chi-square {chi}");
    assert_eq!(select_action(&probs, ActMode::Greedy, &mut rng).0, 2);
}

#[test]
fn epsilon_schedule_and_td_targets() {
    let cfg = IdqnConfig::default();
    assert_eq!(epsilon_at(0, 1000, &cfg), 1.0);
    assert!((epsilon_at(150, 1000, &cfg) - 0.525).abs() < 1e-12);
    assert!((epsilon_at(300, 1000, &cfg) - 0.05).abs() < 1e-12);
    assert!((epsilon_at(999, 1000, &cfg) - 0.05).abs() < 1e-12);
    let t = td_targets(&[1.0, 2.0], &[false, true], &[3.0, 5.0], 0.5);
    assert_eq!(t, vec![2.5, 2.0]);
}

#[test]
fn fixed_time_switches_on_multiples_of_the_period() {
    let c = FixedTimeController::default();
    assert_eq!(c.cycle_s(), 360.0);
    for k in 1..40usize {
        let t = 45.0 * k as f64;
        assert_eq!(c.phase_at(t - 1.0), (k - 1) % 8);
        assert_eq!(c.phase_at(t), k % 8);
    }
}
