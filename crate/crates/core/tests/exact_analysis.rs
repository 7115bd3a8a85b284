use ano_core::envs::{optimal_return, random_return, GridWorldSpec};
use ano_core::exactmdp::{analyze, constrained_improve, surrogate_s, TabularMDP, TabularPolicy};
use ano_core::{KernelFamily, ShapingFunctionSpec};

fn greedy(q: &[Vec<f64>]) -> TabularPolicy {
    let rows = q
        .iter()
        .map(|row| {
            let best = (0..row.len()).fold(0, |b, a| if row[a] > row[b] + 1e-12 { a } else { b });
            (0..row.len()).map(|a| if a == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    TabularPolicy::new(rows).unwrap()
}

fn policy_iteration(mdp: &TabularMDP) -> (TabularPolicy, f64) {
    let mut pi = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    for _ in 0..1000 {
        let next = greedy(&analyze(mdp, &pi).unwrap().q);
        if next == pi {
            break;
        }
        pi = next;
    }
    let eta = analyze(mdp, &pi).unwrap().eta;
    (pi, eta)
}

#[test]
fn policy_iteration_matches_value_iteration_on_the_default_grid() {
    let spec = GridWorldSpec::default();
    let gamma = 0.99;
    let mdp = spec.to_tabular(gamma).unwrap();
    let (_, eta) = policy_iteration(&mdp);
    let vi = optimal_return(&spec, gamma).unwrap();
    assert!((eta - vi).abs() < 1e-8, "policy iteration {eta} vs value iteration {vi}");
    assert!(random_return(&spec, gamma).unwrap() < eta);
}

#[test]
fn visitation_and_return_are_consistent() {
    for seed in 0..20 {
        let mdp = TabularMDP::random_seeded(4, 3, seed).unwrap();
        let pi = TabularPolicy::uniform(4, 3);
        let an = analyze(&mdp, &pi).unwrap();
        let total: f64 = an.rho.iter().sum();
        assert!((total - 1.0 / (1.0 - mdp.discount())).abs() < 1e-9);
        let via_rho: f64 = (0..4)
            .map(|s| an.rho[s] * (0..3).map(|a| pi.prob(s, a) * mdp.reward(s, a)).sum::<f64>())
            .sum();
        assert!((via_rho - an.eta).abs() < 1e-9);
        for s in 0..4 {
            let mean_adv: f64 = (0..3).map(|a| pi.prob(s, a) * an.advantage[s][a]).sum();
            assert!(mean_adv.abs() < 1e-9);
        }
    }
}

/// eta(new) - eta(old) = sum_s rho_new(s) sum_a new(a|s) A_old(s, a).
#[test]
fn performance_difference_identity() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    for seed in 0..20 {
        let mdp = TabularMDP::random_seeded(5, 3, 100 + seed).unwrap();
        let old = TabularPolicy::random(5, 3, &mut rng);
        let new = TabularPolicy::random(5, 3, &mut rng);
        let a_old = analyze(&mdp, &old).unwrap();
        let a_new = analyze(&mdp, &new).unwrap();
        let rhs: f64 = (0..5)
            .map(|s| a_new.rho[s] * (0..3).map(|a| new.prob(s, a) * a_old.advantage[s][a]).sum::<f64>())
            .sum();
        assert!((a_new.eta - a_old.eta - rhs).abs() < 1e-9);
        // the surrogate swaps in the old visitation and is exact at new = old
        let first_order: f64 = (0..5)
            .map(|s| a_old.rho[s] * (0..3).map(|a| new.prob(s, a) * a_old.advantage[s][a]).sum::<f64>())
            .sum();
        assert!((surrogate_s(&mdp, &old, &new).unwrap() - a_old.eta - first_order).abs() < 1e-9);
        assert!((surrogate_s(&mdp, &old, &old).unwrap() - a_old.eta).abs() < 1e-9);
    }
}

#[test]
fn repeated_constrained_improvement_climbs_towards_the_optimum() {
    let spec = GridWorldSpec::default();
    let mdp = spec.to_tabular(0.99).unwrap();
    let opt = optimal_return(&spec, 0.99).unwrap();
    let kernel = ShapingFunctionSpec::new(KernelFamily::Ano, 0.2).unwrap();
    let mut pi = TabularPolicy::uniform(mdp.n_states(), 4);
    let mut eta = analyze(&mdp, &pi).unwrap().eta;
    let start = eta;
    for _ in 0..15 {
        pi = constrained_improve(&mdp, &pi, &kernel, 0.3, 0.3).unwrap();
        let next = analyze(&mdp, &pi).unwrap().eta;
        assert!(next >= eta - 1e-9, "{next} < {eta}");
        eta = next;
    }
    assert!(eta > start + 0.5 * (opt - start), "start {start}, reached {eta}, optimum {opt}");
}
