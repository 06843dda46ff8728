mod common;

use common::*;

#[test]
fn multi_agent_actor_and_critic_match_finite_differences() {
    for seed in 0..10 {
        let (a, c) = policy_fd(&policy_case(seed, 3, 2, false));
        assert!(a < FD_TOL && c < FD_TOL, "seed {seed}: actor {a:e} critic {c:e}");
    }
}

#[test]
fn single_agent_actor_and_critic_match_finite_differences() {
    for seed in 0..10 {
        let (a, c) = policy_fd(&policy_case(seed, 3, 3, true));
        assert!(a < FD_TOL && c < FD_TOL, "seed {seed}: actor {a:e} critic {c:e}");
    }
}

#[test]
fn gaussian_bonus_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut case = policy_case(seed, 2, 3, false);
        case.entropy = marco::marl::EntropyTerm::GaussianBonus(0.5);
        let (a, _) = policy_fd(&case);
        assert!(a < FD_TOL, "seed {seed}: actor {a:e}");
    }
}

#[test]
fn bridge_psi_and_eta_match_finite_differences() {
    for seed in 0..10 {
        let (p, e) = bridge_fd(&bridge_case(seed, 3, 2, false));
        assert!(p < FD_TOL && e < FD_TOL, "seed {seed}: psi {p:e} eta {e:e}");
    }
}

#[test]
fn shared_bridge_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let (p, e) = bridge_fd(&bridge_case(seed, 3, 3, true));
        assert!(p < FD_TOL && e < FD_TOL, "seed {seed}: psi {p:e} eta {e:e}");
    }
}
