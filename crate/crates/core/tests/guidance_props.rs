use advdepth::guidance::{EnergyFunction, GuidanceHook, GuidanceMode};
use advdepth::sampler::{sample, SamplerConfig};
use advdepth::schedule::NoiseSchedule;
use advdepth::scoremodels::{Condition, GaussianMixtureScore};
use advdepth::spectra::{anisotropic_mixture, injection_experiment, InjectionConfig};
use advdepth::Tensor;
use proptest::prelude::*;

fn unit() -> GaussianMixtureScore {
    GaussianMixtureScore::unit_gaussian(&[3], NoiseSchedule::desk_default())
}

fn terminal_distance(model: &GaussianMixtureScore, hook: Option<&GuidanceHook>, goal: &Tensor, seed: u64) -> f64 {
    let traj = sample(model, &Condition::none(), &SamplerConfig::seeded(seed), hook).unwrap();
    traj.terminal().sub(goal).unwrap().norm()
}

// The score Jacobian is negative definite, so jvpg descends with a negative
// sampler strength and dps with a positive one.
#[test]
fn every_mode_pulls_toward_the_goal() {
    let model = unit();
    let goal = Tensor::vector(vec![1.5, -2.0, 0.5]);
    for (mode, gamma) in [(GuidanceMode::EnergyDps, 0.5), (GuidanceMode::Mpgd, 0.5), (GuidanceMode::Jvpg, -0.5)] {
        let hook = GuidanceHook::new(mode, EnergyFunction::quadratic(goal.clone()), gamma);
        let wins = (0..100)
            .filter(|&s| terminal_distance(&model, Some(&hook), &goal, s) < terminal_distance(&model, None, &goal, s))
            .count();
        assert!(wins >= 90, "{mode}: {wins}/100");
    }
}

#[test]
fn injection_experiment_is_reproducible() {
    let model = anisotropic_mixture(NoiseSchedule::desk_default()).unwrap();
    let cfg = InjectionConfig::for_schedule(&NoiseSchedule::desk_default());
    let a = injection_experiment(&model, &Condition::none(), &[3, 4], &cfg).unwrap();
    let b = injection_experiment(&model, &Condition::none(), &[4, 3], &cfg).unwrap();
    assert_eq!(a.pairs[0].top.log_density, b.pairs[1].top.log_density);
    assert_eq!(a.pairs[1].bottom.terminal, b.pairs[0].bottom.terminal);
    assert!(a.pairs.iter().all(|p| p.top.singular_value >= p.bottom.singular_value));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_strength_matches_unguided(seed in 0u64..1000, mode_ix in 0usize..4) {
        let model = unit();
        let mode = GuidanceMode::ALL[mode_ix];
        let hook = GuidanceHook::new(mode, EnergyFunction::quadratic(Tensor::ones(&[3])), 0.0);
        let c = Condition::none();
        let plain = sample(&model, &c, &SamplerConfig::seeded(seed), None).unwrap();
        let guided = sample(&model, &c, &SamplerConfig::seeded(seed), Some(&hook)).unwrap();
        prop_assert_eq!(plain.states, guided.states);
        // Energies are still recorded.
        prop_assert!(guided.records.iter().all(|r| r.energy.is_some()));
    }

    #[test]
    fn guided_trajectories_stay_finite(seed in 0u64..1000, gamma in 0.0f64..2.0, mode_ix in 1usize..4) {
        let model = unit();
        let mode = GuidanceMode::ALL[mode_ix];
        let gamma = if mode == GuidanceMode::Jvpg { -gamma } else { gamma };
        let hook = GuidanceHook::new(mode, EnergyFunction::quadratic(Tensor::full(&[3], 2.0)), gamma);
        let traj = sample(&model, &Condition::none(), &SamplerConfig::seeded(seed), Some(&hook)).unwrap();
        prop_assert!(traj.states.iter().all(|z| z.is_finite()));
        prop_assert_eq!(traj.states.len(), 51);
    }
}
