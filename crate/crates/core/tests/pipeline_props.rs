use advdepth::pipeline::{build_score_model, run_attack_on, run_guidance_comparison, toy_scene, AttackConfig};
use advdepth::guidance::GuidanceMode;
use proptest::prelude::*;

fn small() -> AttackConfig {
    let mut cfg = AttackConfig::default();
    cfg.ensemble.scenes = 8;
    cfg.srs.iterations = 4;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attack_only_touches_the_adversarial_region(scene in 0usize..8, seed in 0u64..100) {
        let mut cfg = small();
        cfg.scene = scene;
        cfg.seed = seed;
        let model = build_score_model(&cfg).unwrap();
        let sc = toy_scene(&cfg.ensemble, scene).unwrap();
        let rep = run_attack_on(&cfg, model.as_ref(), &sc);
        prop_assert!(rep.error.is_none(), "{:?}", rep.error);
        let attacked = rep.attacked.as_ref().unwrap();
        let region = rep.region.as_ref().unwrap();
        prop_assert!(region.is_disjoint(&sc.target));
        let (h, w) = (region.height(), region.width());
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (attacked.data()[y * w + x], sc.x.data()[y * w + x]);
                if region.contains(y, x) {
                    prop_assert!((0.0..=1.0).contains(&a));
                } else {
                    prop_assert_eq!(a, b);
                }
            }
        }
        prop_assert_eq!(rep.xi.len(), cfg.srs.k);
    }
}

#[test]
fn comparison_shares_regions_and_control() {
    let cfg = small();
    let rep = run_guidance_comparison(&cfg, &[GuidanceMode::None, GuidanceMode::Jvpg, GuidanceMode::None], &[0, 1]).unwrap();
    assert_eq!(rep.xi[0], rep.xi[2]);
    assert_eq!(rep.log_density[0], rep.log_density[2]);
    assert!(rep.mean_xi(1) > rep.mean_xi(0));
}
