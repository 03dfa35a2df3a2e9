//! The battery must notice a deliberately broken sampler.

use zeta_gibbs::verify::{Scale, Suite, DEFAULT_SEED};

fn scale() -> Scale {
    Scale {
        pd_moment_samples: 4000,
        pd_battery_samples: 4000,
        ..Scale::smoke()
    }
}

#[test]
fn skewed_pd_normalizer_fails_moment_criterion() {
    let honest = Suite::new(scale(), DEFAULT_SEED).run(3);
    let broken = Suite::new(scale(), DEFAULT_SEED).with_pd_normalizer_scale(1.01).run(3);
    println!("{}\n{}", honest.line(), broken.line());
    assert!(honest.passed);
    assert!(!broken.passed);
}
