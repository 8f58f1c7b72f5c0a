mod common;

use cossl_core::SamplerKind;

#[test]
fn class_balanced_marginal_is_uniform() {
    let s = common::small_splits(0);
    let (stat, crit) = common::sampler_chi_square(&s.labeled, &SamplerKind::ClassBalanced, &[0.1; 10], 100_000, 1);
    assert!(stat < crit, "{stat} >= {crit}");
}

#[test]
fn random_marginal_follows_counts() {
    let s = common::small_splits(0);
    let prior = common::counts_of(&s.labeled).prior();
    let (stat, crit) = common::sampler_chi_square(&s.labeled, &SamplerKind::Random, &prior, 100_000, 2);
    assert!(stat < crit, "{stat} >= {crit}");
}

#[test]
fn class_imbalanced_marginal_follows_target() {
    let s = common::small_splits(0);
    let target = common::counts_of(&s.labeled).reversed().prior();
    let kind = SamplerKind::class_imbalanced(target.clone()).unwrap();
    let (stat, crit) = common::sampler_chi_square(&s.labeled, &kind, &target, 100_000, 3);
    assert!(stat < crit, "{stat} >= {crit}");
}

#[test]
fn chi_square_test_rejects_a_wrong_marginal() {
    let s = common::small_splits(0);
    let (stat, crit) = common::sampler_chi_square(&s.labeled, &SamplerKind::Random, &[0.1; 10], 100_000, 4);
    assert!(stat > crit);
}

#[test]
fn critical_values_match_tables() {
    // 0.999 quantiles for 1 and 9 degrees of freedom
    assert!((common::chi_square_critical(1) - 10.828).abs() < 1e-3);
    assert!((common::chi_square_critical(9) - 27.877).abs() < 1e-3);
}
