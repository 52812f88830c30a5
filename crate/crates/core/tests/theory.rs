use gcl_core::numerics::SeededRng;
use gcl_core::theorycheck::{
    check_alt_variability, check_expfam_consistency_form, check_variability, gaussian_variance_family,
    lambda_bar_condition, location_scale_family, w_vector, AuxDomain, ComponentSpec, ConditionalFamily, ExpFamily,
    ExpFamilySpec, Modulator, Statistic, TheoryError,
};

#[test]
fn order_one_gaussian_family_never_varies_enough() {
    for seed in 0..5 {
        let fam = ConditionalFamily::from_spec(&gaussian_variance_family(3, 40, 0.3, 3.0, seed)).unwrap();
        let v = check_variability(&fam, &[0.4, -1.1, 0.8], 100, &SeededRng::new(seed)).unwrap();
        assert_eq!(v.successes, 0, "seed {seed}");
        assert!(v.witness.is_none());
        // each component contributes a rank-one block
        assert!(v.rank_achieved <= 3);
    }
}

#[test]
fn gaussian_w_vector_matches_closed_form() {
    // q = −λ s² / 2  ⇒  ∂q/∂s = −λ s,  ∂²q/∂s² = −λ
    let spec = ExpFamilySpec {
        n: 2,
        k: 1,
        aux: AuxDomain::Segments { count: 3 },
        components: vec![ComponentSpec {
            statistics: vec![Statistic::Poly { p: 2, coef: -0.5 }],
            modulators: vec![Modulator::PerSegment {
                values: vec![0.5, 1.0, 2.0],
            }],
            base: None,
            log_partition: None,
        }],
    };
    let fam = ConditionalFamily::from_spec(&spec).unwrap();
    let y = [0.7, -1.3];
    let w = w_vector(&fam, &y, &[2.0]).unwrap();
    // first derivatives of every component, then second derivatives
    let expected = [-2.0 * 0.7, -2.0 * -1.3, -2.0, -2.0];
    for (a, b) in w.iter().zip(expected) {
        assert!((a - b).abs() < 1e-6, "{w:?}");
    }
}

#[test]
fn location_scale_family_varies_enough() {
    let fam = ConditionalFamily::from_spec(&location_scale_family(3, 40, 11)).unwrap();
    let v = check_variability(&fam, &[0.3, -0.6, 1.2], 100, &SeededRng::new(1)).unwrap();
    assert!(v.successes >= 99, "{} / 100", v.successes);
    assert_eq!(v.witness.as_ref().unwrap().len(), 7);
}

#[test]
fn black_box_evaluation_agrees_with_the_analytic_family() {
    let spec = location_scale_family(2, 30, 5);
    let exact = ConditionalFamily::from_spec(&spec).unwrap();
    let opaque = exact.as_black_box();
    let y = [0.2, -0.9];
    for seg in 0..30 {
        let u = [seg as f64];
        let a = w_vector(&exact, &y, &u).unwrap();
        let b = w_vector(&opaque, &y, &u).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-4 * (1.0 + p.abs()), "{a:?} vs {b:?}");
        }
    }
    let va = check_variability(&exact, &y, 50, &SeededRng::new(2)).unwrap();
    let vb = check_variability(&opaque, &y, 50, &SeededRng::new(2)).unwrap();
    assert_eq!(va.successes, vb.successes);
}

#[test]
fn random_segments_give_finite_lambda_bar_condition() {
    let fam = ExpFamily::new(&location_scale_family(2, 50, 3)).unwrap();
    let root = SeededRng::new(4);
    let finite = (0..100)
        .filter(|&d| {
            let us = fam.aux.sample(5, &mut root.split(d));
            lambda_bar_condition(&fam, &us).unwrap().is_finite()
        })
        .count();
    assert!(finite >= 99);
}

#[test]
fn constant_modulators_give_infinite_condition() {
    let spec = ExpFamilySpec {
        n: 2,
        k: 1,
        aux: AuxDomain::Segments { count: 10 },
        components: vec![ComponentSpec {
            statistics: vec![Statistic::Abs { coef: -1.0 }],
            modulators: vec![Modulator::Constant { value: 1.7 }],
            base: None,
            log_partition: None,
        }],
    };
    let fam = ExpFamily::new(&spec).unwrap();
    let root = SeededRng::new(5);
    for d in 0..100 {
        let us = fam.aux.sample(3, &mut root.split(d));
        assert_eq!(lambda_bar_condition(&fam, &us).unwrap(), f64::INFINITY);
    }
}

#[test]
fn dependent_statistics_are_rejected() {
    let spec = ExpFamilySpec {
        n: 1,
        k: 2,
        aux: AuxDomain::Segments { count: 4 },
        components: vec![ComponentSpec {
            statistics: vec![Statistic::Poly { p: 2, coef: 1.0 }, Statistic::Poly { p: 2, coef: -3.0 }],
            modulators: vec![Modulator::Constant { value: 1.0 }, Modulator::Constant { value: 2.0 }],
            base: None,
            log_partition: None,
        }],
    };
    assert!(matches!(
        ExpFamily::new(&spec),
        Err(TheoryError::DependentStatistics { rank: 1, k: 2, .. })
    ));
}

#[test]
fn consistency_form_separates_orders() {
    let one = ExpFamily::new(&gaussian_variance_family(2, 10, 0.5, 2.0, 1)).unwrap();
    let r1 = check_expfam_consistency_form(&one);
    assert!(!r1.overall);
    assert!(r1.note.is_some());
    let two = ExpFamily::new(&location_scale_family(2, 10, 1)).unwrap();
    let r2 = check_expfam_consistency_form(&two);
    assert!(r2.overall, "{r2:?}");
}

#[test]
fn derivative_condition_on_a_continuous_domain() {
    // smooth modulators whose frequencies differ between the two components
    let component = |phase: f64| ComponentSpec {
        statistics: vec![Statistic::Poly { p: 1, coef: 1.0 }, Statistic::Poly { p: 2, coef: -0.5 }],
        modulators: vec![
            Modulator::Sinusoid {
                offset: 0.0,
                amplitude: 1.0,
                frequency: 3.0,
                phase,
                coord: 0,
            },
            Modulator::Sinusoid {
                offset: 1.5,
                amplitude: 0.5,
                frequency: 2.0 + phase,
                phase: 1.0,
                coord: 0,
            },
        ],
        base: None,
        log_partition: None,
    };
    let spec = ExpFamilySpec {
        n: 2,
        k: 2,
        aux: AuxDomain::Box {
            low: vec![0.0],
            high: vec![2.0],
        },
        components: vec![component(0.3), component(1.1)],
    };
    let fam = ConditionalFamily::from_spec(&spec).unwrap();
    let v = check_alt_variability(&fam, &[0.5, -0.4], 0, 50, &SeededRng::new(6)).unwrap();
    assert!(v.successes > 0);
    let segmented = ConditionalFamily::from_spec(&location_scale_family(2, 10, 1)).unwrap();
    assert!(matches!(
        check_alt_variability(&segmented, &[0.5, -0.4], 0, 5, &SeededRng::new(6)),
        Err(TheoryError::Inapplicable(_))
    ));
}
