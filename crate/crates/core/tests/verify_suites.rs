use swintext::bench::bench;
use swintext::verify::{run, Suite, VerifyOptions};

fn quick() -> VerifyOptions {
    VerifyOptions { seeds: 2, perturb: 0.0, exhaustive_model: false }
}

#[test]
fn every_suite_passes() {
    let props = run(Suite::All, &quick()).unwrap();
    for p in &props {
        assert!(p.passed, "{}", p.line());
    }
    for name in ["op/conv2d_3x3", "micro_model", "shifted_window_8x8_M4", "ce_at_one_half_is_ln2"] {
        assert!(props.iter().any(|p| p.name == name), "{name} missing");
    }
}

#[test]
fn perturbed_gradients_fail_the_gradient_suite() {
    let opts = VerifyOptions { seeds: 1, perturb: 1e-2, exhaustive_model: false };
    let props = run(Suite::Gradcheck, &opts).unwrap();
    let failed = props.iter().filter(|p| !p.passed).count();
    // Everything but the checker self-test, which perturbs on its own.
    assert_eq!(failed, props.len() - 1);
}

#[test]
fn suites_parse() {
    assert_eq!(Suite::parse("attention-oracle").unwrap(), Suite::AttentionOracle);
    assert!(Suite::parse("everything").is_err());
}

#[test]
fn mac_ratio_follows_window_area_over_grid_area() {
    let r = bench(56, 7, 8, 1, 1).unwrap();
    assert_eq!(r.global.macs, 2 * 3136 * 3136 * 8);
    assert_eq!(r.windowed.macs * 64, r.global.macs);
    assert!(r.ratio_is_exact());
    assert_eq!(bench(8, 8, 4, 1, 1).unwrap().ratio(), 1.0);
    let (a, b) = (bench(8, 4, 4, 2, 1).unwrap(), bench(16, 4, 4, 2, 1).unwrap());
    assert_eq!(a.ratio(), 4.0 * b.ratio());
}
