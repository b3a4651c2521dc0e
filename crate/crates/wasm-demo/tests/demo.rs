//! The demo's JSON operations, exercised natively.

use dynpanel_wasm_demo::{avar_curves_json, conditioning_curve_json, profile_curves_json};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.expect("operation succeeds")).unwrap()
}

#[test]
fn profile_curves_have_one_value_per_grid_point() {
    let v = parse(profile_curves_json(
        0.5,
        1.0,
        1.0,
        200,
        4,
        1,
        -0.9,
        1.3,
        101,
        "min-abs-sml",
    ));
    assert_eq!(v["rho"].as_array().unwrap().len(), 101);
    assert_eq!(v["mile"].as_array().unwrap().len(), 101);
    assert_eq!(v["lancaster"].as_array().unwrap().len(), 101);
    let mile_rho = v["mile_rho"].as_f64().unwrap();
    assert!((mile_rho - 0.5).abs() < 0.2, "{mile_rho}");
    let selected = v["lancaster_selected"].as_f64().unwrap();
    assert!(v["lancaster_roots"]
        .as_array()
        .unwrap()
        .iter()
        .any(|r| r.as_f64() == Some(selected)));
}

#[test]
fn profile_curves_reject_bad_input() {
    assert!(profile_curves_json(0.5, 1.0, 1.0, 200, 4, 1, 1.0, -1.0, 101, "min-abs-sml").is_err());
    assert!(profile_curves_json(0.5, 1.0, 1.0, 200, 4, 1, -0.9, 1.3, 101, "closest").is_err());
    assert!(profile_curves_json(
        0.5,
        1.0,
        1.0,
        10_000_000,
        4,
        1,
        -0.9,
        1.3,
        101,
        "min-abs-sml"
    )
    .is_err());
}

#[test]
fn avar_curves_order_mile_below_lancaster() {
    let v = parse(avar_curves_json(4, 1.0, 1.0, -0.5, 0.9, 15));
    let mile = v["mile"].as_array().unwrap();
    let lanc = v["lancaster"].as_array().unwrap();
    let exact = v["lancaster_exact"].as_array().unwrap();
    for k in 0..15 {
        let m = mile[k].as_f64().unwrap();
        assert!(lanc[k].as_f64().unwrap() > m);
        assert!(exact[k].as_f64().unwrap() > m);
    }
}

#[test]
fn conditioning_curve_touches_at_the_knife_edge() {
    // delta grid hits 1 - rho = 0.5 exactly.
    let v = parse(conditioning_curve_json(
        0.5, 1.0, 0.25, 1.0, 4, -0.5, 1.5, 21,
    ));
    assert_eq!(v["knife_edge_delta"].as_f64(), Some(0.5));
    let deltas = v["delta"].as_array().unwrap();
    for (k, d) in deltas.iter().enumerate() {
        let diff = v["differenced"][k].as_f64().unwrap();
        let cond = v["conditional"][k].as_f64().unwrap();
        if d.as_f64() == Some(0.5) {
            assert!((diff - cond).abs() < 1e-10);
        } else {
            assert!(diff > cond);
        }
    }
}
