use saute_wasm_demo::{decode, lambda_sweep, tracker_trace};
use serde_json::Value;

#[test]
fn tracker_matches_hand_values() {
    let v: Value = serde_json::from_str(&tracker_trace("4, 4 4", 0.5, 10.0).unwrap()).unwrap();
    let z: Vec<f64> = v["z"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(z, vec![10.0, 12.0, 16.0, 24.0]);
    let v: Value = serde_json::from_str(&tracker_trace("6 6", 0.9, 10.0).unwrap()).unwrap();
    assert_eq!(v["safe"], serde_json::json!([true, false]));
    assert!((v["discounted_cost"].as_f64().unwrap() - 11.4).abs() < 1e-12);
    assert!(tracker_trace("1 x", 0.9, 10.0).is_err());
    assert!(tracker_trace("-1", 0.9, 10.0).is_err());
    assert!(tracker_trace("1", 1.0, 10.0).is_err());
}

#[test]
fn decode_is_deterministic_and_guarded() {
    let a = decode("hello", "inference_guard", 16, 5.0, 3).unwrap();
    assert_eq!(a, decode("hello", "inference_guard", 16, 5.0, 3).unwrap());
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["z_trace"].as_array().unwrap().len(), v["tokens"].as_array().unwrap().len() + 1);
    assert!(decode("hello", "bogus", 16, 5.0, 3).is_err());
    assert!(decode("   ", "args", 16, 5.0, 3).is_err());
}

#[test]
fn sweep_reports_every_point() {
    let v: Value = serde_json::from_str(&lambda_sweep("0, 5", 10, 8, 0).unwrap()).unwrap();
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 4);
    for p in pts {
        let r = p["safety_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}
