//! The JSON operations behind the browser demo, exercised natively.

use idg_wasm::{example_scenario, excitation_json, offline_sets_json, set_element_json, simulate_json};
use serde_json::Value;

#[test]
fn simulate_strides_the_ground_truth() {
    let v: Value = serde_json::from_str(&simulate_json(&example_scenario(), 100).unwrap()).unwrap();
    let t = v["t"].as_array().unwrap();
    assert_eq!(t.len(), 160);
    assert_eq!(v["x"][0], serde_json::json!([3.0, 1.0]));
    assert_eq!(v["u"][0].as_array().unwrap().len(), 2);
    assert!(simulate_json("{}", 1).unwrap_err().contains("schema"));
}

#[test]
fn set_elements_reproduce_the_selected_parameters() {
    let sets: Value = serde_json::from_str(&offline_sets_json(&example_scenario()).unwrap()).unwrap();
    let sets = sets.as_array().unwrap();
    assert_eq!(sets.len(), 2);
    let p1 = &sets[0];
    assert_eq!(p1["set"]["null_basis"].as_array().unwrap().len(), 1);
    let eta: Vec<f64> = serde_json::from_str(&set_element_json(&p1["set"].to_string(), &[0.714]).unwrap()).unwrap();
    let beta: Vec<f64> = serde_json::from_value(p1["beta"].clone()).unwrap();
    for (a, b) in eta[2..5].iter().zip(&beta) {
        assert!((a - b).abs() <= 1e-12, "{eta:?} vs {beta:?}");
    }
    assert!(set_element_json(&p1["set"].to_string(), &[1.0, 2.0]).is_err());
    assert!(set_element_json("not json", &[1.0]).is_err());
}

#[test]
fn excitation_matches_the_library_signal() {
    let v: Value = serde_json::from_str(&excitation_json(1, 0, 0, 2.0, 201).unwrap()).unwrap();
    let e: Vec<f64> = serde_json::from_value(v["e"].clone()).unwrap();
    assert_eq!(e.len(), 201);
    assert_eq!(e[0], 0.0);
    let spec = idg::online::ExcitationSpec::default();
    assert_eq!(e[57], idg::online::excitation(0.57, &spec, 1, 0, 0));
    assert_eq!(v["freqs"].as_array().unwrap().len(), 3);
    assert!(excitation_json(1, 0, 0, 0.0, 10).is_err());
    assert!(excitation_json(1, 0, 0, 1.0, 1).is_err());
}
