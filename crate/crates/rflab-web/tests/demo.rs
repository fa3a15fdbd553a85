use rflab_web::{clock_samples_json, sample_paths_json, scalar_defect_json};
use serde_json::Value;

#[test]
fn paths_have_declared_shape() {
    let v: Value = serde_json::from_str(&sample_paths_json("torus", 100, 3, 0.1, 1).unwrap()).unwrap();
    let stride = v["stride"].as_u64().unwrap() as usize;
    let ns = v["n_saved"].as_u64().unwrap() as usize;
    assert_eq!(stride, 3);
    assert_eq!(v["perelman"].as_array().unwrap().len(), 3 * ns * stride);
    assert_eq!(v["parabolic"].as_array().unwrap().len(), 3 * ns * stride);
    let v: Value = serde_json::from_str(&sample_paths_json("sphere", 100, 2, 0.1, 1).unwrap()).unwrap();
    assert_eq!(v["stride"], 4);
}

#[test]
fn clock_spread_shrinks_with_n() {
    let v: Value = serde_json::from_str(&clock_samples_json("torus", &[10, 1000], 400, 0.2, 3).unwrap()).unwrap();
    let var = |i: usize| {
        let s: Vec<f64> = v[i]["samples"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
    };
    assert!(var(0) > 20.0 * var(1));
    assert!((v[1]["limit"].as_f64().unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn defect_table_halves() {
    let v: Value = serde_json::from_str(&scalar_defect_json(&[1000, 2000]).unwrap()).unwrap();
    let d: Vec<f64> = v.as_array().unwrap().iter().map(|r| r["max_defect"].as_f64().unwrap()).collect();
    assert!((d[0] / d[1] - 2.0).abs() < 0.01);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(sample_paths_json("klein", 10, 1, 0.1, 1).is_err());
    assert!(sample_paths_json("torus", 10, 0, 0.1, 1).is_err());
    assert!(clock_samples_json("sphere", &[10], 1, 5.0, 1).is_err());
}
