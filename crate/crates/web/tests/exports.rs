use chanquant_web::{channel_profile, quantize_values, theta_sweep};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn profile_flattens_the_outlier_channel() {
    let d = parse(channel_profile(0, 50.0, 0, "qkv", 0.3, 4));
    assert!(d.get("error").is_none(), "{d}");
    let max = |k: &str| d[k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max);
    let theta = d["theta"].as_f64().unwrap();
    assert!(max("before") > theta);
    assert!(max("after") <= theta);
    assert_eq!(d["after"].as_array().unwrap().len(), d["before"].as_array().unwrap().len());
    assert_eq!(d["merge_pairs"].as_array().unwrap().len(), d["extra_channels"].as_u64().unwrap() as usize);
}

#[test]
fn sweep_picks_the_smallest_error() {
    let d = parse(theta_sweep(3, 50.0, 2, "gate_up", 4, 12));
    let points = d["points"].as_array().unwrap();
    assert_eq!(points.len(), 12);
    let best = points.iter().filter_map(|p| p["error"].as_f64()).fold(f64::INFINITY, f64::min);
    let picked = points.iter().find(|p| p["theta"] == d["theta"]).unwrap();
    assert_eq!(picked["error"].as_f64().unwrap(), best);
}

#[test]
fn quantizer_round_trip_within_half_step() {
    let d = parse(quantize_values("-1.5, 0.2 3.7,2", 4));
    let alpha = d["alpha"].as_f64().unwrap();
    assert!(d["max_error"].as_f64().unwrap() <= alpha / 2.0 + 1e-12);
    assert_eq!(d["codes"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_input_is_reported_not_panicked() {
    for s in [
        quantize_values("1, two", 4),
        quantize_values("1, 2", 1),
        channel_profile(0, 50.0, 9, "qkv", 0.5, 4),
        channel_profile(0, 50.0, 0, "qkv", 0.0, 4),
        theta_sweep(0, 50.0, 0, "attn", 4, 10),
        theta_sweep(0, 50.0, 0, "down", 4, 0),
    ] {
        assert!(parse(s).get("error").is_some());
    }
}
