use peakprob_wasm::{tail_fit_json, Demo};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn fan_brackets_the_median() {
    let demo = Demo::build(3, 4).unwrap();
    let days = parse(demo.days_json().unwrap());
    let day = days[30].as_str().unwrap().to_string();
    let fan = parse(demo.fan_json(&day, 300).unwrap());
    assert_eq!(fan["hours"].as_array().unwrap().len(), 24);
    assert_eq!(fan["paths"].as_array().unwrap().len(), 20);
    for h in 0..24 {
        let at = |k: &str| fan[k][h].as_f64().unwrap();
        assert!(at("p05") <= at("p25") && at("p25") <= at("p50"));
        assert!(at("p50") <= at("p75") && at("p75") <= at("p95"));
    }
    // Same seed, same day: same scenarios.
    assert_eq!(
        demo.fan_json(&day, 300).unwrap(),
        demo.fan_json(&day, 300).unwrap()
    );
}

#[test]
fn peaks_are_probabilities() {
    let demo = Demo::build(3, 4).unwrap();
    let days = parse(demo.days_json().unwrap());
    let first = days[0].as_str().unwrap();
    let v = parse(demo.peaks_json(first, 200).unwrap());
    // Nothing observed yet: every scenario beats the empty levels.
    assert_eq!(v["total"].as_f64().unwrap(), 1.0);
    assert!(v["peaks"].as_array().unwrap().is_empty());

    let late = days[60].as_str().unwrap();
    let v = parse(demo.peaks_json(late, 200).unwrap());
    assert_eq!(v["peaks"].as_array().unwrap().len(), 4);
    let probs: Vec<f64> = v["probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_f64().unwrap())
        .collect();
    let total = v["total"].as_f64().unwrap();
    assert!((probs.iter().sum::<f64>() - total).abs() < 1e-12);
    let hour_sum: f64 = v["hour_probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p.as_f64().unwrap())
        .sum();
    assert!((hour_sum - 1.0).abs() < 1e-12);
}

#[test]
fn rejects_bad_days() {
    let demo = Demo::build(3, 1).unwrap();
    assert!(demo.fan_json("2014-06-07", 100).is_err()); // a Saturday
    assert!(demo.fan_json("2014-12-01", 100).is_err());
    assert!(demo.peaks_json("not a date", 100).is_err());
}

#[test]
fn tail_fit_recovers_parameters() {
    let v = parse(tail_fit_json(0.2, 50.0, 4000, 11).unwrap());
    assert!((v["shape"].as_f64().unwrap() - 0.2).abs() < 0.08);
    assert!((v["scale"].as_f64().unwrap() / 50.0 - 1.0).abs() < 0.1);
    let curve = v["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 101);
    assert!(tail_fit_json(0.2, -1.0, 100, 1).is_err());
    assert!(tail_fit_json(0.2, 1.0, 5, 1).is_err());
}
