use std::process::{Command, Output};

use serde_json::Value;

fn selbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selbias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let out = selbias(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON")
}

fn csv_rows(args: &[&str]) -> (Vec<String>, Vec<Vec<String>>) {
    let out = selbias(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    (header, rows)
}

fn with_format<'a>(args: &[&'a str], format: &'a str) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(["--format", format]);
    v
}

/// Every CSV cell equals the matching JSON value, floats bit for bit.
fn assert_formats_agree(args: &[&str]) {
    let (header, rows) = csv_rows(&with_format(args, "csv"));
    let doc = json(&with_format(args, "json"));
    let payload = &doc["payload"];
    let objects: Vec<&Value> = match payload.get("rows") {
        Some(Value::Array(list)) => list.iter().collect(),
        _ => vec![payload],
    };
    assert_eq!(objects.len(), rows.len());
    for (obj, row) in objects.iter().zip(&rows) {
        for (key, cell) in header.iter().zip(row) {
            let v = &obj[key.as_str()];
            match v {
                Value::Number(n) => {
                    let parsed: f64 = cell.parse().unwrap();
                    assert_eq!(parsed.to_bits(), n.as_f64().unwrap().to_bits(), "{key}: {cell} vs {n}");
                    assert_eq!(cell, &n.to_string(), "{key}");
                }
                Value::Bool(b) => assert_eq!(cell, &b.to_string()),
                other => panic!("unexpected {other}"),
            }
        }
    }
}

const TEN_ARM: [&str; 8] = ["--p", "10", "--gamma2", "0.5", "--eta", "1", "--sigma", "2"];

#[test]
fn bias_envelope_for_golden_example() {
    let mut args = vec!["bias"];
    args.extend(TEN_ARM);
    args.extend(["--xp", "3.25", "--format", "json"]);
    let doc = json(&args);
    let keys: Vec<&String> = doc.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["schema_version", "command", "params", "payload", "diagnostics"]);
    assert_eq!(doc["command"], "bias");
    assert_eq!(doc["params"]["gamma2"], "0.5");
    assert_eq!(doc["params"]["xp"], "3.25");
    let lambda = doc["payload"]["lambda"].as_f64().unwrap();
    assert!((lambda - 0.400).abs() <= 0.005, "{lambda}");
    assert!((doc["payload"]["naive_mean"].as_f64().unwrap() - 0.65).abs() < 1e-15);
    assert_eq!(doc["diagnostics"]["tolerances"]["abs_tol"], 1e-10);
}

#[test]
fn equal_correlations_give_zero_bias() {
    let doc = json(&["bias", "--p", "5", "--gamma", "0.7", "--eta", "0.7", "--sigma", "1", "--xp", "2"]);
    assert!(doc["payload"]["delta"].as_f64().unwrap().abs() <= 1e-12);
    assert_eq!(doc["payload"]["lambda"], 1.0);
}

#[test]
fn grid_table() {
    let args = [
        "table", "--sigma", "1", "--p", "3,5,10", "--xp", "0:6:1", "--case", "0.5,1", "--case", "1,0.5", "--format", "csv",
    ];
    let (header, rows) = csv_rows(&args);
    assert_eq!(header, ["case", "gamma2", "eta2", "p", "xp", "naive_mean", "delta", "lambda"]);
    assert_eq!(rows.len(), 42);
    for row in &rows {
        let delta: f64 = row[6].parse().unwrap();
        match row[0].as_str() {
            "1" => assert!(delta > 0.0),
            "2" => assert!(delta < 0.0),
            c => panic!("case {c}"),
        }
    }
    assert_eq!(rows.iter().filter(|r| r[0] == "1").count(), 21);
}

#[test]
fn exceedance_probability() {
    let mut args = vec!["exceed"];
    args.extend(TEN_ARM);
    args.extend(["--x", "3.25"]);
    let doc = json(&args);
    let prob = doc["payload"]["exceedance_probability"].as_f64().unwrap();
    assert!((prob - 0.486).abs() <= 0.002, "{prob}");
}

#[test]
fn csv_and_json_carry_identical_numbers() {
    let mut bias = vec!["bias"];
    bias.extend(TEN_ARM);
    bias.extend(["--xp", "1.5"]);
    assert_formats_agree(&bias);
    assert_formats_agree(&["table", "--sigma", "1.3", "--p", "2,4", "--xp", "-1:2:0.5", "--case", "0.3,0.9"]);
    let mut sim = vec!["simulate"];
    sim.extend(TEN_ARM);
    sim.extend(["--reps", "300", "--seed", "5", "--with-regression"]);
    assert_formats_agree(&sim);
    sim.push("--summary");
    assert_formats_agree(&sim);
    assert_formats_agree(&["moments", "--theta", "-0.1,-0.2,0.3", "--omega", "1.2,0.4", "--upper", "0.5,0.5,1"]);
}

#[test]
fn seeded_simulation_is_reproducible() {
    let mut args = vec!["simulate"];
    args.extend(TEN_ARM);
    args.extend(["--reps", "2000", "--seed", "24301", "--format", "csv"]);
    let first = selbias(&args);
    let second = selbias(&args);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, second.stdout);
    let mut other = args.clone();
    let at = other.len() - 3;
    other[at] = "24302";
    assert_ne!(first.stdout, selbias(&other).stdout);

    args.truncate(args.len() - 2);
    assert_eq!(json(&args)["payload"], json(&args)["payload"]);
}

#[test]
fn general_covariance_file() {
    let dir = std::env::temp_dir().join(format!("selbias-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("omega.csv");
    std::fs::write(&path, "1.5,0.5\n0.5,1.5\n").unwrap();
    let file_doc = json(&[
        "moments", "--theta", "0,0", "--omega-file", path.to_str().unwrap(), "--upper", "0,0",
    ]);
    let tag_doc = json(&["moments", "--theta", "0,0", "--omega", "1,0.5", "--upper", "0,0"]);
    assert_eq!(file_doc["diagnostics"]["engine"], "lattice");
    assert_eq!(tag_doc["diagnostics"]["engine"], "quadrature");
    let alpha = |d: &Value| d["payload"]["rows"][0]["alpha"].as_f64().unwrap();
    let exact = 0.25 + (1.0f64 / 3.0).asin() / (2.0 * std::f64::consts::PI);
    assert!((alpha(&tag_doc) - exact).abs() < 1e-10);
    assert!((alpha(&file_doc) - exact).abs() < 1e-4);
    std::fs::write(&path, "1,0\n0\n").unwrap();
    let bad = selbias(&["moments", "--theta", "0,0", "--omega-file", path.to_str().unwrap(), "--upper", "0,0"]);
    assert_eq!(bad.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        vec!["bias", "--p", "10", "--eta", "1", "--sigma", "2", "--xp", "1"],
        vec!["bias", "--p", "10", "--gamma", "0.5", "--gamma2", "0.25", "--eta", "1", "--sigma", "2", "--xp", "1"],
        vec!["table", "--sigma", "1", "--p", "3", "--xp", "0:6", "--case", "0.5,1"],
        vec!["bias", "--p", "ten", "--gamma", "0.5", "--eta", "1", "--sigma", "2", "--xp", "1"],
        vec!["frobnicate"],
    ] {
        let out = selbias(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty());
        assert!(!out.stderr.is_empty());
    }
    let out = selbias(&["table", "--sigma", "1", "--p", "3", "--xp", "0:6", "--case", "0.5,1"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--xp"));
}

#[test]
fn domain_errors_exit_three() {
    let out = selbias(&["bias", "--p", "10", "--gamma", "1.5", "--eta", "1", "--sigma", "2", "--xp", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("bias") && msg.contains("gamma"), "{msg}");
    let out = selbias(&["moments", "--theta", "0,0", "--omega", "-1,0.5", "--upper", "0,0"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_exits_zero() {
    let out = selbias(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}

#[test]
fn quick_validation_passes() {
    let out = selbias(&["validate", "--level", "quick", "--seed", "7", "--format", "csv"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{text}");
}
