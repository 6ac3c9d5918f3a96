use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

fn lmv(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_lmv")).args(args).output().expect("binary runs");
    out.status.code().expect("exit code")
}

fn synth(case: &str, dir: &Path) -> PathBuf {
    let d = dir.join(case);
    assert_eq!(lmv(&["synth", "--case", case, "--out", d.to_str().unwrap()]), 0);
    d
}

fn input_args(d: &Path) -> Vec<String> {
    let mut v = Vec::new();
    for (flag, file) in [("--feeder", "feeder.toml"), ("--loads", "loads.csv"), ("--prices", "prices.csv")] {
        v.push(flag.to_string());
        v.push(d.join(file).display().to_string());
    }
    for (flag, file) in [("--investment", "investment.toml"), ("--bounds", "bounds.csv")] {
        if d.join(file).exists() {
            v.push(flag.to_string());
            v.push(d.join(file).display().to_string());
        }
    }
    v
}

fn run(d: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["run".to_string()];
    args.extend(input_args(d));
    args.push("--out".into());
    args.push(out.display().to_string());
    args.extend(extra.iter().map(|s| s.to_string()));
    lmv(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("manifest.json")).unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn six_node_day_prices_three_hours() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(run(&d, &out, &[]), 0);
    let s = summary(&out);
    assert_eq!(s["priced_hours"], 3);
    assert_eq!(s["overloaded_hours"], 3);
    assert!(out.join("run_report.json").exists());
    assert!(!manifest(&out).contains("run_report"));
}

#[test]
fn step_by_step_matches_full_run() {
    let tmp = TempDir::new().unwrap();
    let d = synth("thirty-node", tmp.path());
    let full = tmp.path().join("full");
    let steps = tmp.path().join("steps");
    assert_eq!(run(&d, &full, &[]), 0);
    for step in ["preprocess", "price", "procure"] {
        assert_eq!(run(&d, &steps, &["--only", step]), 0, "{step}");
    }
    assert_eq!(manifest(&full), manifest(&steps));
    for f in ["overloads.csv", "anchors.csv", "mcc.csv", "lmv.csv", "procurement.csv", "events.csv", "summary.json"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(steps.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_leaves_outputs_unchanged() {
    let tmp = TempDir::new().unwrap();
    let d = synth("thirty-node", tmp.path());
    let one = tmp.path().join("one");
    let four = tmp.path().join("four");
    assert_eq!(run(&d, &one, &["--threads", "1"]), 0);
    assert_eq!(run(&d, &four, &["--threads", "4"]), 0);
    assert_eq!(manifest(&one), manifest(&four));
}

#[test]
fn step_without_its_predecessor_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    assert_eq!(run(&d, &tmp.path().join("out"), &["--only", "price"]), 3);
}

#[test]
fn uncongested_feeder_has_empty_mcc() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node-uncongested", tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(run(&d, &out, &[]), 0);
    let mcc = fs::read_to_string(out.join("mcc.csv")).unwrap();
    assert_eq!(mcc.lines().count(), 1);
    assert_eq!(summary(&out)["notes"][0], "no wires investment trigger");
}

#[test]
fn flagged_hour_exits_four_and_still_writes() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node-voltage-infeasible", tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(run(&d, &out, &[]), 4);
    assert_eq!(summary(&out)["flagged_hours"][0], 12);
    assert!(fs::read_to_string(out.join("events.csv")).unwrap().contains("voltage-infeasible"));
}

#[test]
fn alpha_override_scales_factors() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run(&d, &a, &["--skip-procurement"]), 0);
    assert_eq!(run(&d, &b, &["--skip-procurement", "--alpha", "0.3"]), 0);
    let w = |dir: &Path| -> f64 {
        let text = fs::read_to_string(dir.join("mcc.csv")).unwrap();
        text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!((w(&b) - 2.0 * w(&a)).abs() < 1e-5);
    assert_eq!(summary(&b)["procured_hours"], 0);
}

#[test]
fn hour_filter_and_program_export() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(run(&d, &out, &["--hours", "17-19,22", "--export-programs"]), 0);
    assert_eq!(summary(&out)["hours"], 4);
    let listed = fs::read_dir(out.join("programs")).unwrap().count();
    // four measurements, two pricings, two procurements
    assert_eq!(listed, 8);
    assert_eq!(run(&d, &out, &["--hours", "3-x"]), 2);
}

#[test]
fn validate_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    let mut args = vec!["validate".to_string()];
    args.extend(input_args(&d));
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(lmv(&argv), 0);

    let feeder = d.join("feeder.toml");
    let mut text = fs::read_to_string(&feeder).unwrap();
    text += "\n[[lines]]\nfrom = 5\nto = 2\nr_ohm = 0.1\nx_ohm = 0.1\nampacity_a = 50.0\nlength_m = 100.0\n";
    fs::write(&feeder, text).unwrap();
    assert_eq!(lmv(&argv), 3);

    let missing = tmp.path().join("absent.toml");
    assert_eq!(
        lmv(&["validate", "--feeder", missing.to_str().unwrap(), "--loads", "x.csv", "--prices", "y.csv"]),
        2
    );
}

#[test]
fn pv_value_tables() {
    let tmp = TempDir::new().unwrap();
    let d = synth("six-node", tmp.path());
    let out = tmp.path().join("out");
    assert_eq!(run(&d, &out, &["--q-fraction", "0"]), 0);
    let irr = tmp.path().join("irr.csv");
    let pv = |rho: &str, dest: &Path| {
        let rows: String = (1..=17).map(|h| format!("{h},{rho}\n")).collect();
        fs::write(&irr, format!("hour,rho\n{rows}")).unwrap();
        lmv(&[
            "pv-value",
            "--results",
            out.to_str().unwrap(),
            "--node",
            "3",
            "--k-kw",
            "40",
            "--irradiance",
            irr.to_str().unwrap(),
            "--out",
            dest.to_str().unwrap(),
        ])
    };
    let column = |dest: &Path, k: usize| -> Vec<f64> {
        fs::read_to_string(dest.join("pv_dispatch.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(k).unwrap().parse().unwrap())
            .collect()
    };

    let dark = tmp.path().join("dark");
    assert_eq!(pv("0", &dark), 0);
    assert!(column(&dark, 2).iter().all(|&p| p == 0.0));

    // unpriced hours carry the wholesale prices, with no reactive price here
    let bright = tmp.path().join("bright");
    assert_eq!(pv("1", &bright), 0);
    let p = column(&bright, 2);
    assert_eq!(p.len(), 17);
    assert!(p.iter().all(|&p| (p - 40.0).abs() < 1e-9));

    let inputs_only = tmp.path().join("nothing");
    fs::create_dir_all(&inputs_only).unwrap();
    let code = lmv(&[
        "pv-value",
        "--results",
        inputs_only.to_str().unwrap(),
        "--node",
        "3",
        "--k-kw",
        "40",
        "--irradiance",
        irr.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
}
