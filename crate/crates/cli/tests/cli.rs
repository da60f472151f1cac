use std::process::{Command, Output};

use qi_core::qfi_engine::{qfi_bounds, qfi_gaussian_closed};

fn qi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qi")).args(args).output().expect("spawn qi")
}

fn qi_threads(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qi"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .expect("spawn qi")
}

/// (header, rows) after checking the schema comment.
fn table(out: &Output, schema: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(schema));
    let split = |l: &str| l.split(',').map(str::to_string).collect::<Vec<_>>();
    let header = split(lines.next().unwrap());
    let rows = lines.map(split).collect();
    (header, rows)
}

fn col(header: &[String], row: &[String], name: &str) -> String {
    let i = header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    row[i].clone()
}

const QFI_SCHEMA: &str = "# schema: qi-qfi-csv v1";
const SIM_SCHEMA: &str = "# schema: qi-simulation-csv v1";

#[test]
fn qfi_matches_closed_form() {
    let out = qi(&["qfi", "--family", "tmsv", "--ns", "0.5", "--nb", "1"]);
    assert!(out.status.success());
    let (h, rows) = table(&out, QFI_SCHEMA);
    assert_eq!(rows.len(), 1);
    let got: f64 = col(&h, &rows[0], "H").parse().unwrap();
    let want = qfi_gaussian_closed(0.5, 1.0);
    assert!(((got - want) / want).abs() < 1e-8, "{got} vs {want}");
    assert_eq!(col(&h, &rows[0], "equals_H_C"), "false");
}

#[test]
fn coherent_equals_classical() {
    let out = qi(&["qfi", "--family", "coherent", "--ns", "1", "--nb", "50"]);
    let (h, rows) = table(&out, QFI_SCHEMA);
    let got: f64 = col(&h, &rows[0], "H").parse().unwrap();
    assert!((got - qfi_bounds(1.0, 50.0).h_c).abs() < 1e-12);
    assert_eq!(col(&h, &rows[0], "equals_H_C"), "true");
}

#[test]
fn qfi_json_has_all_fields() {
    let out = qi(&["qfi", "--family", "maxfock:5", "--nb", "2", "--format", "json"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["h", "h_q1", "h_q2", "h_c", "gain", "gain_db", "n_s", "n_b", "deficit_warning"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert!((v["h"].as_f64().unwrap() - 1.6).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    assert_eq!(qi(&["qfi", "--family", "bogus", "--nb", "1"]).status.code(), Some(2));
    assert_eq!(qi(&["qfi", "--family", "tmsv", "--nb", "1", "--rel-tol", "0"]).status.code(), Some(2));
    assert_eq!(qi(&["qfi", "--family", "cat:0", "--nb", "1"]).status.code(), Some(2));
    // the geometric tail of a very bright source outlasts the cutoff cap
    let out = qi(&["qfi", "--family", "tmsv", "--ns", "1e4", "--nb", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn curves_respect_the_cap() {
    let out = qi(&["curves", "--nb", "50", "--ns", "log:1e-4:10:9", "--family", "tmsv,cat:2,cat:inf,coherent"]);
    assert!(out.status.success());
    let (h, rows) = table(&out, QFI_SCHEMA);
    assert_eq!(rows.len(), 4 * 9);
    for r in &rows {
        let g: f64 = col(&h, r, "gain").parse().unwrap();
        assert!(g <= 2.0 + 1e-9, "{r:?}");
    }
    let edge: f64 = col(&h, &rows[0], "gain").parse().unwrap();
    assert!((edge - 2.0 * 101.0 / 102.0).abs() < 1e-3, "{edge}");
}

const SIM: &[&str] = &[
    "simulate", "--family", "tmsv", "--ns", "0.5", "--nb", "1", "--eta", "0.1", "--m", "50,100,200", "--xi", "0.3,0.5,0.7",
    "--trials", "3000", "--max-trials", "3000", "--seed", "7", "--cutoff", "16", "--bath-cutoff", "24",
];

#[test]
fn simulate_is_thread_independent() {
    let a = qi_threads(SIM, 1);
    let b = qi_threads(SIM, 4);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let (h, rows) = table(&a, SIM_SCHEMA);
    assert_eq!(rows.len(), 9);
    for name in ["classical_P_I", "classical_P_II", "classical_Pr_err_opt", "P_I_lo", "P_I_hi"] {
        assert!(h.iter().any(|c| c == name), "missing {name}");
    }
    for r in &rows {
        let (lo, p, hi): (f64, f64, f64) =
            (col(&h, r, "P_I_lo").parse().unwrap(), col(&h, r, "P_I").parse().unwrap(), col(&h, r, "P_I_hi").parse().unwrap());
        assert!(lo <= p && p <= hi);
        let opt: f64 = col(&h, r, "classical_Pr_err_opt").parse().unwrap();
        assert!(opt > 0.0 && opt <= 0.5);
    }
    assert_eq!(rows.iter().filter(|r| col(&h, r, "max_min_xi") == "true").count(), 3);
}

#[test]
fn simulate_reads_config_and_applies_overrides() {
    let dir = std::env::temp_dir().join(format!("qi-cli-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        r#"{"family":"coherent","n_s":0.5,"n_b":1.0,"eta":0.1,"m":[50,100,200],"xi":[0.5],
            "trials":2000,"max_trials":2000,"seed":3,"cutoffs":{"signal":16,"bath":24}}"#,
    )
    .unwrap();
    let out = qi(&["simulate", path.to_str().unwrap(), "--seed", "4", "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["seed"], 4);
    assert_eq!(v["config"]["family"], "coherent");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn simulate_without_events_is_unresolved() {
    let out = qi(&[
        "simulate", "--ns", "0.5", "--nb", "1", "--eta", "0.5", "--m", "3000,4000,5000", "--xi", "0.5", "--trials", "200",
        "--max-trials", "200", "--cutoff", "16", "--bath-cutoff", "24",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_rejects_bad_parameters() {
    assert_eq!(qi(&["simulate", "--xi", "1.5", "--trials", "10"]).status.code(), Some(2));
    assert_eq!(qi(&["simulate", "--m", "0", "--trials", "10"]).status.code(), Some(2));
}
