use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tbft::harness::{read_results, ResultRow, RESULTS_CSV};

const SMALL: &str = r#"{
    "task": {"samples_per_subpop": 60},
    "train_fracs": [0.2, 0.3],
    "n_seeds": 2
}"#;

fn tbft(out: &Path, args: &[&str]) -> Output {
    let cfg = out.with_extension("config.json");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tbft"))
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = tbft(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn full_pipeline_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&out, &["gen-data"]);
    ok(&out, &["train-base"]);
    ok(&out, &["--jobs", "2", "run-matrix"]);

    let rows = read_results(&out.join(RESULTS_CSV)).unwrap();
    let raw: Vec<&ResultRow> = rows.iter().filter(|r| !r.is_aggregate()).collect();
    let agg: Vec<&ResultRow> = rows.iter().filter(|r| r.is_aggregate()).collect();
    assert_eq!(raw.len(), 3 * 5 * 2 * 2);
    assert_eq!(agg.len(), 3 * 5 * 2);
    assert!(rows.iter().all(|r| r.is_ok()), "a cell failed");

    for a in &agg {
        let seeds: Vec<f64> = raw
            .iter()
            .filter(|r| {
                r.drift_kind == a.drift_kind
                    && r.block_selection == a.block_selection
                    && r.train_frac == a.train_frac
            })
            .map(|r| r.accuracy_pct)
            .collect();
        assert_eq!(seeds.len(), 2);
        let mean = (seeds[0] + seeds[1]) / 2.0;
        let std = (seeds[0] - seeds[1]).abs() / 2f64.sqrt();
        assert!((a.accuracy_pct - mean).abs() < 1e-9);
        assert!((a.accuracy_std.unwrap() - std).abs() < 1e-9);
    }
    let es = |block: &str| {
        agg.iter()
            .find(|r| r.block_selection == block)
            .map(|r| r.es_pct)
            .unwrap()
    };
    assert!(es("fc") > es("block1"));
    assert_eq!(es("full"), 0.0);

    let md = ok(&out, &["summarize"]);
    assert_eq!(md, fs::read_to_string(out.join("summary.md")).unwrap());
    for drift in ["input", "feature", "output"] {
        assert!(md.contains(&format!("## {drift} drift")));
    }
    assert!(md.contains("| train_frac | block1 | block2 | block3 | fc | Block Avg | Full |"));
    assert_eq!(
        md.matches("**").count(),
        2 * 3 * 2,
        "one bold cell per table row"
    );

    ok(&out, &["plot"]);
    for drift in ["input", "feature", "output"] {
        let svg = fs::read_to_string(out.join(format!("accuracy_{drift}.svg"))).unwrap();
        assert!(svg.contains("<!DOCTYPE svg PUBLIC \"-//W3C//DTD SVG 1.1//EN\""));
        let opts = roxmltree::ParsingOptions {
            allow_dtd: true,
            ..Default::default()
        };
        let doc = roxmltree::Document::parse_with_options(&svg, opts).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        let refs: Vec<_> = doc
            .descendants()
            .filter(|n| {
                n.attribute("class")
                    .is_some_and(|c| c.starts_with("ref-line"))
            })
            .collect();
        assert_eq!(refs.len(), 2);
        let dashed = |n: &roxmltree::Node| n.attribute("stroke-dasharray").is_some();
        let avg = refs
            .iter()
            .find(|n| n.attribute("class") == Some("ref-line block-avg"));
        let full = refs
            .iter()
            .find(|n| n.attribute("class") == Some("ref-line full"));
        assert!(!dashed(avg.unwrap()));
        assert!(dashed(full.unwrap()));
        let bars = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("bar"))
            .count();
        assert_eq!(bars, 4 * 2);
    }

    let probe = ok(&out, &["noise-probe"]);
    assert!(probe.contains("| Block Avg |"));
    let csv = fs::read_to_string(out.join("noise_probe.csv")).unwrap();
    // 4 noised rows × 6 columns × (2 seeds + aggregate), plus header
    assert_eq!(csv.lines().count(), 1 + 4 * 6 * 3);
}

#[test]
fn gen_data_is_deterministic_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&a, &["gen-data"]);
    ok(&b, &["gen-data"]);
    let names = ["source", "target_input", "target_feature", "target_output"];
    for name in names {
        for ext in ["csv", "json"] {
            let file = format!("data/{name}.{ext}");
            assert_eq!(
                fs::read(a.join(&file)).unwrap(),
                fs::read(b.join(&file)).unwrap(),
                "{file}"
            );
        }
    }
    let csvs = fs::read_dir(a.join("data"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "csv")
        })
        .count();
    assert_eq!(csvs, 4);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("data/target_input.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["drift"]["gamma"], 0.6);
    assert_eq!(sidecar["drift"]["beta"], 0.4);
    assert_eq!(sidecar["drift"]["noise_sigma"], 0.8);
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["lr_fc"], 0.01);
    assert_eq!(cfg["task"]["samples_per_subpop"], 60);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    for cmd in [
        "train-base",
        "noise-probe",
        "run-matrix",
        "summarize",
        "plot",
    ] {
        let o = tbft(&out, &[cmd]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
    ok(&out, &["gen-data"]);
    let o = tbft(&out, &["run-matrix"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-base"));
}

#[test]
fn bad_config_and_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    fs::write(out.with_extension("config.json"), r#"{"n_seeds": 0}"#).unwrap();
    assert_eq!(code(&tbft(&out, &["gen-data"])), 2);
    fs::write(out.with_extension("config.json"), "{not json").unwrap();
    assert_eq!(code(&tbft(&out, &["gen-data"])), 2);
    fs::write(out.with_extension("config.json"), SMALL).unwrap();
    assert_eq!(code(&tbft(&out, &["--jobs", "0", "gen-data"])), 2);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tbft"))
        .arg("--out")
        .arg(blocker.join("sub"))
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_results_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let csv = dir.path().join("bad.csv");
    fs::write(
        &csv,
        "drift_kind,block_selection,train_frac,seed,accuracy_pct,accuracy_std,epochs,time_s,flops_fwd,flops_bwd,energy_j,es_pct,status\n\
         input,fc,0.1,0,50,,3,0.1,1,1,0.1,60,ok\n\
         input,fc,zero,1,50,,3,0.1,1,1,0.1,60,ok\n",
    )
    .unwrap();
    let o = tbft(&out, &["summarize", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn empty_results_cannot_be_plotted() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let csv = dir.path().join("empty.csv");
    fs::write(
        &csv,
        "drift_kind,block_selection,train_frac,seed,accuracy_pct,accuracy_std,epochs,time_s,flops_fwd,flops_bwd,energy_j,es_pct,status\n",
    )
    .unwrap();
    let o = tbft(&out, &["plot", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no rows"));
}
