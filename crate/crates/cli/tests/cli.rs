use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tailor_core::pattern::io::parse_pattern;
use tailor_core::pattern::metrics::DEFAULT_METRIC_GRID;
use tailor_core::pattern::pattern_metrics_on;
use tailor_core::traingen::read_dataset;

fn tailor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailor")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/skirt_4p.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn render_golden_skirt() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("skirt.svg");
    let out = tailor(&["render", "--pattern", s(&golden()), "--out-svg", s(&svg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(svg).unwrap();
    assert_eq!(text.matches("<path").count(), 4);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&tailor(&[])), 2);
    assert_eq!(code(&tailor(&["render", "--pattern", "a.json", "--out-svg", "b.svg", "--colour", "red"])), 2);
    assert_eq!(code(&tailor(&["frobnicate"])), 2);
    let out = tailor(&["infer", "--cloud", "c.xyz"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--checkpoint"), "{}", stderr(&out));
    assert_eq!(code(&tailor(&["--help"])), 0);
}

#[test]
fn domain_errors_exit_one_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = tailor(&["render", "--pattern", s(&missing), "--out-svg", s(&dir.path().join("x.svg"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("missing.json"), "{}", stderr(&out));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"panels\": [}").unwrap();
    let out = tailor(&["render", "--pattern", s(&bad), "--out-svg", s(&dir.path().join("x.svg"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line"), "{}", stderr(&out));

    let out = tailor(&["gen-data", "--families", "ballgown", "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_passes() {
    let out = tailor(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    let last = text.lines().last().unwrap();
    let err: f64 = last
        .strip_prefix("max relative error ")
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("{last}"));
    assert!(err < 1e-4);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let data = p("data");
    let out = tailor(&["gen-data", "--families", "skirt-2p,skirt-4p", "--count", "2", "--out", s(&data), "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    std::fs::write(p("run.cfg"), "preset = tiny\nepochs = 2\nstitch_epochs = 2\nbatch_size = 2\nlr = 1e-3\n").unwrap();
    let ckpt = p("model.ptck");
    let out = tailor(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&p("run.cfg")),
        "--out-checkpoint",
        s(&ckpt),
        "--curve",
        s(&p("curve.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(p("curve.csv")).unwrap();
    assert!(csv.starts_with("epoch,part,value\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 6);

    let cloud = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("00000"))
        .map(|p| p.with_extension("xyz"))
        .unwrap();
    let infer = |out_name: &str| {
        tailor(&[
            "infer",
            "--cloud",
            s(&cloud),
            "--checkpoint",
            s(&ckpt),
            "--mode",
            "text",
            "--out-pattern",
            s(&p(out_name)),
            "--out-svg",
            s(&p("pred.svg")),
            "--seed",
            "0",
        ])
    };
    assert_eq!(code(&infer("pred.json")), 0);
    assert_eq!(code(&infer("again.json")), 0);
    assert_eq!(std::fs::read(p("pred.json")).unwrap(), std::fs::read(p("again.json")).unwrap());

    // `eval` scores sample i with seed i, so sample 0 matches the seed-0 inference above.
    let eval = tailor(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--mode", "standard", "--jobs", "2"]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let report: serde_json::Value = serde_json::from_str(&stdout(&eval)).unwrap();
    let truth = &read_dataset(&data).unwrap()[0].pattern;
    let metrics = pattern_metrics_on(&parse_pattern(&p("pred.json")).unwrap(), truth, &DEFAULT_METRIC_GRID);
    let want = serde_json::to_value(metrics).unwrap();
    assert_eq!(report["samples"][0]["metrics"], want);
    let serial = tailor(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt)]);
    assert_eq!(stdout(&serial), stdout(&eval));

    let out = tailor(&[
        "personalize",
        "--cloud",
        s(&cloud),
        "--checkpoint",
        s(&ckpt),
        "--activate",
        "skirt-front,skirt-back",
        "--out-pattern",
        s(&p("mine.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mine = parse_pattern(&p("mine.json")).unwrap();
    assert!(mine.panels.len() <= 2);
    assert!(mine.panels.iter().all(|q| q.class_id <= 1));

    std::fs::write(p("cases.txt"), "skirt-2p,skirt-4p\nskirt-4p,skirt-2p\n").unwrap();
    let out = tailor(&[
        "eval",
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--mode",
        "personalized",
        "--cases",
        s(&p("cases.txt")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cases: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(cases.as_array().unwrap().len(), 4);

    let out = tailor(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--mode", "personalized"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn personalize_rejects_unknown_classes() {
    let out = tailor(&[
        "personalize",
        "--cloud",
        "c.xyz",
        "--checkpoint",
        "m.ptck",
        "--activate",
        "cape",
        "--out-pattern",
        "o.json",
    ]);
    assert_eq!(code(&out), 1);
}
