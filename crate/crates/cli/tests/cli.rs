use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cmta::corpus::save_dataset;
use cmta::fixtures::{gen_synthetic, SyntheticSpec};

const SMALL: &str = "model.hidden=16\nmodel.ff_dim=32\nmodel.layers=1\nmodel.max_len=16\nmodel.avg_pool=4\nmodel.max_pool=4\n\
                     train.epochs=2\ntrain.batch_size=16\n";

fn cmta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmta"))
        .current_dir(dir)
        .env_remove("CMTA_OUTPUT")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const THREE: &str = r##"{"id":"1","text":"Masks work https://t.co/x","language":"en","label":"False"}
{"id":"2","text":"#vacuna gratis","language":"es","rating":"Mostly False"}
{"id":"3","text":"@bob cure found","language":"en"}
"##;

#[test]
fn prep_writes_every_record() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.jsonl"), THREE).unwrap();
    let o = cmta(dir.path(), &["prep", "--input", "in.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lines(&dir.path().join("out/clean.jsonl")), 3);
    assert!(stdout(&o).contains("prep: 3 records"), "{}", stdout(&o));
    assert!(stderr(&o).starts_with("seed 42\n"));
    let first = std::fs::read_to_string(dir.path().join("out/clean.jsonl")).unwrap();
    assert!(first.lines().next().unwrap().contains(r#""clean_text":"#));
}

#[test]
fn prep_on_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("in.jsonl"), "").unwrap();
    let o = cmta(dir.path(), &["prep", "--input", "in.jsonl", "--output", "clean.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("clean.jsonl")).unwrap(), b"");
}

#[test]
fn prep_skips_bad_lines_unless_strict() {
    let dir = tempfile::tempdir().unwrap();
    let content = THREE.replacen(r#"{"id":"2""#, r#"{"id":"2"#, 1);
    std::fs::write(dir.path().join("in.jsonl"), content).unwrap();
    let o = cmta(dir.path(), &["prep", "--input", "in.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lines(&dir.path().join("out/clean.jsonl")), 2);
    assert!(stdout(&o).contains("1 warnings"), "{}", stdout(&o));

    let o = cmta(dir.path(), &["prep", "--input", "in.jsonl", "--strict", "--output", "strict.jsonl"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_fails_validation_before_reading_data() {
    let dir = tempfile::tempdir().unwrap();
    // Loading this would be a runtime failure (exit 2).
    std::fs::write(dir.path().join("data.jsonl"), "not json\n").unwrap();
    std::fs::write(dir.path().join("vocab.txt"), "[PAD]\n[UNK]\n[CLS]\n[SEP]\n").unwrap();
    let o = cmta(
        dir.path(),
        &["--error-json", "classify", "--input", "data.jsonl", "--vocab", "vocab.txt", "--checkpoint", "none.ckpt"],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let json: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(json["exit_code"], 1);
    assert_eq!(json["error"], "validation");
    assert!(json["message"].as_str().unwrap().contains("none.ckpt"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--set", "model.hiden=3", "prep", "--input", "x"],
        vec!["--set", "train.seed=3", "prep", "--input", "x"],
        vec!["--set", "train.batch_size=0", "prep", "--input", "x"],
        vec!["--config", "missing.conf", "prep", "--input", "x"],
        vec!["prep", "--input", "missing.jsonl"],
        vec!["analyze", "--input", "missing.jsonl"],
    ] {
        let o = cmta(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let recs = gen_synthetic(&SyntheticSpec::new(&["en", "es"], 5, 1));
    save_dataset(&recs, &d.join("data.jsonl")).unwrap();
    std::fs::write(d.join("run.conf"), SMALL).unwrap();
    assert!(cmta(d, &["--config", "run.conf", "build-vocab", "--input", "data.jsonl", "--size", "200"]).status.success());
    let before = snapshot(d);
    for args in [
        vec!["prep", "--input", "data.jsonl"],
        vec!["build-vocab", "--input", "data.jsonl"],
        vec!["train", "--dataset", "data.jsonl"],
        vec!["compare", "--dataset", "data.jsonl"],
    ] {
        let mut full = vec!["--config", "run.conf", "--dry-run"];
        full.extend(args.iter());
        let o = cmta(d, &full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).contains("dry run"), "{}", stdout(&o));
    }
    assert_eq!(snapshot(d), before);
}

#[test]
fn pipeline_artifacts_parse_and_conserve_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let recs = gen_synthetic(&SyntheticSpec {
        noise: true,
        ..SyntheticSpec::new(&["en", "es"], 8, 2)
    });
    save_dataset(&recs, &d.join("data.jsonl")).unwrap();
    let mut corpus = std::fs::read_to_string(d.join("data.jsonl")).unwrap();
    corpus.push_str("{broken\n");
    std::fs::write(d.join("corpus.jsonl"), corpus).unwrap();
    std::fs::write(d.join("run.conf"), SMALL).unwrap();
    std::fs::write(d.join("expected.csv"), "language,count\nen,24\nes,20\n").unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "run.conf", "--output-dir", "art"];
        full.extend(args);
        let o = cmta(d, &full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["build-vocab", "--input", "data.jsonl", "--size", "300"]);
    run(&["train", "--dataset", "data.jsonl"]);
    run(&["eval"]);
    let metrics = std::fs::read_to_string(d.join("art/metrics.csv")).unwrap();
    let parsed: BTreeMap<&str, f64> = metrics
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert!((0.0..=1.0).contains(&parsed["accuracy"]));
    assert_eq!(parsed["support"] as usize, lines(&d.join("art/split/test.jsonl")));
    assert_eq!(lines(&d.join("art/predictions.jsonl")), lines(&d.join("art/split/test.jsonl")));

    run(&["--workers", "2", "classify", "--input", "corpus.jsonl"]);
    assert_eq!(lines(&d.join("art/labeled.jsonl")), recs.len() + 1);
    let o = run(&["analyze", "--manifest", "expected.csv"]);
    assert!(!stderr(&o).contains("mismatch for en"));
    assert!(stderr(&o).contains("manifest mismatch for es: expected 20, found 24"), "{}", stderr(&o));
    let report = std::fs::read_to_string(d.join("art/report.csv")).unwrap();
    let total: u64 = report
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, recs.len() as u64);
    assert!(report.ends_with("# skipped,1\n"), "{report}");
    assert_eq!(std::fs::read_to_string(d.join("art/manifest.csv")).unwrap(), "language,count\nen,24\nes,24\n");

    run(&["analyze", "--format", "json", "--dims", "language"]);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("art/report.json")).unwrap()).unwrap();
    assert_eq!(json["total"], recs.len() as u64);
}

#[test]
fn env_paths_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("in.jsonl"), THREE).unwrap();
    std::fs::write(d.join("run.conf"), "paths.output = from-file\nseed = 5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cmta"))
        .current_dir(d)
        .env("CMTA_DATASET", "in.jsonl")
        .env("CMTA_OUTPUT", "from-env")
        .args(["--config", "run.conf", "prep"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("seed 5\n"));
    assert!(d.join("from-env/clean.jsonl").exists());
    let o = Command::new(env!("CARGO_BIN_EXE_cmta"))
        .current_dir(d)
        .env("CMTA_DATASET", "in.jsonl")
        .env("CMTA_OUTPUT", "from-env")
        .args(["--config", "run.conf", "--seed", "9", "--output-dir", "from-flag", "prep"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("seed 9\n"));
    assert!(d.join("from-flag/clean.jsonl").exists());
}

#[test]
fn help_documents_precedence_and_exit_codes() {
    let o = cmta(Path::new("."), &["--help"]);
    let h = stdout(&o);
    for needle in ["precedence", "CMTA_DATASET", "Exit codes", "prep", "build-vocab", "compare"] {
        assert!(h.contains(needle), "{needle}");
    }
}
