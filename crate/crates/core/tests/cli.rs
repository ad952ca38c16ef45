use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .canonicalize()
        .unwrap()
}

fn sweatid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sweatid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Copy of a shipped experiment file with absolute parameter paths and the
/// given textual replacements.
fn variant(dir: &Path, name: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = fs::read_to_string(configs().join(name)).unwrap();
    for file in ["kinetic_params.toml", "sweat_population.toml"] {
        let abs = configs().join(file);
        text = text.replace(&format!("\"{file}\""), &format!("'{}'", abs.display()));
    }
    for (from, to) in edits {
        assert!(text.contains(from), "{from:?} not in {name}");
        text = text.replacen(from, to, 1);
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn cohort_writes_25_by_23_per_group_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("sex_separation.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sweatid(&["cohort", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for group in ["female", "male"] {
        let file = format!("cohort_{group}.csv");
        let text = fs::read_to_string(a.join(&file)).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 26);
        assert!(rows.iter().all(|r| r.split(',').count() == 23));
        assert!(rows[0].starts_with("Ala,Arg,Asn,Asp,"));
        assert_eq!(
            fs::read(a.join(&file)).unwrap(),
            fs::read(b.join(&file)).unwrap()
        );
    }
    assert_eq!(
        fs::read(a.join("cohort_manifest.json")).unwrap(),
        fs::read(b.join("cohort_manifest.json")).unwrap()
    );
}

#[test]
fn empty_cohort_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "sex_separation.toml", &[("n = 25", "n = 0")]);
    let out = dir.path().join("out");
    let o = sweatid(&[
        "cohort",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(out.join("cohort_female.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("# config_sha256="));
    assert_eq!(lines[1].split(',').count(), 23);
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    assert_eq!(
        sweatid(&["cohort", "--config", path_str(&missing)])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sweatid(&["cohort"]).status.code(), Some(2));

    let bad_acid = variant(
        dir.path(),
        "alanine_only.toml",
        &[("acid = \"Ala\"", "acid = \"Ser\"")],
    );
    let o = sweatid(&["pipeline", "--config", path_str(&bad_acid)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let bad_vocab = variant(
        dir.path(),
        "sex_separation.toml",
        &[("age_group = \"18-30\"", "age_group = \"teen\"")],
    );
    assert_eq!(
        sweatid(&["cohort", "--config", path_str(&bad_vocab)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn report_with_a_single_user_is_insufficient_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "alanine_only.toml", &[("n = 25", "n = 1")]);
    let out = dir.path().join("out");
    let o = sweatid(&[
        "report",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn pipeline_enroll_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "alanine_only.toml", &[("n = 25", "n = 2")]);
    let out = dir.path().join("out");
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend([
            "--config",
            path_str(&cfg),
            "--out",
            path_str(&out),
            "--jobs",
            "2",
        ]);
        let o = sweatid(&all);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["pipeline"]);
    run(&["enroll"]);
    let template = out.join("templates/female-000.json");
    let stream = out.join("outputs/female-000.csv");
    let impostor = out.join("outputs/female-001.csv");
    for s in [&stream, &impostor] {
        let line = run(&[
            "verify",
            "--template",
            path_str(&template),
            "--stream",
            path_str(s),
            "--from-step",
            "6",
        ]);
        assert!(
            ["Accept", "Reject", "Continue"]
                .iter()
                .any(|v| line.starts_with(v)),
            "{line}"
        );
    }
    let audit = fs::read_to_string(out.join("audit.csv")).unwrap();
    assert!(audit.starts_with("# config_sha256="));
    // One header for both appended sessions.
    assert_eq!(
        audit.lines().filter(|l| l.starts_with("user_id")).count(),
        1
    );
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&template).unwrap()).unwrap();
    assert_eq!(record["user_id"], "female-000");
}

#[test]
fn roc_subcommand_on_a_score_file() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(
        &scores,
        "label,score\ngenuine,0.8\ngenuine,0.35\nimpostor,0.4\nimpostor,0.1\n",
    )
    .unwrap();
    let out = dir.path().join("roc");
    let o = sweatid(&[
        "roc",
        "--scores",
        path_str(&scores),
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("auc=0.750000"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("roc_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["auc"], 0.75);
    let csv = fs::read_to_string(out.join("roc.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "threshold,fpr,tpr"));

    fs::write(&scores, "label,score\ngenuine,0.8\n").unwrap();
    let o = sweatid(&[
        "roc",
        "--scores",
        path_str(&scores),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_json_names_hash_and_seeds_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "alanine_only.toml", &[("n = 25", "n = 4")]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        let o = sweatid(&[
            "report",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(out),
            "--seed-override",
            "7",
            "--jobs",
            jobs,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("report.json")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["config_sha256"].as_str().unwrap().len(), 64);
    assert!(report["seeds"]["cohort.female"].is_u64());
    assert!(report["seeds"]["series"].is_u64());
    assert!(a.join("roc_k1.csv").exists() && a.join("roc_k6.csv").exists());
}
