use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cleftkit::exec::Exec;
use cleftkit::fusion::Diagnosis;
use cleftkit::pipeline::{CohortSpec, LearningCurve, PilotConfig, SimulationConfig};
use cleftkit::study::{cycle_report, EventStore, ManualClock, NextCase, Phase, Study, StudyPlan, Tier};
use cleftkit::synth::{ClassCounts, CohortConfig};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cleftkit"));
    for var in ["CLEFTKIT_SEED", "CLEFTKIT_CONFIG", "CLEFTKIT_OUT", "CLEFTKIT_DATA_DIR", "CLEFTKIT_LISTEN"] {
        c.env_remove(var);
    }
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_COHORT: &str = r#"
[cohort]
counts = { control = 40, cl = 6, clp = 14 }
weeks = { kind = "uniform", min = 18, max = 28 }
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL_COHORT);
    for (out, extra) in [("a", None), ("b", None), ("c", Some("--sequential"))] {
        let mut args = vec!["--config", "cfg.toml", "--seed", "11", "--out", out];
        args.extend(extra);
        args.push("gen");
        let o = run(dir.path(), &args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["truth.jsonl", "findings.jsonl", "predictions.jsonl"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(dir.path().join("c").join(f)).unwrap(), "{f} sequential");
    }
    let m = manifest(&dir.path().join("a"));
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seed"], 11);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);

    let other = run(dir.path(), &["--config", "cfg.toml", "--seed", "12", "--out", "d", "gen"]);
    assert!(other.status.success());
    assert_ne!(
        fs::read(dir.path().join("a/findings.jsonl")).unwrap(),
        fs::read(dir.path().join("d/findings.jsonl")).unwrap()
    );
}

#[test]
fn empty_cohort_writes_valid_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "[cohort]\ncounts = { control = 0, cl = 0, clp = 0 }\nweeks = { kind = \"uniform\", min = 18, max = 28 }\n");
    let o = run(dir.path(), &["--config", "cfg.toml", "gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let truth = fs::read_to_string(dir.path().join("out/truth.jsonl")).unwrap();
    assert_eq!(truth, "{\"schema\":\"cleftkit.truth\",\"version\":\"1.0\"}\n");
    let findings = fs::read_to_string(dir.path().join("out/findings.jsonl")).unwrap();
    assert_eq!(findings.lines().count(), 1);

    // Nothing to score is a user error, not a crash.
    let o = run(dir.path(), &["--out", "ev", "evaluate", "--findings", "out/findings.jsonl", "--truth", "out/truth.jsonl"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("no cases"));
}

fn gen_small(dir: &Path) {
    write_config(dir, SMALL_COHORT);
    let o = run(dir, &["--config", "cfg.toml", "--seed", "4", "gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn perfect_findings_score_one_hundred_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let o = run(
        dir.path(),
        &["--out", "ev", "evaluate", "--findings", "out/findings.jsonl", "--truth", "out/truth.jsonl", "--resamples", "100"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("ev/evaluation.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows {
        for field in ["sensitivity", "specificity", "accuracy", "f1", "auc"] {
            assert_eq!(row["metrics"][field], 1.0, "{} {field}", row["name"]);
        }
    }
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Average  100.00"), "{text}");

    let few = run(dir.path(), &["evaluate", "--findings", "out/findings.jsonl", "--truth", "out/truth.jsonl", "--resamples", "50"]);
    assert_eq!(few.status.code(), Some(1), "{}", stderr(&few));
}

#[test]
fn shuffled_input_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let shuffle = |name: &str| {
        let text = fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        // A fixed, non-trivial permutation: reverse, then rotate.
        lines.reverse();
        let k = lines.len() / 3;
        lines.rotate_left(k);
        let body: String = std::iter::once(header).chain(lines).map(|l| format!("{l}\n")).collect();
        fs::write(dir.path().join(format!("shuffled-{name}")), body).unwrap();
    };
    shuffle("predictions.jsonl");
    shuffle("truth.jsonl");
    let a = run(dir.path(), &["--out", "a", "evaluate", "--findings", "out/predictions.jsonl", "--truth", "out/truth.jsonl"]);
    let b = run(
        dir.path(),
        &["--out", "b", "evaluate", "--findings", "shuffled-predictions.jsonl", "--truth", "shuffled-truth.jsonl"],
    );
    assert!(a.status.success() && b.status.success(), "{}{}", stderr(&a), stderr(&b));
    assert_eq!(a.stdout, b.stdout);
    for f in ["evaluation.json", "evaluation.csv", "diagnoses.jsonl"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn orphaned_ids_are_listed_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let truth = fs::read_to_string(dir.path().join("out/truth.jsonl")).unwrap();
    let mut lines: Vec<&str> = truth.lines().collect();
    let dropped = lines.remove(5);
    let extra = r#"{"case_id":"ZZ999","truth":"CL"}"#;
    lines.push(extra);
    fs::write(dir.path().join("t.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = run(dir.path(), &["--out", "ev", "evaluate", "--findings", "out/findings.jsonl", "--truth", "t.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    let dropped_id: Value = serde_json::from_str(dropped).unwrap();
    assert!(err.contains(dropped_id["case_id"].as_str().unwrap()), "{err}");
    assert!(err.contains("ZZ999"), "{err}");
    assert!(!dir.path().join("ev/evaluation.json").exists());
}

#[test]
fn unknown_major_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    gen_small(dir.path());
    let truth = fs::read_to_string(dir.path().join("out/truth.jsonl")).unwrap().replacen("\"1.0\"", "\"2.0\"", 1);
    fs::write(dir.path().join("t.jsonl"), truth).unwrap();
    let o = run(dir.path(), &["evaluate", "--findings", "out/findings.jsonl", "--truth", "t.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 2.0"), "{}", stderr(&o));
}

#[test]
fn config_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "seed = 3\n\n[cohort]\ncounts = { control = \"many\", cl = 1, clp = 1 }\n");
    let o = run(dir.path(), &["--config", "cfg.toml", "gen"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("cfg.toml:4:"), "{err}");

    write_config(dir.path(), "sede = 3\n");
    let o = run(dir.path(), &["--config", "cfg.toml", "gen"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cfg.toml:1:1"), "{}", stderr(&o));
}

#[test]
fn flags_beat_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &format!("seed = 5\nout = \"from-config\"\n{SMALL_COHORT}"));
    let o = run(dir.path(), &["--config", "cfg.toml", "gen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&dir.path().join("from-config"))["seed"], 5);

    let o = bin()
        .current_dir(dir.path())
        .env("CLEFTKIT_SEED", "6")
        .env("CLEFTKIT_OUT", "from-env")
        .args(["--config", "cfg.toml", "gen"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&dir.path().join("from-env"))["seed"], 6);

    let o = bin()
        .current_dir(dir.path())
        .env("CLEFTKIT_SEED", "6")
        .env("CLEFTKIT_OUT", "from-env")
        .args(["--config", "cfg.toml", "--seed", "7", "--out", "from-flag", "gen"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&dir.path().join("from-flag"))["seed"], 7);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["evaluate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--seed", "x", "gen"]).status.code(), Some(1));
    let help = run(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("simulate"));
}

fn tiny_plan() -> StudyPlan {
    let mut plan = StudyPlan::training_pilot(17);
    plan.cycles = 1;
    plan.exam_pool.counts = ClassCounts::new(60, 6, 20);
    plan.fixed = ClassCounts::new(6, 1, 3);
    plan.random = ClassCounts::new(4, 1, 2);
    plan.training_pool.as_mut().unwrap().counts = ClassCounts::new(30, 5, 10);
    plan.training.as_mut().unwrap().cases = ClassCounts::new(3, 1, 1);
    plan.bootstrap_resamples = 200;
    plan
}

#[test]
fn single_participant_simulation_is_flagged_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut sim = SimulationConfig::reader_study(8);
    sim.cohort = CohortConfig::new(ClassCounts::new(60, 4, 16), 8);
    sim.n_resamples = 100;
    let mut pilot = PilotConfig::default_pilot(8);
    pilot.plan = tiny_plan();
    pilot.participants = vec![CohortSpec {
        tier: Tier::Trainee,
        count: 1,
        traditional: LearningCurve::flat(0.7),
        ai: LearningCurve::flat(0.7),
    }];
    pilot.allow_single_arm = true;
    sim.pilot = Some(pilot);
    let body = toml::to_string(&toml::Table::from_iter([(
        "simulation".to_string(),
        toml::Value::try_from(&sim).unwrap(),
    )]))
    .unwrap();
    write_config(dir.path(), &body);

    let a = run(dir.path(), &["--config", "cfg.toml", "--out", "a", "simulate"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(dir.path(), &["--config", "cfg.toml", "--out", "b", "simulate"]);
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let ja = fs::read(dir.path().join("a/simulation.json")).unwrap();
    assert_eq!(ja, fs::read(dir.path().join("b/simulation.json")).unwrap());

    let report: Value = serde_json::from_slice(&ja).unwrap();
    let cycles = report["pilot"].as_array().unwrap();
    assert_eq!(cycles.len(), 1);
    let notes = cycles[0]["notes"].as_array().unwrap();
    assert!(!notes.is_empty(), "degenerate pilot carries a note");
    assert!(dir.path().join("a/cycle_1.csv").exists());
}

#[test]
fn infeasible_plan_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan();
    plan.fixed = ClassCounts::new(6, 50, 3);
    fs::write(dir.path().join("plan.toml"), toml::to_string(&plan).unwrap()).unwrap();
    let o = run(dir.path(), &["simulate", "--plan", "plan.toml"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("CL"), "{}", stderr(&o));
}

/// Builds a one-cycle study in `dir` through the library, with every
/// participant's cycle complete and closed.
fn build_study(dir: &Path) -> Study {
    let clock = Arc::new(ManualClock::new(1_700_000_000_000));
    let store = EventStore::open_dir(dir).unwrap();
    let mut s = Study::create(tiny_plan(), store, clock.clone(), Exec::Sequential).unwrap();
    for (id, tier) in [("P1", Tier::Trainee), ("P2", Tier::Trainee), ("P3", Tier::Junior), ("P4", Tier::Junior)] {
        s.enroll(id, tier).unwrap();
    }
    s.randomize(false).unwrap();
    s.open_cycle(1).unwrap();
    for (k, p) in ["P1", "P2", "P3", "P4"].into_iter().enumerate() {
        for phase in [Phase::Training, Phase::Exam] {
            let info = s.start_session(p, 1, phase, "c").unwrap();
            let mut i = 0;
            while let NextCase::Case(c) = s.next_case(&info.token, "c").unwrap() {
                clock.advance(3000);
                let d = Diagnosis::ALL[(i + k) % 3];
                s.submit(&info.token, "c", &c.case_id, d, None).unwrap();
                i += 1;
            }
        }
    }
    s.close_cycle(1).unwrap();
    s
}

#[test]
fn report_reads_the_study_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let study = build_study(&data);
    let expected = cycle_report(&study, 1, Exec::Sequential).unwrap();
    drop(study);

    let text = run(dir.path(), &["--data-dir", "data", "report"]);
    assert!(text.status.success(), "{}", stderr(&text));
    assert_eq!(String::from_utf8(text.stdout).unwrap(), expected.to_text());
    let again = run(dir.path(), &["--data-dir", "data", "--sequential", "report", "--format", "json"]);
    let json = run(dir.path(), &["--data-dir", "data", "report", "--format", "json"]);
    assert_eq!(again.stdout, json.stdout);
    let csv = run(dir.path(), &["--data-dir", "data", "report", "--cycle", "1", "--format", "csv"]);
    assert_eq!(String::from_utf8(csv.stdout).unwrap(), expected.to_csv().unwrap());

    let missing = run(dir.path(), &["--data-dir", "nowhere", "report"]);
    assert_eq!(missing.status.code(), Some(1));
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn get(addr: &str, path: &str) -> Option<String> {
    let mut s = std::net::TcpStream::connect(addr).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\n\r\n").ok()?;
    let mut resp = String::new();
    s.read_to_string(&mut resp).ok()?;
    Some(resp)
}

#[cfg(unix)]
#[test]
fn serve_answers_health_and_shuts_down_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("plan.toml"), tiny_plan().to_toml()).unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let child = bin()
        .current_dir(dir.path())
        .env("CLEFTKIT_LISTEN", &addr)
        .args(["--data-dir", "data", "serve", "--plan", "plan.toml"])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let health = loop {
        if let Some(r) = get(&addr, "/health") {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    let study = get(&addr, "/study").unwrap();
    assert!(study.contains("\"events\":1"), "{study}");

    // The port is taken while this instance runs.
    let busy = bin().current_dir(dir.path()).args(["--data-dir", "other", "--listen", &addr, "serve"]).output().unwrap();
    assert_eq!(busy.status.code(), Some(1), "{}", stderr(&busy));

    let status = Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/manifest.json").exists());
    assert!(dir.path().join("data/snapshot.json").exists());

    // A restart replays the log rather than creating a second study.
    let addr2 = format!("127.0.0.1:{}", free_port());
    let mut child = bin()
        .current_dir(dir.path())
        .args(["--data-dir", "data", "--listen", &addr2, "serve", "--plan", "plan.toml"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let study2 = loop {
        if let Some(r) = get(&addr2, "/study") {
            break r;
        }
        assert!(Instant::now() < deadline, "service did not come back");
        std::thread::sleep(Duration::from_millis(50));
    };
    let body = |r: &str| r.split("\r\n\r\n").nth(1).unwrap_or_default().to_string();
    let (a, b): (Value, Value) = (serde_json::from_str(&body(&study)).unwrap(), serde_json::from_str(&body(&study2)).unwrap());
    assert_eq!(a["pool_digest"], b["pool_digest"]);
    assert_eq!(b["events"], 1);
    child.kill().unwrap();
    child.wait().unwrap();
}

#[test]
fn serve_refuses_unwritable_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("file"), "x").unwrap();
    let o = run(dir.path(), &["--data-dir", "file/sub", "--listen", "127.0.0.1:0", "serve"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
