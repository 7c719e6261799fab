mod common;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::sync::{Arc, RwLock};

use common::TestServer;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use sitqa_cli::server::router;
use sitqa_core::annotation::{AnnotationStore, Mode, StudyConfig, Task};

fn task(id: &str, mode: Mode) -> Task {
    Task {
        task_id: id.into(),
        mode,
        query: format!("Is {id} ready?"),
        states: vec![],
        relations: vec![],
        parent_id: None,
        image_refs: None,
    }
}

fn tasks() -> Vec<Task> {
    vec![
        task("t1", Mode::Situational),
        task("t2", Mode::Situational),
        task("t3", Mode::Consensus),
        task("t4", Mode::Consensus),
    ]
}

fn cfg() -> StudyConfig {
    StudyConfig {
        annotators_per_task: 3,
        ..Default::default()
    }
}

/// Scripted answers per (worker, task).
fn answer(worker: &str, task: &str) -> &'static str {
    match (worker, task) {
        ("w1", "t2") | ("w3", "t2") => "No",
        ("w2", "t3") => "CannotAnswer",
        (_, "t4") if worker != "w1" => "No",
        _ => "Yes",
    }
}

fn expected_label(task: &str) -> &'static str {
    let votes: Vec<&str> = ["w1", "w2", "w3"].iter().map(|w| answer(w, task)).collect();
    if votes.contains(&"CannotAnswer") {
        return "CannotAnswer";
    }
    let yes = votes.iter().filter(|v| **v == "Yes").count();
    if yes * 2 > votes.len() {
        "Yes"
    } else {
        "No"
    }
}

fn run_study(server: &TestServer, client: &Client) {
    let workers = ["w1", "w2", "w3"];
    // round-robin so workers interleave like a real session
    let mut active: Vec<&str> = workers.to_vec();
    while !active.is_empty() {
        active.retain(|w| {
            let next: Value = client
                .get(server.url(&format!("/api/tasks/next?worker={w}")))
                .send()
                .unwrap()
                .json()
                .unwrap();
            if next["task"].is_null() {
                return false;
            }
            let tid = next["task"]["task_id"].as_str().unwrap().to_string();
            let resp = client
                .post(server.url("/api/annotations"))
                .json(&json!({ "worker_id": w, "task_id": tid, "response": answer(w, &tid), "timestamp": "t" }))
                .send()
                .unwrap();
            assert_eq!(resp.status(), StatusCode::OK);
            true
        });
    }
}

#[test]
fn three_workers_complete_four_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("annotations.jsonl");
    let store = Arc::new(RwLock::new(
        AnnotationStore::open(tasks(), cfg(), &log).unwrap(),
    ));
    let server = TestServer::start(router(Arc::clone(&store), None));
    let client = Client::new();

    let first: Value = client
        .get(server.url("/api/tasks/next?worker=w1"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(first["task"]["task_id"], "t1");
    assert_eq!(first["total"], 4);

    run_study(&server, &client);

    let progress: Value = client
        .get(server.url("/api/progress"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(progress["completed_tasks"], 4);
    assert_eq!(progress["total_annotations"], 12);

    let gt: Vec<Value> = client
        .get(server.url("/api/groundtruth"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let labels: BTreeMap<String, String> = gt
        .iter()
        .map(|g| {
            (
                g["task_id"].as_str().unwrap().into(),
                g["label"].as_str().unwrap().into(),
            )
        })
        .collect();
    for t in ["t1", "t2", "t3", "t4"] {
        assert_eq!(labels[t], expected_label(t), "{t}");
    }

    let summary: Value = client
        .get(server.url("/api/summary"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(summary["complete"], true);
    assert_eq!(summary["answerability_pct"], 75.0);
    // situational has no CannotAnswer, so it is listed first
    assert_eq!(summary["modes"][0]["mode"], "situational");

    // a second identical study gives an identical export
    let dir2 = tempfile::tempdir().unwrap();
    let store2 = Arc::new(RwLock::new(
        AnnotationStore::open(tasks(), cfg(), &dir2.path().join("a.jsonl")).unwrap(),
    ));
    let server2 = TestServer::start(router(store2, None));
    run_study(&server2, &client);
    let gt2: Vec<Value> = client
        .get(server2.url("/api/groundtruth"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(gt, gt2);

    // replaying the log on disk rebuilds the same labels
    drop(server);
    let replayed =
        AnnotationStore::replay(tasks(), cfg(), BufReader::new(File::open(&log).unwrap())).unwrap();
    assert_eq!(
        serde_json::to_value(replayed.export_ground_truth()).unwrap(),
        Value::Array(gt)
    );
}

#[test]
fn api_errors() {
    let store = Arc::new(RwLock::new(AnnotationStore::new(tasks(), cfg()).unwrap()));
    let server = TestServer::start(router(store, None));
    let client = Client::new();
    let post = |body: Value| {
        client
            .post(server.url("/api/annotations"))
            .json(&body)
            .send()
            .unwrap()
    };

    assert_eq!(
        post(json!({"worker_id": "a", "task_id": "t1", "response": "Yes"})).status(),
        StatusCode::OK
    );
    let dup = post(json!({"worker_id": "a", "task_id": "t1", "response": "No"}));
    assert_eq!(dup.status(), StatusCode::CONFLICT);
    assert_eq!(
        dup.json::<Value>().unwrap()["error"],
        "duplicate_annotation"
    );

    let unknown = post(json!({"worker_id": "a", "task_id": "nope", "response": "No"}));
    assert_eq!(unknown.status(), StatusCode::NOT_FOUND);
    assert_eq!(unknown.json::<Value>().unwrap()["error"], "unknown_task");

    let bad = post(json!({"worker_id": "a", "task_id": "t2", "response": "Maybe"}));
    assert!(bad.status().is_client_error());

    let missing = client.get(server.url("/api/tasks/next")).send().unwrap();
    assert_eq!(missing.status(), StatusCode::BAD_REQUEST);

    for w in ["b", "c"] {
        post(json!({"worker_id": w, "task_id": "t1", "response": "Yes"}));
    }
    let full = post(json!({"worker_id": "d", "task_id": "t1", "response": "Yes"}));
    assert_eq!(full.json::<Value>().unwrap()["error"], "task_complete");
}

#[test]
fn static_ui_is_served_from_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let store = Arc::new(RwLock::new(AnnotationStore::new(tasks(), cfg()).unwrap()));
    let server = TestServer::start(router(store, Some(dir.path().to_path_buf())));
    let body = reqwest::blocking::get(server.url("/"))
        .unwrap()
        .text()
        .unwrap();
    assert!(body.contains("ui"));
}

#[test]
fn binary_serves_until_complete_and_exports() {
    use std::io::{BufRead, Write};
    use std::process::{Command, Stdio};

    let dir = tempfile::tempdir().unwrap();
    let tasks_path = dir.path().join("tasks.jsonl");
    let mut f = File::create(&tasks_path).unwrap();
    for t in tasks() {
        writeln!(f, "{}", serde_json::to_string(&t).unwrap()).unwrap();
    }
    drop(f);
    let out = dir.path().join("run");

    let mut child = Command::new(env!("CARGO_BIN_EXE_sitqa"))
        .args([
            "annotate-serve",
            "--bind",
            "127.0.0.1:0",
            "--exit-when-complete",
            "--annotators",
            "3",
        ])
        .arg("--tasks")
        .arg(&tasks_path)
        .arg("-o")
        .arg(&out)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let base = line
        .trim()
        .rsplit(' ')
        .next()
        .filter(|u| u.starts_with("http://"))
        .unwrap_or_else(|| panic!("no address in {line:?}"))
        .to_string();

    let client = Client::new();
    for w in ["w1", "w2", "w3"] {
        loop {
            let next: Value = client
                .get(format!("{base}/api/tasks/next?worker={w}"))
                .send()
                .unwrap()
                .json()
                .unwrap();
            let Some(tid) = next["task"]["task_id"].as_str() else {
                break;
            };
            let r = client
                .post(format!("{base}/api/annotations"))
                .json(&json!({ "worker_id": w, "task_id": tid, "response": answer(w, tid) }))
                .send()
                .unwrap();
            assert_eq!(r.status(), StatusCode::OK);
        }
    }

    let status = child.wait().unwrap();
    assert!(status.success());
    let gt = std::fs::read_to_string(out.join("groundtruth.jsonl")).unwrap();
    let labels: BTreeMap<String, String> = gt
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .map(|g| {
            (
                g["task_id"].as_str().unwrap().into(),
                g["label"].as_str().unwrap().into(),
            )
        })
        .collect();
    assert_eq!(labels.len(), 4);
    for t in ["t1", "t2", "t3", "t4"] {
        assert_eq!(labels[t], expected_label(t));
    }
    assert!(out.join("summary.json").exists());
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
}
