//! Service fixtures: an in-process server for API tests and the
//! kill-and-restart durability scenario run against the real binary.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use crystal_core::checkpoint::Checkpoint;
use crystal_core::preprocess::{encode_rgb_png, RawImage};
use crystal_core::triage::{router, AppState, Store};
use crystal_core::zoo::{ArchitectureId, Model, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const TOKEN: &str = "test-token";

/// Writes an untrained lcn checkpoint and returns its path.
pub fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let model = Model::build(ModelSpec::new(ArchitectureId::Lcn, 7)).unwrap();
    let path = dir.join("model.ckpt");
    Checkpoint::capture(&model).save(&path).unwrap();
    path
}

/// Serves `state` on an ephemeral port from a background runtime.
pub fn spawn_in_process(state: AppState) -> String {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(Arc::new(state), 64 << 20)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .unwrap()
}

/// Small solid-color PNGs; distinct colors give distinct digests.
pub fn solid_pngs(n: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|i| {
            let v = (i * 37 % 251) as u8;
            encode_rgb_png(&RawImage::filled(960, 960, [v, 255 - v, (i * 11 % 256) as u8])).unwrap()
        })
        .collect()
}

pub fn upload(c: &reqwest::blocking::Client, base: &str, files: &[(String, Vec<u8>)]) -> Value {
    let mut form = reqwest::blocking::multipart::Form::new();
    for (name, bytes) in files {
        form = form.part(
            "file",
            reqwest::blocking::multipart::Part::bytes(bytes.clone()).file_name(name.clone()),
        );
    }
    let resp = c
        .post(format!("{base}/images"))
        .bearer_auth(TOKEN)
        .multipart(form)
        .send()
        .unwrap();
    assert!(resp.status().is_success(), "upload failed: {}", resp.status());
    resp.json().unwrap()
}

pub fn get_json(c: &reqwest::blocking::Client, url: &str) -> Value {
    let resp = c.get(url).bearer_auth(TOKEN).send().unwrap();
    assert!(resp.status().is_success(), "GET {url}: {}", resp.status());
    resp.json().unwrap()
}

pub fn get_ndjson(c: &reqwest::blocking::Client, url: &str) -> Result<Vec<Value>, String> {
    let resp = c.get(url).bearer_auth(TOKEN).send().map_err(|e| e.to_string())?;
    if !resp.status().is_success() {
        return Err(format!("GET {url}: {}", resp.status()));
    }
    let text = resp.text().map_err(|e| e.to_string())?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

/// The service binary running on an ephemeral port.
pub struct ServiceProcess {
    child: Child,
    pub base: String,
}

impl ServiceProcess {
    pub fn start(bin: &Path, config: &Path) -> Result<Self, String> {
        let mut child = Command::new(bin)
            .args(["serve", "--config"])
            .arg(config)
            .env("CRYSTAL_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", bin.display()))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| format!("unexpected first line from service: {line:?}"))?;
        Ok(Self {
            base: format!("http://{addr}"),
            child,
        })
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ServiceProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

#[derive(Clone)]
struct Planned {
    key: String,
    record_id: String,
    body: Value,
}

/// Serial oracle: latest event per item decides its status.
fn oracle_statuses(item_ids: &[String], events: &[Value]) -> HashMap<String, (String, Option<String>)> {
    let mut out: HashMap<String, (String, Option<String>)> =
        item_ids.iter().map(|id| (id.clone(), ("pending".to_string(), None))).collect();
    let mut sorted: Vec<&Value> = events.iter().collect();
    sorted.sort_by_key(|e| e["seq"].as_u64());
    for e in sorted {
        let (status, label) = match e["action"].as_str().unwrap() {
            "confirm_crystal" => ("confirmed_crystal", None),
            "confirm_noncrystal" => ("confirmed_noncrystal", None),
            "relabel" => ("relabeled", e["label"].as_str().map(str::to_string)),
            other => panic!("unexpected action {other}"),
        };
        out.insert(e["record_id"].as_str().unwrap().to_string(), (status.to_string(), label));
    }
    out
}

pub struct DurabilityOutcome {
    pub acknowledged_before_kill: usize,
    pub recovered_events: usize,
    pub final_events: usize,
}

/// Four clients send 25 annotations each; the service is killed once
/// `kill_after` have been acknowledged, then restarted. Checks that every
/// acknowledged event survived with its sequence number, that the log is
/// contiguous, and that item statuses equal a serial replay. Clients then
/// resend everything with the same idempotency keys, which must bring the
/// log to exactly 100 events.
pub fn durability_scenario(bin: &Path, work: &Path, kill_after: usize) -> Result<DurabilityOutcome, String> {
    let ckpt = tiny_checkpoint(work);
    let data_dir = work.join("data");
    let config = work.join("service.toml");
    std::fs::write(
        &config,
        format!(
            "listen = \"127.0.0.1:0\"\ndata_dir = {:?}\ncheckpoint = {:?}\ntoken = \"{TOKEN}\"\n",
            data_dir.display().to_string(),
            ckpt.display().to_string()
        ),
    )
    .map_err(|e| e.to_string())?;

    let mut svc = ServiceProcess::start(bin, &config)?;
    let c = client();
    let files: Vec<(String, Vec<u8>)> = solid_pngs(8)
        .into_iter()
        .enumerate()
        .map(|(i, b)| (format!("plate-{i}.png"), b))
        .collect();
    let uploaded = upload(&c, &svc.base, &files);
    let item_ids: Vec<String> = uploaded["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["record_id"].as_str().unwrap().to_string())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let labels = ["clear", "micro_crystals", "phase_separation", "needles_plates"];
    let plans: Vec<Vec<Planned>> = (0..4)
        .map(|client_no| {
            (0..25)
                .map(|k| {
                    let record_id = item_ids[rng.random_range(0..item_ids.len())].clone();
                    let key = format!("c{client_no}-{k}");
                    let mut body = json!({
                        "record_id": record_id,
                        "reviewer": format!("reviewer-{client_no}"),
                        "idempotency_key": key,
                    });
                    match rng.random_range(0..3) {
                        0 => body["action"] = json!("confirm_crystal"),
                        1 => body["action"] = json!("confirm_noncrystal"),
                        _ => {
                            body["action"] = json!("relabel");
                            body["label"] = json!(labels[rng.random_range(0..labels.len())]);
                        }
                    }
                    Planned { key, record_id, body }
                })
                .collect()
        })
        .collect();

    // Acknowledged (idempotency key, seq) pairs.
    let acked: Arc<Mutex<Vec<(String, u64, String)>>> = Arc::default();
    let count = Arc::new(AtomicUsize::new(0));
    let (kill_tx, kill_rx) = mpsc::channel::<()>();
    let base = svc.base.clone();
    let workers: Vec<_> = plans
        .iter()
        .cloned()
        .map(|plan| {
            let (acked, count, kill_tx, base) = (acked.clone(), count.clone(), kill_tx.clone(), base.clone());
            std::thread::spawn(move || {
                let c = client();
                for p in plan {
                    let resp = c
                        .post(format!("{base}/annotations"))
                        .bearer_auth(TOKEN)
                        .json(&p.body)
                        .send();
                    let Ok(resp) = resp else { break };
                    if !resp.status().is_success() {
                        break;
                    }
                    let Ok(v) = resp.json::<Value>() else { break };
                    let seq = v["event"]["seq"].as_u64().expect("seq in response");
                    acked.lock().unwrap().push((p.key.clone(), seq, p.record_id.clone()));
                    if count.fetch_add(1, Ordering::SeqCst) + 1 == kill_after {
                        let _ = kill_tx.send(());
                    }
                }
            })
        })
        .collect();
    drop(kill_tx);
    let _ = kill_rx.recv();
    svc.kill();
    for w in workers {
        w.join().map_err(|_| "client thread panicked".to_string())?;
    }
    let acked = acked.lock().unwrap().clone();

    let svc = ServiceProcess::start(bin, &config)?;
    let events = get_ndjson(&c, &format!("{}/events", svc.base))?;
    for (i, e) in events.iter().enumerate() {
        if e["seq"].as_u64() != Some(i as u64 + 1) {
            return Err(format!("event {i} has seq {}", e["seq"]));
        }
    }
    let by_key: HashMap<&str, &Value> = events
        .iter()
        .filter_map(|e| Some((e["idempotency_key"].as_str()?, e)))
        .collect();
    for (key, seq, record_id) in &acked {
        match by_key.get(key.as_str()) {
            Some(e) if e["seq"].as_u64() == Some(*seq) && e["record_id"].as_str() == Some(record_id) => {}
            Some(e) => return Err(format!("acknowledged event {key} changed: {e}")),
            None => return Err(format!("acknowledged event {key} (seq {seq}) lost")),
        }
    }
    check_statuses(&c, &svc.base, &item_ids, &events)?;
    let recovered_events = events.len();

    for plan in &plans {
        for p in plan {
            let resp = c
                .post(format!("{}/annotations", svc.base))
                .bearer_auth(TOKEN)
                .json(&p.body)
                .send()
                .map_err(|e| e.to_string())?;
            if !resp.status().is_success() {
                return Err(format!("resend of {} failed: {}", p.key, resp.status()));
            }
        }
    }
    let events = get_ndjson(&c, &format!("{}/events", svc.base))?;
    let keys: HashSet<&str> = events.iter().filter_map(|e| e["idempotency_key"].as_str()).collect();
    if events.len() != 100 || keys.len() != 100 {
        return Err(format!("after resend: {} events, {} distinct keys", events.len(), keys.len()));
    }
    check_statuses(&c, &svc.base, &item_ids, &events)?;
    Ok(DurabilityOutcome {
        acknowledged_before_kill: acked.len(),
        recovered_events,
        final_events: events.len(),
    })
}

fn check_statuses(c: &reqwest::blocking::Client, base: &str, item_ids: &[String], events: &[Value]) -> Result<(), String> {
    let oracle = oracle_statuses(item_ids, events);
    for id in item_ids {
        let item = get_json(c, &format!("{base}/items/{id}"));
        let got = (
            item["status"].as_str().unwrap().to_string(),
            item["human_label"].as_str().map(str::to_string),
        );
        if got != oracle[id] {
            return Err(format!("item {id}: service {got:?}, replay {:?}", oracle[id]));
        }
    }
    Ok(())
}

/// A store over `dir` with planted items, for tests that need exact
/// activations.
pub fn planted_store(dir: &Path, activations: &[[f64; 10]]) -> Store {
    use crystal_core::triage::store::{sha256_hex, IngestedImage};
    let store = Store::open(dir).unwrap();
    for (i, act) in activations.iter().enumerate() {
        let bytes = format!("planted-{i}").into_bytes();
        let digest = sha256_hex(&bytes);
        store
            .insert(
                IngestedImage {
                    record_id: format!("item-{i:02}"),
                    image_digest: digest,
                    checkpoint_digest: "fixture".into(),
                    file_name: None,
                    width: 960,
                    height: 960,
                    activations: *act,
                    ingested_at: chrono::Utc::now(),
                },
                &bytes,
            )
            .unwrap();
    }
    store
}
