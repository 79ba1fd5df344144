mod common;

use common::service::{client, get_json, get_ndjson, planted_store, spawn_in_process, tiny_checkpoint, upload, TOKEN};
use crystal_core::checkpoint::load_model;
use crystal_core::evaluator::{report, PredictionRecord};
use crystal_core::labels::{is_crystal_id, ClassLabel, NUM_CLASSES};
use crystal_core::preprocess::{encode_rgb_png, prepare_for_inference};
use crystal_core::synthgen::{render, SynthSpec};
use crystal_core::triage::AppState;
use crystal_core::zoo::{ArchitectureId, Model, ModelSpec};
use crystal_core::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn state(store: crystal_core::triage::Store, token: Option<&str>) -> AppState {
    AppState {
        store,
        model: Model::build(ModelSpec::new(ArchitectureId::Lcn, 7)).unwrap(),
        checkpoint_digest: "fixture".into(),
        token: token.map(str::to_string),
    }
}

fn random_activations(rng: &mut ChaCha8Rng) -> [f64; NUM_CLASSES] {
    let mut a = [0.0; NUM_CLASSES];
    for v in a.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let sum: f64 = a.iter().sum();
    a.map(|v| v / sum)
}

/// Top-n crystal flag computed from scratch: some label ranked in the first
/// n (ties to the lower id) is a crystal label.
fn flagged(a: &[f64; NUM_CLASSES], n: usize) -> bool {
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&x, &y| a[y].total_cmp(&a[x]).then(x.cmp(&y)));
    order[..n].iter().any(|&l| is_crystal_id(l))
}

#[test]
fn queue_orders_and_paginates_planted_items() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Keep drawing until exactly 25 items are top-2 flagged.
    let mut acts = Vec::new();
    let mut n_flagged = 0;
    while n_flagged < 25 {
        let a = random_activations(&mut rng);
        if flagged(&a, 2) {
            n_flagged += 1;
        }
        acts.push(a);
    }
    let base = spawn_in_process(state(planted_store(dir.path(), &acts), Some(TOKEN)));
    let c = client();

    let mut expected: Vec<(f64, String)> = acts
        .iter()
        .enumerate()
        .filter(|(_, a)| flagged(a, 2))
        .map(|(i, a)| {
            let m = [3, 5, 6, 7, 9].iter().map(|&l| a[l]).fold(f64::MIN, f64::max);
            (m, format!("item-{i:02}"))
        })
        .collect();
    expected.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let expected: Vec<String> = expected.into_iter().map(|e| e.1).collect();

    let mut seen = Vec::new();
    let mut sizes = Vec::new();
    for offset in [0, 10, 20] {
        let page = get_json(&c, &format!("{base}/queue?strategy=top2&status=pending&offset={offset}&limit=10"));
        assert_eq!(page["total"], 25);
        let items = page["items"].as_array().unwrap();
        sizes.push(items.len());
        seen.extend(items.iter().map(|i| i["record_id"].as_str().unwrap().to_string()));
    }
    assert_eq!(sizes, [10, 10, 5]);
    assert_eq!(seen, expected);

    // Every top-1 flagged item is also top-2 flagged.
    let top1 = get_json(&c, &format!("{base}/queue?strategy=top1&limit=100"));
    let top1_ids: Vec<&str> = top1["items"].as_array().unwrap().iter().map(|i| i["record_id"].as_str().unwrap()).collect();
    assert!(top1_ids.iter().all(|id| seen.iter().any(|s| s == id)));

    // A reviewed item leaves the pending queue.
    let resp = c
        .post(format!("{base}/annotations"))
        .bearer_auth(TOKEN)
        .json(&json!({"record_id": expected[0], "action": "confirm_crystal", "reviewer": "r"}))
        .send()
        .unwrap();
    assert_eq!(resp.status(), 201);
    let page = get_json(&c, &format!("{base}/queue?strategy=top2&status=pending&limit=10"));
    assert_eq!(page["total"], 24);
    assert_eq!(page["items"][0]["record_id"], expected[1].as_str());
}

#[test]
fn uploaded_batch_matches_offline_inference() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let model = load_model(&ckpt).unwrap();
    let st = AppState {
        store: crystal_core::triage::Store::open(dir.path().join("data")).unwrap(),
        model: load_model(&ckpt).unwrap(),
        checkpoint_digest: crystal_core::triage::store::sha256_hex(&std::fs::read(&ckpt).unwrap()),
        token: Some(TOKEN.into()),
    };
    let base = spawn_in_process(st);
    let c = client();

    let spec = SynthSpec::new([1; NUM_CLASSES], 11);
    let raws: Vec<_> = ClassLabel::ALL.iter().map(|&l| render(&spec, l, &format!("{}-0", l.name()))).collect();
    let files: Vec<(String, Vec<u8>)> = raws
        .iter()
        .enumerate()
        .map(|(i, r)| (format!("synth-{i}.png"), encode_rgb_png(r).unwrap()))
        .collect();
    let resp = upload(&c, &base, &files);
    let items = resp["items"].as_array().unwrap();
    assert_eq!(items.len(), 10);
    for (item, raw) in items.iter().zip(&raws) {
        assert_eq!(item["created"], true);
        let gray = prepare_for_inference(raw).unwrap();
        let y = model.forward(&Tensor::from_vec(&[1, 1, 128, 128], gray.pixels)).unwrap();
        let served: Vec<f64> = item["activations"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let offline: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
        assert_eq!(served, offline);
        let top = item["ranked_labels"][0]["label"].as_str().unwrap();
        let best = (0..NUM_CLASSES).fold(0, |b, i| if offline[i] > offline[b] { i } else { b });
        assert_eq!(top, ClassLabel::ALL[best].name());
    }

    // Re-uploading is idempotent.
    let again = upload(&c, &base, &files[..1]);
    assert_eq!(again["items"][0]["created"], false);
    assert_eq!(again["items"][0]["record_id"], items[0]["record_id"]);
    let health = get_json(&c, &format!("{base}/healthz"));
    assert_eq!(health["items"], 10);

    let img = c
        .get(format!("{base}/items/{}/image", items[3]["record_id"].as_str().unwrap()))
        .bearer_auth(TOKEN)
        .send()
        .unwrap();
    assert_eq!(img.headers()["content-type"], "image/png");
    assert_eq!(img.bytes().unwrap().as_ref(), files[3].1.as_slice());
}

#[test]
fn live_report_matches_offline_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let acts: Vec<_> = (0..40).map(|_| random_activations(&mut rng)).collect();
    let base = spawn_in_process(state(planted_store(dir.path(), &acts), Some(TOKEN)));
    let c = client();

    let missing = c.get(format!("{base}/reports/live")).bearer_auth(TOKEN).send().unwrap();
    assert_eq!(missing.status(), 404);

    for i in 0..30 {
        let mut body = json!({"record_id": format!("item-{i:02}"), "reviewer": "r"});
        match i % 3 {
            0 => body["action"] = json!("confirm_crystal"),
            1 => body["action"] = json!("confirm_noncrystal"),
            _ => {
                body["action"] = json!("relabel");
                body["label"] = json!(ClassLabel::ALL[rng.random_range(0..NUM_CLASSES)].name());
            }
        }
        let resp = c.post(format!("{base}/annotations")).bearer_auth(TOKEN).json(&body).send().unwrap();
        assert_eq!(resp.status(), 201);
    }

    let exported: Vec<PredictionRecord> = get_ndjson(&c, &format!("{base}/export/predictions"))
        .unwrap()
        .into_iter()
        .map(|v| {
            let act: Vec<f64> = serde_json::from_value(v["activations"].clone()).unwrap();
            let label: ClassLabel = v["true_label"].as_str().unwrap().parse().unwrap();
            PredictionRecord::new(v["record_id"].as_str().unwrap(), label, act.try_into().unwrap()).unwrap()
        })
        .collect();
    assert_eq!(exported.len(), 30);
    let offline = serde_json::to_value(report(&exported).unwrap()).unwrap();
    let mut live = get_json(&c, &format!("{base}/reports/live"));
    assert_eq!(live["annotated"], 30);
    live.as_object_mut().unwrap().remove("annotated");
    assert_eq!(live, offline);

    let manifest = get_ndjson(&c, &format!("{base}/export/manifest")).unwrap();
    assert_eq!(manifest.len(), 30);
}

#[test]
fn auth_validation_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let acts = vec![[0.1; NUM_CLASSES]; 2];
    let base = spawn_in_process(state(planted_store(dir.path(), &acts), Some(TOKEN)));
    let c = client();

    assert_eq!(c.get(format!("{base}/healthz")).send().unwrap().status(), 200);
    let denied = c.get(format!("{base}/queue")).send().unwrap();
    assert_eq!(denied.status(), 401);
    assert_eq!(denied.json::<Value>().unwrap()["code"], "unauthorized");
    let wrong = c.get(format!("{base}/queue")).bearer_auth("nope").send().unwrap();
    assert_eq!(wrong.status(), 401);

    let post = |body: Value| c.post(format!("{base}/annotations")).bearer_auth(TOKEN).json(&body).send().unwrap();
    assert_eq!(post(json!({"record_id": "missing", "action": "confirm_crystal", "reviewer": "r"})).status(), 404);
    assert_eq!(post(json!({"record_id": "item-00", "action": "approve", "reviewer": "r"})).status(), 400);
    assert_eq!(post(json!({"record_id": "item-00", "action": "relabel", "reviewer": "r"})).status(), 400);
    assert_eq!(
        post(json!({"record_id": "item-00", "action": "relabel", "label": "sand", "reviewer": "r"})).status(),
        400
    );
    assert_eq!(post(json!({"record_id": "item-00", "action": "confirm_crystal", "reviewer": " "})).status(), 400);

    let ok = post(json!({"record_id": "item-00", "action": "confirm_crystal", "reviewer": "r", "expected_version": 0}));
    assert_eq!(ok.status(), 201);
    let stale = post(json!({"record_id": "item-00", "action": "confirm_noncrystal", "reviewer": "s", "expected_version": 0}));
    assert_eq!(stale.status(), 409);
    assert_eq!(stale.json::<Value>().unwrap()["code"], "version_conflict");

    let first = post(json!({"record_id": "item-01", "action": "relabel", "label": "clear", "reviewer": "r", "idempotency_key": "k1"}));
    assert_eq!(first.status(), 201);
    let repeat = post(json!({"record_id": "item-01", "action": "relabel", "label": "clear", "reviewer": "r", "idempotency_key": "k1"}));
    assert_eq!(repeat.status(), 200);
    assert_eq!(repeat.json::<Value>().unwrap()["appended"], false);
    assert_eq!(get_ndjson(&c, &format!("{base}/events")).unwrap().len(), 2);

    assert_eq!(c.get(format!("{base}/items/nothing")).bearer_auth(TOKEN).send().unwrap().status(), 404);
    assert_eq!(c.get(format!("{base}/queue?strategy=top9")).bearer_auth(TOKEN).send().unwrap().status(), 400);

    let form = reqwest::blocking::multipart::Form::new()
        .part("file", reqwest::blocking::multipart::Part::bytes(b"not an image".to_vec()));
    let bad = c.post(format!("{base}/images")).bearer_auth(TOKEN).multipart(form).send().unwrap();
    assert_eq!(bad.status(), 422);
}

#[test]
fn items_persist_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    let acts = vec![[0.1; NUM_CLASSES]; 3];
    {
        let store = planted_store(dir.path(), &acts);
        store
            .annotate(crystal_core::triage::AnnotationRequest {
                record_id: "item-02".into(),
                action: crystal_core::triage::Action::Relabel { label: ClassLabel::NeedlesPlates },
                reviewer: "r".into(),
                idempotency_key: None,
                expected_version: None,
            })
            .unwrap();
    }
    let store = crystal_core::triage::Store::open(dir.path()).unwrap();
    assert_eq!(store.len(), 3);
    let item = store.get("item-02").unwrap();
    assert_eq!(item.human_label, Some(ClassLabel::NeedlesPlates));
    assert_eq!(item.version, 1);
}
