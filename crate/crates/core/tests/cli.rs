mod common;

use std::fs;

use common::*;
use serde_json::Value;
use vvclip::image_io::{load_mask, preprocess_file, read_raw_map};
use vvclip::metrics::auroc;
use vvclip::{localize, LocalizeOptions, Model, TextTokenPair};

fn json(path: &std::path::Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn eval_agrees_with_library_pipeline() {
    let fx = cli_fixture();
    let report = fx.path("r.json");
    run_ok(&["eval", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--manifest", s(&fx.manifest), "--out", s(&report)]);
    let r = json(&report);
    let class = &r["classes"][0];
    assert_eq!(class["class"], "widget");
    assert_eq!(class["images"], 4);
    assert_eq!(r["failures"].as_array().unwrap().len(), 0);

    let model = Model::load(&fx.model, None).unwrap();
    let pair = TextTokenPair::load(&fx.tokens).unwrap();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for i in 0..4 {
        let img = preprocess_file(&fx.path(&format!("img{i}.ppm")), &model.config).unwrap();
        let loc = localize(&model, &img, &pair, &LocalizeOptions::default()).unwrap();
        scores.extend_from_slice(loc.map.scores.data());
        labels.extend(match i % 2 {
            1 => load_mask(&fx.path(&format!("img{i}_mask.pgm"))).unwrap().2,
            _ => vec![false; 48 * 48],
        });
    }
    let want = auroc(&scores, &labels).unwrap();
    let got = class["pixel"]["auroc"].as_f64().unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert_eq!(r["mean"]["pixel"]["auroc"], class["pixel"]["auroc"]);

    let csv = fs::read_to_string(report.with_extension("csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,images,pixel_auroc,pixel_f1max,pixel_pro,image_aupr,image_auroc,image_f1max"));
    assert!(lines.next().unwrap().starts_with("widget,4,"));
    assert!(lines.next().unwrap().starts_with("mean,,"));
}

#[test]
fn eval_metric_subset() {
    let fx = cli_fixture();
    let report = fx.path("r.json");
    run_ok(&[
        "eval", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--manifest", s(&fx.manifest),
        "--metrics", "auroc", "--eval-size", "32", "--out", s(&report),
    ]);
    let r = json(&report);
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&r["classes"][0]["pixel"]), ["auroc"]);
    assert_eq!(keys(&r["classes"][0]["image"]), ["auroc"]);
    let out = run_expect(
        &["eval", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--manifest", s(&fx.manifest), "--metrics", "iou", "--out", s(&report)],
        2,
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("iou"));
}

#[test]
fn eval_reports_failed_images() {
    let fx = cli_fixture();
    let mut text = fs::read_to_string(&fx.manifest).unwrap();
    text.push_str("missing.ppm\t-\twidget\t0\n");
    fs::write(&fx.manifest, text).unwrap();
    let report = fx.path("r.json");
    run_expect(&["eval", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--manifest", s(&fx.manifest), "--out", s(&report)], 1);
    let r = json(&report);
    assert_eq!(r["failures"][0]["index"], 4);
    assert_eq!(r["classes"][0]["images"], 4);
}

#[test]
fn localize_outputs() {
    let fx = cli_fixture();
    let (pgm, raw, trace) = (fx.path("m.pgm"), fx.path("m.raw"), fx.path("t.csv"));
    let out = run_ok(&[
        "localize", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous),
        "--tta", "--epochs", "0", "--out", s(&pgm), "--out-raw", s(&raw), "--trace", s(&trace),
    ]);
    let score: f32 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&score));
    let bytes = fs::read(&pgm).unwrap();
    let header = b"P5\n48 48\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 2 * 48 * 48);
    let map = read_raw_map(&raw).unwrap();
    assert_eq!(map.shape(), [48, 48]);
    for (i, v) in map.data().iter().enumerate() {
        let q = u16::from_be_bytes([bytes[header.len() + 2 * i], bytes[header.len() + 2 * i + 1]]);
        assert_eq!(q, (*v as f64 * 65535.0).round() as u16);
    }
    let csv = fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,l_d,l_p,l\n0,"));
}

#[test]
fn localize_modes_differ() {
    let fx = cli_fixture();
    let mut maps = Vec::new();
    for mode in ["qkv", "vv_multi"] {
        let raw = fx.path(&format!("{mode}.raw"));
        run_ok(&["localize", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous), "--mode", mode, "--out-raw", s(&raw)]);
        maps.push(read_raw_map(&raw).unwrap());
    }
    assert_ne!(maps[0], maps[1]);
}

#[test]
fn localize_argument_errors() {
    let fx = cli_fixture();
    let base = ["localize", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous)];
    let trace = fx.path("t.csv");
    run_expect(&[&base[..], &["--trace", s(&trace)]].concat(), 2);
    run_expect(&[&base[..], &["--mode", "kqv"]].concat(), 2);
    let missing = fx.path("nope.ppm");
    run_expect(&["localize", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&missing)], 1);
    fs::write(fx.path("bad.vvt"), b"VVTARCH1garbage").unwrap();
    run_expect(&["localize", "--model", s(&fx.path("bad.vvt")), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous)], 1);
}

fn prompts_cmd(fx: &CliFixture, extra: &[&str]) -> std::process::Output {
    let (vocab, merges) = (assets().join("toy_vocab.txt"), assets().join("toy_merges.txt"));
    let args = [&["prompts", "--model", s(&fx.model), "--vocab", s(&vocab), "--merges", s(&merges)][..], extra].concat();
    bin().args(&args).output().unwrap()
}

#[test]
fn prompt_banks() {
    let fx = cli_fixture();
    let full = fx.path("full.vvt");
    let out = prompts_cmd(&fx, &["--class", "bottle", "--out", s(&full)]);
    assert!(out.status.success());
    let pair = TextTokenPair::load(&full).unwrap();
    assert_eq!(pair.tokens.shape(), [924, 8]);

    let single = fx.path("single.json");
    fs::write(&single, r#"{"base_templates": ["a {domain} photo of a {state} {class}."], "state_pairs": [["good", "broken"]], "domain_words": [""]}"#).unwrap();
    let one = fx.path("one.vvt");
    assert!(prompts_cmd(&fx, &["--class", "bottle", "--prompts-file", s(&single), "--out", s(&one)]).status.success());
    assert_eq!(TextTokenPair::load(&one).unwrap().tokens.shape(), [2, 8]);

    let dir = fx.path("per_class");
    assert!(prompts_cmd(&fx, &["--class", "bottle,cable", "--prompts-file", s(&single), "--out", s(&dir)]).status.success());
    assert!(dir.join("bottle.vvt").is_file() && dir.join("cable.vvt").is_file());

    fs::write(&single, r#"{"base_templates": ["a {domain} photo of a {class}."], "state_pairs": [["good", "broken"]], "domain_words": [""]}"#).unwrap();
    let out = prompts_cmd(&fx, &["--class", "bottle", "--prompts-file", s(&single), "--out", s(&one)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a {domain} photo of a {class}."));
}

#[test]
fn ablation_rows() {
    let fx = cli_fixture();
    let out = fx.path("ablate.json");
    let stdout = run_ok(&[
        "ablate", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--manifest", s(&fx.manifest),
        "--vv-start-sweep", "0,1", "--out", s(&out),
    ])
    .stdout;
    let rows = json(&out)["rows"].as_array().unwrap().clone();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["default/qkv", "default/v_last", "default/vv_last", "default/vv_multi", "default/vv_multi@0", "default/vv_multi@1"]);
    assert!(rows.iter().all(|r| r["pixel_auroc"].is_number()));
    assert_eq!(String::from_utf8(stdout).unwrap(), fs::read_to_string(out.with_extension("csv")).unwrap());

    let tiers: Vec<String> = ["base", "cs", "da"].iter().map(|t| format!("{t}={}", s(&fx.tokens))).collect();
    run_ok(&[
        "ablate", "--model", s(&fx.model), "--manifest", s(&fx.manifest), "--tiers", &tiers.join(","),
        "--modes", "vv_multi", "--out", s(&out),
    ]);
    let rows = json(&out)["rows"].as_array().unwrap().clone();
    let tiers: Vec<&str> = rows.iter().map(|r| r["tier"].as_str().unwrap()).collect();
    assert_eq!(tiers, ["base", "cs", "da"]);
}

#[test]
fn bench_schema() {
    let fx = cli_fixture();
    let out = fx.path("bench.json");
    let stdout = run_ok(&[
        "bench", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous),
        "--iters", "2", "--warmup", "0", "--tta", "--epochs", "1", "--out", s(&out),
    ])
    .stdout;
    let v: Value = serde_json::from_slice(&stdout).unwrap();
    assert_eq!(v, json(&out));
    assert_eq!(v["mode"], "vv_multi");
    assert_eq!(v["iters"], 2);
    assert!(v["mean_ms"].as_f64().unwrap() > 0.0 && v["std_ms"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["tta"]["epochs"], 1);
    run_expect(&["bench", "--model", s(&fx.model), "--tokens", s(&fx.tokens), "--image", s(&fx.anomalous), "--iters", "0"], 2);
}
