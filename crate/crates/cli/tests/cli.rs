use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lkareid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lkareid"))
        .args(args)
        .output()
        .expect("spawn lkareid")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("json on stdout")
}

#[test]
fn inspect_reference_numbers() {
    let o = lkareid(&["inspect", "--K", "21", "--d", "3", "--C", "256", "--json"]);
    assert!(o.status.success());
    let v = json(&o);
    let d = &v["decomposition"];
    assert_eq!(d["dw_kernel"], 5);
    assert_eq!(d["dd_kernel"], 7);
    assert_eq!(d["dilation"], 3);
    assert_eq!(d["receptive_field"], 23);
    assert_eq!(d["params_decomposed"], 84_480);
    assert_eq!(d["params_full_conv"], 28_901_376);

    let table = stdout(&lkareid(&["inspect", "--K", "21", "--d", "3", "--C", "256"]));
    assert!(table.contains("84,480") && table.contains("28,901,376"), "{table}");
}

#[test]
fn inspect_channel_kernel_and_trivial_kernel() {
    let v = json(&lkareid(&["inspect", "--C", "512", "--json"]));
    assert_eq!(v["eca_kernel_size"], 5);

    let v = json(&lkareid(&["inspect", "--K", "1", "--d", "1", "--json"]));
    let d = &v["decomposition"];
    assert_eq!((d["dw_kernel"].clone(), d["dd_kernel"].clone()), (1.into(), 1.into()));
    assert_eq!(d["receptive_field"], 1);
}

#[test]
fn inspect_rejects_bad_kernel() {
    let o = lkareid(&["inspect", "--K", "0", "--d", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lkareid(&["inspect", "--K", "8", "--d", "3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let o = lkareid(&["gradcheck", "--scope", "lka"]);
    assert!(o.status.success(), "{}", stdout(&o));

    let a = lkareid(&["gradcheck", "--scope", "all", "--seed", "7", "--json"]);
    let b = lkareid(&["gradcheck", "--scope", "all", "--seed", "7", "--json"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let blocks: Vec<_> = json(&a)
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["block"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(blocks, ["lka", "hca", "cross_entropy", "triplet", "model"]);
}

#[test]
fn corrupted_gradient_names_the_block() {
    let o = lkareid(&["gradcheck", "--scope", "hca", "--corrupt-analytic", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hca"));
}

const TINY: &[&str] = &[
    "--set",
    "identities=4",
    "--set",
    "images_per_identity=8",
    "--set",
    "widths=8,16",
    "--set",
    "feature_dim=16",
    "--set",
    "blocks_per_branch=1",
    "--set",
    "p=2",
    "--set",
    "k_inst=4",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lkareid(&args)
}

#[test]
fn zero_learning_rate_keeps_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--steps", "3", "--lr", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = lkareid::load_checkpoint(dir.path().join("checkpoint.lkar")).unwrap();
    let initial = lkareid::build_model(&trained.config, 0).unwrap();
    assert_eq!(trained, initial);
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn train_is_reproducible_from_its_resolved_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train(a.path(), &["--steps", "5", "--seed", "3"]).status.success());
    let cfg = a.path().join("config.txt");
    let o = lkareid(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    for f in ["config.txt", "train_log.jsonl", "checkpoint.lkar", "report.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let text = fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("seed = 3\n") && text.contains("steps = 5\n"));
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), &["--steps", "4"]).status.success());
    let out = dir.path().join("eval");
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let o = lkareid(&[
        "eval",
        "--checkpoint",
        &p("checkpoint.lkar"),
        "--query",
        &p("heldout/query.jsonl"),
        "--gallery",
        &p("heldout/gallery.jsonl"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join("report.json")).unwrap(),
        fs::read(dir.path().join("report.json")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn diverging_training_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--steps", "50", "--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

fn feature_line(f: [f64; 2], vid: usize, cam: usize) -> String {
    serde_json::json!({"feature": f, "vehicle_id": vid, "camera_id": cam}).to_string()
}

fn write_fixture(dir: &Path) {
    let query = [feature_line([1.0, 0.0], 0, 0), feature_line([0.0, 1.0], 1, 0)];
    let gallery = [
        feature_line([0.9, 0.1], 1, 1),
        feature_line([0.8, 0.2], 0, 1),
        feature_line([1.0, 0.0], 0, 0),
        feature_line([0.1, 0.9], 1, 2),
    ];
    fs::write(dir.join("query.jsonl"), query.join("\n") + "\n").unwrap();
    fs::write(dir.join("gallery.jsonl"), gallery.join("\n") + "\n").unwrap();
}

fn eval_features(dir: &Path, out: &str) -> Output {
    lkareid(&[
        "eval",
        "--query",
        dir.join("query.jsonl").to_str().unwrap(),
        "--gallery",
        dir.join("gallery.jsonl").to_str().unwrap(),
        "--out",
        dir.join(out).to_str().unwrap(),
        "--max-rank",
        "5",
    ])
}

#[test]
fn eval_precomputed_features_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let o = eval_features(dir.path(), "a");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    // Query 0: g2 is junk (same camera); cosine order g0, g1 (hit), g3.
    // Query 1: order g3 (hit), g1, g0 (hit).
    let ap = |i: usize| r["per_query_ap"][i].as_f64().unwrap();
    assert!((ap(0) - 0.5).abs() < 1e-12);
    assert!((ap(1) - 5.0 / 6.0).abs() < 1e-12);
    assert!((r["mAP"].as_f64().unwrap() - (0.5 + 5.0 / 6.0) / 2.0).abs() < 1e-12);
    assert_eq!(r["rank1"], 0.5);
    assert_eq!(r["cmc"][1], 1.0);
    assert_eq!(r["num_gallery"], 4);

    assert!(eval_features(dir.path(), "b").status.success());
    assert_eq!(
        fs::read(dir.path().join("a/report.json")).unwrap(),
        fs::read(dir.path().join("b/report.json")).unwrap()
    );
    assert!(dir.path().join("a/config.txt").exists());
}

#[test]
fn eval_rejects_empty_query_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    fs::write(dir.path().join("query.jsonl"), "").unwrap();
    let o = eval_features(dir.path(), "a");
    assert_eq!(o.status.code(), Some(1));

    fs::write(
        dir.path().join("query.jsonl"),
        feature_line([1.0, 0.0], 0, 0) + "\n{\"feature\": [1.0], \"vehicle_id\": 0, \"camera_id\": 0}\n",
    )
    .unwrap();
    let o = eval_features(dir.path(), "a");
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 2"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
