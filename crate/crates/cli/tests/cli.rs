use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcvi"))
        .args(args)
        .env("MCVI_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mcvi(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim_end()).unwrap()
}

#[test]
fn synth_is_deterministic_and_vi_writes_every_channel() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |o: &Path| vec!["synth", "--n-labeled", "6", "--n-unlabeled", "2", "--size", "8", "--seed", "1", "--out", p(o)].into_iter().map(String::from).collect::<Vec<_>>();
    let sa = ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    let sb = ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(sa, sb);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());

    let cache = dir.path().join("vi");
    ok(&["vi", "--input", p(&a), "--out", p(&cache)]);
    let plot = cache.join("plots").join("L0000");
    let f32_files = fs::read_dir(&plot)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "f32"))
        .count();
    assert_eq!(f32_files, 11);
    assert!(cache.join("config_effective.json").exists());
}

#[test]
fn unknown_config_key_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"vicreg": {"lamda_sim": 1}}"#).unwrap();
    let out = mcvi(&["synth", "--config", p(&cfg), "--out", p(dir.path())]);
    let err = error_line(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("lamda_sim"));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcvi(&["partition", "--input", p(&dir.path().join("nope")), "--out", p(dir.path())]);
    assert_eq!(error_line(&out)["error"], "io");
    let out = mcvi(&["vi", "--out", p(dir.path())]);
    assert!(error_line(&out)["message"].as_str().unwrap().contains("--input"));
    let out = mcvi(&["finetune", "--target", "height"]);
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.json");
    fs::write(
        &cfg,
        r#"{"vicreg": {"epochs": 2, "batch": 8, "dim": 16}, "train": {"epochs": 3}, "synth": {"n_labeled": 24, "n_unlabeled": 16, "size": 8}}"#,
    )
    .unwrap();
    let c = p(&cfg);
    let corpus = root.join("corpus");
    ok(&["synth", "--config", c, "--seed", "3", "--out", p(&corpus)]);
    ok(&["texture", "--input", p(&corpus), "--bins", "16", "--out", p(&root.join("tex"))]);
    let texture = fs::read_to_string(root.join("tex/texture.csv")).unwrap();
    assert_eq!(texture.lines().count(), 1 + 40 * 11);

    ok(&["partition", "--input", p(&corpus), "--k-clusters", "2", "--n-runs", "5", "--out", p(&root.join("split"))]);
    let split = root.join("split/split.json");
    ok(&["pretrain", "--config", c, "--input", p(&corpus), "--out", p(&root.join("pre"))]);
    let log = fs::read_to_string(root.join("pre/pretrain_log.csv")).unwrap();
    assert!(log.starts_with("epoch,L_sim,L_var,L_cov,L_total,min_dim_var,n_collapsed"));
    assert_eq!(log.lines().count(), 3);

    let ft = root.join("runs/lai");
    let init = root.join("pre/pretrained.ckpt");
    ok(&["finetune", "--config", c, "--input", p(&corpus), "--split", p(&split), "--init", p(&init), "--out", p(&ft)]);
    let effective: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("config_effective.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["lr"], 5e-4);
    let model = ft.join("model.ckpt");
    ok(&["eval", "--input", p(&corpus), "--split", p(&split), "--model", p(&model), "--out", p(&ft)]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["target"], "lai");
    assert!(eval["rmse"].as_f64().unwrap() >= 0.0);

    let spad = root.join("runs/spad");
    ok(&["finetune", "--config", c, "--input", p(&corpus), "--split", p(&split), "--target", "spad", "--freeze-encoder", "--init", p(&init), "--out", p(&spad)]);
    let effective: serde_json::Value = serde_json::from_str(&fs::read_to_string(spad.join("config_effective.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["lr"], 5e-5);
    ok(&["eval", "--input", p(&corpus), "--split", p(&split), "--model", p(&spad.join("model.ckpt")), "--out", p(&spad)]);

    ok(&["predict", "--input", p(&corpus), "--model", p(&model), "--out", p(&root.join("pred"))]);
    let preds = fs::read_to_string(root.join("pred/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 41);

    let ex = root.join("explain");
    ok(&["explain", "--input", p(&corpus), "--split", p(&split), "--model", p(&model), "--out", p(&ex)]);
    let attributions: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(ex.join("attributions.json")).unwrap()).unwrap();
    assert!(!attributions.is_empty());
    let id = attributions[0]["plot_id"].as_str().unwrap();
    for name in [format!("heatmap_{id}.ppm"), format!("overlay_{id}.ppm"), format!("channel_weights_{id}.csv")] {
        assert!(ex.join(&name).exists(), "{name}");
    }

    let report = root.join("report.csv");
    ok(&["report", p(&root.join("runs")), "--out", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run,target,subset,freeze_encoder,n,r2,rmse");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",lai,test,false,"));
    assert!(lines[2].contains(",spad,test,true,"));
}
