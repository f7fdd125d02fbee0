use std::path::Path;
use std::process::{Command, Output};

fn aegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aegan"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = aegan(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_perfectly_separated_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.csv");
    let mut csv = String::from("clip_id,machine,section,domain,label,score_name,score\n");
    for (i, domain) in ["source", "target"].iter().cycle().take(12).enumerate() {
        let label = if i < 6 { "normal" } else { "anomaly" };
        csv.push_str(&format!(
            "c{i},fan,0,{domain},{label},emb_knn_cos,{}\n",
            i as f64 * 0.1
        ));
    }
    std::fs::write(&scores, csv).unwrap();
    let out = tmp.path().join("report");
    ok(&[
        "evaluate",
        "--scores",
        arg(&scores),
        "--score-name",
        "emb_knn_cos",
        "--out",
        arg(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["overall"]["value"].as_f64(), Some(1.0));
    assert!(out.join("report.txt").exists());
}

#[test]
fn unknown_score_name_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scores = tmp.path().join("scores.csv");
    std::fs::write(
        &scores,
        "clip_id,machine,section,domain,label,score_name,score\n",
    )
    .unwrap();
    let out = aegan(&[
        "evaluate",
        "--scores",
        arg(&scores),
        "--score-name",
        "bogus",
        "--out",
        arg(tmp.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn batch_norm_generator_stats_fail_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (data, cache, ckpt_dir) = (t.join("data"), t.join("cache"), t.join("ckpt"));
    ok(&[
        "synth",
        "--out",
        arg(&data),
        "--n-normal",
        "8",
        "--n-anomaly",
        "4",
        "--duration-secs",
        "3",
    ]);
    ok(&["extract", "--data", arg(&data), "--out", arg(&cache)]);
    ok(&[
        "train",
        "--cache",
        arg(&cache),
        "--machine",
        "synth",
        "--out",
        arg(&ckpt_dir),
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--base-channels",
        "1",
        "--latent-dim",
        "4",
        "--norm-scheme",
        "bn-generator-ln-critic",
    ]);
    let ckpt = ckpt_dir.join("synth.ckpt");
    let clip = std::fs::read_dir(data.join("synth").join("test"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();

    let stats = t.join("stats.csv");
    let out = aegan(&[
        "stats",
        "--ckpt",
        arg(&ckpt),
        "--clip",
        arg(&clip),
        "--net",
        "generator",
        "--out",
        arg(&stats),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch norm"));
    assert!(!stats.exists());
    ok(&[
        "stats",
        "--ckpt",
        arg(&ckpt),
        "--clip",
        arg(&clip),
        "--net",
        "critic",
        "--out",
        arg(&stats),
    ]);
    assert!(stats.exists());
}
