use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_spkstyle");

const TINY: &str = r#"
[model]
utt_layers = 2
utt_hidden = 16
utt_dim = 16
emb_layers = 2
emb_hidden = 16
emb_dim = 16
cont_hidden = 16
content_dim = 4
dec_hidden = 16
adv_hidden = 16
adv_head_dim = 8

[train]
batch_size = 4
crop_frames = 160
iterations = 2
checkpoint_every = 0

[eval]
n_target = 50
n_nontarget = 50

[eval.probe]
epochs = 5
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SPKSTYLE_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not json: {last}"))
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "command failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, speakers: &str, styles: &str, utts: &str, duration: &str) -> Output {
    run(&[
        "synth-data",
        "--speakers",
        speakers,
        "--styles",
        styles,
        "--utts-per-cell",
        utts,
        "--duration",
        duration,
        "--seed",
        "7",
        "--out",
        p(dir),
    ])
}

#[test]
fn synth_data_writes_four_feature_files_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = synth(&d, "2", "2", "1", "1");
    assert_eq!(out.status.code(), Some(0));
    let feats = std::fs::read_dir(d.join("feats")).unwrap().count();
    assert_eq!(feats, 4);
    let manifest = std::fs::read_to_string(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    let echo = std::fs::read_to_string(d.join("run.toml")).unwrap();
    assert!(echo.contains("seed = 7"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth-data", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(stderr_json(&out)["error"], "usage");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["fly"]).status.code(), Some(2));
}

#[test]
fn training_on_one_speaker_names_the_contrastive_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(synth(&d, "2", "2", "2", "2.5").status.success());
    let manifest = d.join("manifest.jsonl");
    let one: Vec<String> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"speaker_id\":\"spk000\""))
        .map(|l| l.replace("\"split\":\"unseen_style\"", "\"split\":\"train\""))
        .collect();
    let single = d.join("single.jsonl");
    std::fs::write(&single, one.join("\n")).unwrap();
    let out = run(&["train", "--manifest", p(&single), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("CPC"));
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["synth-data", "--config", p(&cfg), "--out", p(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn duplicate_ids_are_rejected_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(synth(&d, "2", "2", "1", "1").status.success());
    let manifest = d.join("manifest.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let first = text.lines().next().unwrap().to_string();
    std::fs::write(&manifest, format!("{text}{first}\n")).unwrap();
    let out = run(&["train", "--manifest", p(&manifest), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("duplicate utterance_id"));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn dangling_feature_path_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(synth(&d, "2", "2", "1", "1").status.success());
    let victim = std::fs::read_dir(d.join("feats")).unwrap().next().unwrap().unwrap().path();
    std::fs::remove_file(victim).unwrap();
    let out = run(&["export-emb", "--ckpt", "none.ckpt", "--manifest", p(&d.join("manifest.jsonl")), "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("missing file"));
}

#[test]
fn train_evaluate_convert_and_project() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, "3", "2", "5", "2.5").status.success());
    let manifest = data.join("manifest.jsonl");
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run_dir = tmp.path().join("run");

    let trained = stdout_json(&run(&[
        "train",
        "--config",
        p(&cfg),
        "--manifest",
        p(&manifest),
        "--out",
        p(&run_dir),
        "--seed",
        "3",
        "--sequential",
    ]));
    assert_eq!(trained["main_updates"], 2);
    assert_eq!(trained["adversarial_updates"], 6);
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("iteration,rec,cpc_s,kld,adv_cpc,ce_spk,adv_ce_sty,total"));
    let echo = std::fs::read_to_string(run_dir.join("run.toml")).unwrap();
    assert!(echo.contains("seed = 3"));

    let report = tmp.path().join("sv.json");
    let sv = stdout_json(&run(&[
        "eval-sv",
        "--config",
        p(&cfg),
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--stream",
        "speaker",
        "--condition",
        "unconstrained",
        "--out",
        p(&report),
    ]));
    let eer = sv["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer));
    assert!(sv["n_target"].as_u64().unwrap() > 0);
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(written, sv);
    assert!(tmp.path().join("sv.json.run.toml").is_file());

    let probe = stdout_json(&run(&[
        "eval-probe",
        "--config",
        p(&cfg),
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--label",
        "speaker_id",
        "--stream",
        "style",
    ]));
    assert!(probe["accuracy"].as_f64().unwrap() <= 1.0);

    let feats: Vec<_> = std::fs::read_dir(data.join("feats")).unwrap().map(|e| e.unwrap().path()).collect();
    let conv = tmp.path().join("conv.dsf");
    let c = stdout_json(&run(&[
        "convert",
        "--ckpt",
        p(&ckpt),
        "--src",
        p(&feats[0]),
        "--tgt",
        p(&feats[1]),
        "--mode",
        "both",
        "--out",
        p(&conv),
    ]));
    assert_eq!(c["frames"], 200);
    assert!(conv.is_file());

    let emb = tmp.path().join("emb.csv");
    let e = stdout_json(&run(&[
        "export-emb",
        "--ckpt",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--stream",
        "style",
        "--out",
        p(&emb),
    ]));
    assert_eq!(e["dim"], 16);
    let proj = tmp.path().join("proj.csv");
    let pr = stdout_json(&run(&["project-2d", "--emb", p(&emb), "--stream", "style", "--out", p(&proj)]));
    assert_eq!(pr["rows"], e["rows"]);
    let header = std::fs::read_to_string(&proj).unwrap();
    assert!(header.starts_with("utterance_id,speaker_id,session_id,style_id,split,x,y"));
}

#[test]
fn seed_comes_from_the_environment_when_not_given() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    let out = Command::new(BIN)
        .args([
            "synth-data",
            "--speakers",
            "2",
            "--styles",
            "2",
            "--utts-per-cell",
            "1",
            "--duration",
            "1",
            "--out",
            p(&d),
        ])
        .env("SPKSTYLE_SEED", "41")
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["seed"], 41);
}

#[test]
fn prep_extracts_features_with_reverberated_copies() {
    use spkstyle::features::{write_wav, Waveform};
    use spkstyle::io::{Manifest, ManifestRecord};
    use spkstyle::synthdata::generate_rir;

    let tmp = tempfile::tempdir().unwrap();
    let audio = tmp.path().join("corpus");
    let rirs = audio.join("rirs");
    std::fs::create_dir_all(&rirs).unwrap();
    let mut records = Vec::new();
    for (i, freq) in [220.0f64, 330.0, 440.0].iter().enumerate() {
        let samples =
            (0..16_000).map(|n| (0.3 * (std::f64::consts::TAU * freq * n as f64 / 16_000.0).sin()) as f32).collect();
        let rel = format!("utt{i}.wav");
        write_wav(&audio.join(&rel), &Waveform::new(samples, 16_000).unwrap()).unwrap();
        records.push(ManifestRecord {
            utterance_id: format!("u{i}"),
            audio_path: Some(rel),
            feature_path: None,
            speaker_id: format!("s{}", i % 2),
            session_id: "c0".into(),
            style_id: "clean".into(),
            duration_s: 1.0,
            split: None,
        });
    }
    for (k, rt60) in [0.1, 0.2].iter().enumerate() {
        let r = generate_rir(*rt60, 4000, 16_000, k as u64).unwrap();
        write_wav(&rirs.join(format!("room{k}.wav")), &Waveform::new(r.taps, 16_000).unwrap()).unwrap();
    }
    let manifest = audio.join("manifest.jsonl");
    Manifest::new(records, audio.clone()).write(&manifest).unwrap();

    let out = tmp.path().join("feats");
    let report = stdout_json(&run(&[
        "prep",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--rir-dir",
        p(&rirs),
        "--rirs-per-utt",
        "2",
        "--seed",
        "1",
    ]));
    assert_eq!(report["records"], 6);
    let prepared = Manifest::read(&out.join("manifest.jsonl")).unwrap();
    prepared.validate().unwrap();
    let styles: std::collections::BTreeSet<_> = prepared.records.iter().map(|r| r.style_id.clone()).collect();
    assert_eq!(styles.len(), 2);
    let f = prepared.load_features(&prepared.records[0]).unwrap();
    assert_eq!(f.values.dim(), (80, 80));
}
