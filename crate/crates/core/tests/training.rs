use spkstyle::exec::ExecMode;
use spkstyle::losses::LossConfig;
use spkstyle::model::{ModelConfig, ParamGroup};
use spkstyle::synthdata::{generate_corpus, SynthConfig};
use spkstyle::training::{
    adversarial_step, fit, sample_batch, TrainConfig, TrainState, TrainingData, FINAL_CHECKPOINT, LOSS_LOG,
};

fn corpus(dir: &std::path::Path) -> TrainingData {
    let cfg = SynthConfig {
        n_speakers: 4,
        n_styles: 2,
        utts_per_cell: 3,
        duration_s: 2.0,
        seed: 11,
        reserve_style: false,
        heldout_speaker_frac: 0.0,
        test_frac: 0.0,
        ..Default::default()
    };
    let m = generate_corpus(&cfg).unwrap().write(dir).unwrap();
    TrainingData::from_manifest(&m, 160).unwrap()
}

fn model() -> ModelConfig {
    ModelConfig {
        utt_layers: 2,
        utt_hidden: 24,
        utt_dim: 24,
        emb_layers: 2,
        emb_hidden: 24,
        emb_dim: 16,
        cont_hidden: 24,
        content_dim: 8,
        dec_hidden: 24,
        adv_hidden: 16,
        adv_head_dim: 8,
        ..Default::default()
    }
}

fn train_cfg(batch: usize, iterations: u64) -> TrainConfig {
    TrainConfig { batch_size: batch, iterations, checkpoint_every: 0, exec: ExecMode::Sequential, ..Default::default() }
}

#[test]
fn overfitting_one_pair_halves_reconstruction_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_speakers: 2,
        n_styles: 1,
        utts_per_cell: 1,
        duration_s: 2.0,
        seed: 12,
        reserve_style: false,
        heldout_speaker_frac: 0.0,
        test_frac: 0.0,
        ..Default::default()
    };
    let m = generate_corpus(&cfg).unwrap().write(dir.path()).unwrap();
    let pair = TrainingData::from_manifest(&m, 160).unwrap();
    assert_eq!(pair.len(), 2);
    let mut state = TrainState::new(model(), LossConfig::default(), &pair, 1).unwrap();
    let summary = fit(&mut state, &pair, &train_cfg(2, 200), None).unwrap();
    assert_eq!(state.main_steps, 200);
    let first = summary.history[0].1.rec;
    let last = summary.history[199].1.rec;
    assert!(last < 0.5 * first, "rec {first} -> {last}");
}

#[test]
fn adversarial_classifier_learns_on_frozen_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = train_cfg(8, 1);
    let mut state = TrainState::new(model(), LossConfig::default(), &data, 2).unwrap();
    let batch = sample_batch(&data, &cfg, &state.model.config, 2, 0, 1).unwrap();
    let before = state.model.params.clone();
    let first = adversarial_step(&mut state, &batch, &cfg).unwrap().adv_ce_sty;
    let mut last = first;
    for _ in 1..100 {
        last = adversarial_step(&mut state, &batch, &cfg).unwrap().adv_ce_sty;
    }
    assert!(last < first, "adversarial CE {first} -> {last}");
    for g in ParamGroup::MAIN {
        assert_eq!(state.model.params.group(g), before.group(g), "{} moved", g.name());
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = train_cfg(4, 3);
    let run = |out: &std::path::Path| {
        let mut s = TrainState::new(model(), LossConfig::default(), &data, 5).unwrap();
        fit(&mut s, &data, &cfg, Some(out)).unwrap();
        std::fs::read(out.join(FINAL_CHECKPOINT)).unwrap()
    };
    assert_eq!(run(&dir.path().join("a")), run(&dir.path().join("b")));
}

#[test]
fn parallel_and_sequential_fits_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut a = TrainState::new(model(), LossConfig::default(), &data, 6).unwrap();
    let mut b = a.clone();
    fit(&mut a, &data, &train_cfg(4, 2), None).unwrap();
    fit(&mut b, &data, &TrainConfig { exec: ExecMode::Parallel, ..train_cfg(4, 2) }, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn resume_after_one_step_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut straight = TrainState::new(model(), LossConfig::default(), &data, 7).unwrap();
    fit(&mut straight, &data, &train_cfg(4, 3), None).unwrap();
    let mut part = TrainState::new(model(), LossConfig::default(), &data, 7).unwrap();
    fit(&mut part, &data, &TrainConfig { checkpoint_every: 2, ..train_cfg(4, 2) }, Some(dir.path())).unwrap();
    let mut resumed = TrainState::load(&dir.path().join("ckpt_0000002.ckpt")).unwrap();
    assert_eq!(resumed.iteration, 2);
    fit(&mut resumed, &data, &train_cfg(4, 3), None).unwrap();
    assert_eq!(resumed.to_bytes(), straight.to_bytes());
}

#[test]
fn loss_log_has_every_field_every_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut s = TrainState::new(model(), LossConfig::default(), &data, 8).unwrap();
    fit(&mut s, &data, &train_cfg(4, 3), Some(&dir.path().join("run"))).unwrap();
    let text = std::fs::read_to_string(dir.path().join("run").join(LOSS_LOG)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,rec,cpc_s,kld,adv_cpc,ce_spk,adv_ce_sty,total");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], i.to_string());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn divergence_halts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut s = TrainState::new(model(), LossConfig::default(), &data, 9).unwrap();
    s.model.params.group_mut(ParamGroup::Dec).layers[0].bias[0] = f32::NAN;
    let out = dir.path().join("run");
    let err = fit(&mut s, &data, &train_cfg(4, 10), Some(&out)).unwrap_err();
    assert!(err.to_string().contains("rec"), "{err}");
    assert_eq!(s.iteration, 1);
    let dump = std::fs::read_to_string(out.join("divergence.json")).unwrap();
    assert!(dump.contains("rec"));
}

#[test]
fn warm_start_keeps_shared_groups_and_resets_counters() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let mut pre = TrainState::new(model(), LossConfig::default(), &data, 10).unwrap();
    fit(&mut pre, &data, &train_cfg(4, 2), None).unwrap();
    let fine = TrainState::warm_start(&pre, LossConfig::default(), &data, 11).unwrap();
    assert_eq!(fine.iteration, 0);
    for g in ParamGroup::ALL {
        assert_eq!(fine.model.params.group(g), pre.model.params.group(g));
    }
    let mut frozen = fine.clone();
    let cfg = TrainConfig { freeze: vec![ParamGroup::EncCont], ..train_cfg(4, 2) };
    fit(&mut frozen, &data, &cfg, None).unwrap();
    assert_eq!(frozen.model.params.enc_cont, pre.model.params.enc_cont);
    assert_ne!(frozen.model.params.dec, pre.model.params.dec);
}
