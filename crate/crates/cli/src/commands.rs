use std::path::Path;

use serde_json::{json, Value};
use spkstyle::config::RunConfig;
use spkstyle::error::{Error, Result};
use spkstyle::eval::{
    build_trials, convert, distance_statistics, embed_all, evaluate_sv, export_embeddings, labels_of, load_all,
    probe_accuracy, project_2d, train_probe, write_projection_csv, Condition, ConvertMode, EmbeddingTable, ProbeReport,
    Stream,
};
use spkstyle::exec::ExecMode;
use spkstyle::features::{prepare_corpus, FeatureSequence};
use spkstyle::io::{read_features, write_features, Manifest};
use spkstyle::model::{Model, ParamGroup};
use spkstyle::synthdata::{generate_corpus_with, SynthConfig};
use spkstyle::training::{fit, TrainState, TrainingData};

use crate::rundir::{echo_beside, write_echo, RunLock, ECHO_FILE};
use crate::{
    Command, Common, ConvertArgs, EvalProbeArgs, EvalSvArgs, ExportArgs, PrepArgs, ProjectArgs, SynthArgs, TrainArgs,
};

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::Prep(a) => prep(a),
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::EvalSv(a) => eval_sv(a),
        Command::EvalProbe(a) => eval_probe(a),
        Command::Convert(a) => convert_cmd(a),
        Command::ExportEmb(a) => export_emb(a),
        Command::Project2d(a) => project(a),
    }
}

fn setup(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(common.seed)?;
    if common.sequential {
        cfg.train.exec = ExecMode::Sequential;
    }
    Ok((cfg, seed))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::read(path)?;
    m.validate()?;
    Ok(m)
}

fn select(m: Manifest, split: Option<&str>) -> Result<Manifest> {
    match split {
        None => Ok(m),
        Some(s) => {
            let sub = m.filter_split(s);
            if sub.records.is_empty() {
                return Err(Error::Validation(format!("manifest has no records with split {s}")));
            }
            Ok(sub)
        }
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(TrainState::load(path)?.model)
}

/// Adds the seed, writes the report and its echo when `out` is given.
fn finish(command: &str, mut report: Value, out: Option<&Path>, cfg: &RunConfig, seed: u64) -> Result<Value> {
    report["seed"] = json!(seed);
    if let Some(out) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(out, text + "\n").map_err(|e| Error::io(out, e))?;
        write_echo(&echo_beside(out), command, cfg, seed)?;
    }
    Ok(report)
}

fn prep(a: PrepArgs) -> Result<Value> {
    let (mut cfg, seed) = setup(&a.common)?;
    if let Some(n) = a.n_mels {
        cfg.features.n_mels = n;
        cfg.model.n_mels = n;
    }
    if let Some(r) = a.frame_rate {
        cfg.features.frame_rate = r;
    }
    if let Some(d) = &a.rir_dir {
        cfg.features.rir_dir = Some(std::path::absolute(d).map_err(|e| Error::io(d, e))?);
    }
    if let Some(k) = a.rirs_per_utt {
        cfg.features.rirs_per_utt = k;
    }
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let _lock = RunLock::acquire(&a.out)?;
    write_echo(&a.out.join(ECHO_FILE), "prep", &cfg, seed)?;
    let out = prepare_corpus(&manifest, &a.out, &cfg.prep_options(seed, &manifest.base_dir))?;
    Ok(json!({ "records": out.records.len(), "manifest": a.out.join("manifest.jsonl"), "seed": seed }))
}

fn synth_data(a: SynthArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let synth = SynthConfig {
        n_speakers: a.speakers,
        n_styles: a.styles,
        utts_per_cell: a.utts_per_cell,
        duration_s: a.duration,
        seed,
        n_mels: cfg.features.n_mels,
        frame_rate: cfg.features.frame_rate,
        reserve_style: !a.no_reserved_style,
        ..Default::default()
    };
    let _lock = RunLock::acquire(&a.out)?;
    write_echo(&a.out.join(ECHO_FILE), "synth-data", &cfg, seed)?;
    let corpus = generate_corpus_with(&synth, cfg.train.exec)?;
    let manifest = corpus.write(&a.out)?;
    Ok(json!({ "utterances": manifest.records.len(), "manifest": a.out.join("manifest.jsonl"), "seed": seed }))
}

fn train(a: TrainArgs) -> Result<Value> {
    let (mut cfg, seed) = setup(&a.common)?;
    for name in &a.freeze {
        let g = ParamGroup::parse(name)?;
        if !cfg.train.freeze.contains(&g) {
            cfg.train.freeze.push(g);
        }
    }
    let manifest = read_manifest(&a.manifest)?;
    let data = TrainingData::from_manifest(&manifest, cfg.train.crop_frames)?;
    let _lock = RunLock::acquire(&a.out)?;
    let mut state = match &a.init {
        Some(p) => TrainState::warm_start(&TrainState::load(p)?, cfg.loss, &data, seed)?,
        None => TrainState::new(cfg.model.clone(), cfg.loss, &data, seed)?,
    };
    cfg.model = state.model.config.clone();
    write_echo(&a.out.join(ECHO_FILE), "train", &cfg, seed)?;
    let summary = fit(&mut state, &data, &cfg.train, Some(&a.out))?;
    let last = summary.history.last().map(|(_, l)| *l);
    Ok(json!({
        "iterations": state.iteration,
        "main_updates": summary.main_updates,
        "adversarial_updates": summary.adversarial_updates,
        "final_loss": last,
        "checkpoint": summary.checkpoints.last(),
        "seed": seed,
    }))
}

fn eval_sv(a: EvalSvArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let stream = Stream::parse(&a.stream)?;
    let condition = Condition::parse(&a.condition)?;
    let manifest = select(read_manifest(&a.manifest)?, a.split.as_deref())?;
    let model = load_model(&a.ckpt)?;
    let feats = load_all(&manifest, cfg.train.exec)?;
    let n_target = a.n_target.unwrap_or(cfg.eval.n_target);
    let n_nontarget = a.n_nontarget.unwrap_or(cfg.eval.n_nontarget);
    let list = build_trials(&manifest, condition, n_target, n_nontarget, seed)?;
    let report = evaluate_sv(&model, &manifest, &feats, stream, &list, cfg.train.exec)?;
    let mut value = serde_json::to_value(report).expect("report serializes");
    value["split"] = json!(a.split);
    finish("eval-sv", value, a.out.as_deref(), &cfg, seed)
}

fn eval_probe(a: EvalProbeArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let stream = Stream::parse(&a.stream)?;
    let manifest = read_manifest(&a.manifest)?;
    let model = load_model(&a.ckpt)?;
    let train = select(manifest.clone(), Some(&a.train_split))?;
    let test = select(manifest, Some(&a.test_split))?;
    let (ytr, yte) = (labels_of(&train, &a.label)?, labels_of(&test, &a.label)?);
    let etr = embed_all(&model, &load_all(&train, cfg.train.exec)?, stream, cfg.train.exec)?;
    let ete = embed_all(&model, &load_all(&test, cfg.train.exec)?, stream, cfg.train.exec)?;
    let probe = train_probe(&etr, &ytr, &cfg.probe(seed))?;
    let report = ProbeReport {
        stream,
        label: a.label.clone(),
        accuracy: probe_accuracy(&probe, &ete, &yte)?,
        n_train: ytr.len(),
        n_test: yte.len(),
        seed,
    };
    let value = serde_json::to_value(report).expect("report serializes");
    finish("eval-probe", value, a.out.as_deref(), &cfg, seed)
}

fn convert_cmd(a: ConvertArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let mode = ConvertMode::parse(&a.mode)?;
    let model = load_model(&a.ckpt)?;
    let src = read_features(&a.src)?;
    let tgt = read_features(&a.tgt)?;
    let out = convert(&model, src.values.view(), tgt.values.view(), mode)?;
    let frames = out.nrows();
    write_features(&a.out, &FeatureSequence::new(out, src.frame_rate)?)?;
    write_echo(&echo_beside(&a.out), "convert", &cfg, seed)?;
    Ok(json!({ "out": a.out, "frames": frames, "mode": mode, "seed": seed }))
}

fn export_emb(a: ExportArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let stream = Stream::parse(&a.stream)?;
    let manifest = select(read_manifest(&a.manifest)?, a.split.as_deref())?;
    let model = load_model(&a.ckpt)?;
    let table = export_embeddings(&model, &manifest, stream, cfg.train.exec)?;
    table.write_csv(&a.out)?;
    write_echo(&echo_beside(&a.out), "export-emb", &cfg, seed)?;
    Ok(json!({ "rows": table.rows.len(), "dim": table.dim(), "stream": stream, "seed": seed }))
}

fn project(a: ProjectArgs) -> Result<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let stream = Stream::parse(&a.stream)?;
    let table = EmbeddingTable::read_csv(&a.emb, stream)?;
    let xy = project_2d(&table.matrix())?;
    write_projection_csv(&a.out, &table, &xy)?;
    let groups = |f: fn(&spkstyle::eval::EmbeddingRow) -> &String| -> Vec<String> {
        table.rows.iter().map(|r| f(r).clone()).collect()
    };
    let (spk_within, spk_across) = distance_statistics(&xy, &groups(|r| &r.speaker_id));
    let (sty_within, sty_across) = distance_statistics(&xy, &groups(|r| &r.style_id));
    let mut report = json!({
        "rows": table.rows.len(),
        "stream": stream,
        "speaker": { "within": spk_within, "across": spk_across },
        "style": { "within": sty_within, "across": sty_across },
    });
    write_echo(&echo_beside(&a.out), "project-2d", &cfg, seed)?;
    report["seed"] = json!(seed);
    Ok(report)
}
