use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde_json::json;

use mtfa::evaluation::evaluate as score_sets;
use mtfa::features::{load_wav, logmel, read_spectrogram, write_spectrogram, HOP_SECONDS};
use mtfa::model::{class_defaults, load_checkpoint, save_checkpoint};
use mtfa::postproc::{detect_events, median_width_frames, read_annotations, write_annotations, AnnotationSet};
use mtfa::synthesis::{generate_dataset, load_sources, synthetic_sources, MixSpec};
use mtfa::training::{label_frames, train as train_model, LabeledClip, TrainConfig, Validation};
use mtfa::{MaskKind, ModelConfig, Spectrogram};

use crate::dump::{channel_mean, write_both, Map};
use crate::manifest::{beside, RunManifest};
use crate::{EvaluateArgs, FeaturizeArgs, InferArgs, MaskArg, SynthesizeArgs, TrainArgs};

pub const EXIT_IO: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;
pub const EXIT_CHECKPOINT: u8 = 5;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(me) = cause.downcast_ref::<mtfa::Error>() {
            return match me {
                mtfa::Error::CheckpointMismatch { .. } => EXIT_CHECKPOINT,
                mtfa::Error::Io(_) | mtfa::Error::AudioLoad { .. } | mtfa::Error::Format { .. } => EXIT_IO,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn classify(r: anyhow::Result<()>) -> Result<(), Failure> {
    r.map_err(|error| Failure {
        code: exit_code(&error),
        error,
    })
}

/// Files in `dir` with extension `ext`, sorted by name.
fn list_files(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn synthesize(a: SynthesizeArgs) -> Result<(), Failure> {
    classify(synthesize_inner(a))
}

fn synthesize_inner(a: SynthesizeArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let spec = MixSpec {
        ebr_choices: a.ebr.clone(),
        presence_prob: a.presence,
        seed: a.seed,
        clip_seconds: a.clip_seconds,
    };
    let (events, backgrounds) = match (&a.events_dir, &a.backgrounds_dir) {
        (Some(ev), Some(bg)) => (
            load_sources(ev, true).with_context(|| format!("loading events from {}", ev.display()))?,
            load_sources(bg, false).with_context(|| format!("loading backgrounds from {}", bg.display()))?,
        ),
        _ => synthetic_sources(a.sources_per_kind, a.backgrounds, a.clip_seconds + 2.0, a.sample_rate, a.seed),
    };
    let manifest = generate_dataset(&events, &backgrounds, a.count, &spec, &a.out)?;
    let clipped = manifest.mixtures.iter().filter(|m| m.clipped).count();
    if clipped > 0 {
        log::warn!("{clipped} mixtures exceeded [-1, 1] and were soft-clipped (see manifest.json)");
    }
    let mut run = RunManifest::new(
        "synthesize",
        Some(a.seed),
        json!({
            "events_dir": a.events_dir,
            "backgrounds_dir": a.backgrounds_dir,
            "synthetic": a.synthetic,
            "count": a.count,
            "ebr": a.ebr,
            "presence": a.presence,
            "clip_seconds": a.clip_seconds,
            "sample_rate": manifest.sample_rate,
            "sources_per_kind": a.sources_per_kind,
            "backgrounds": a.backgrounds,
            "mixtures": manifest.mixtures.len(),
            "clipped": clipped,
        }),
    );
    run.inputs = [a.events_dir.clone(), a.backgrounds_dir.clone()].into_iter().flatten().collect();
    run.outputs = vec![a.out.join("annotations.tsv"), a.out.join("manifest.json")];
    run.finish(started, &a.manifest.unwrap_or_else(|| a.out.join("run.json")))?;
    println!("wrote {} mixtures to {}", manifest.mixtures.len(), a.out.display());
    Ok(())
}

pub fn featurize(a: FeaturizeArgs) -> Result<(), Failure> {
    classify(featurize_inner(a))
}

fn featurize_inner(a: FeaturizeArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let wavs = list_files(&a.wav_dir, "wav")?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = Vec::new();
    let mut failed: Vec<(PathBuf, String)> = Vec::new();
    for w in &wavs {
        let result = load_wav(w)
            .and_then(|clip| logmel(&clip))
            .and_then(|spec| {
                let dst = a.out.join(format!("{}.mtfaspec", stem(w)));
                write_spectrogram(&dst, &spec).map(|_| dst)
            });
        match result {
            Ok(dst) => written.push(dst),
            Err(e) => {
                log::error!("{}: {e}", w.display());
                failed.push((w.clone(), e.to_string()));
            }
        }
    }
    let mut run = RunManifest::new(
        "featurize",
        None,
        json!({
            "hop_seconds": HOP_SECONDS,
            "n_mels": mtfa::features::N_MELS,
            "processed": written.len(),
            "failed": failed.iter().map(|(p, e)| json!({"file": p, "error": e})).collect::<Vec<_>>(),
        }),
    );
    run.inputs = wavs.clone();
    run.outputs = written.clone();
    run.finish(started, &a.manifest.unwrap_or_else(|| a.out.join("run.json")))?;
    println!("featurized {} of {} files into {}", written.len(), wavs.len(), a.out.display());
    if !failed.is_empty() {
        let names: Vec<String> = failed.iter().map(|(p, e)| format!("  {}: {e}", p.display())).collect();
        return Err(anyhow!(std::io::Error::other(format!(
            "{} file(s) could not be featurized:\n{}",
            failed.len(),
            names.join("\n")
        ))));
    }
    Ok(())
}

/// Spectrograms of every clip in `dir`, keyed by file stem. Uses caches when
/// present, WAV files otherwise.
fn load_features(dir: &Path) -> anyhow::Result<BTreeMap<String, Spectrogram>> {
    let caches = list_files(dir, "mtfaspec")?;
    let mut out = BTreeMap::new();
    if caches.is_empty() {
        for w in list_files(dir, "wav")? {
            let spec = logmel(&load_wav(&w)?)?;
            out.insert(stem(&w), spec);
        }
    } else {
        for c in caches {
            let spec = read_spectrogram(&c).with_context(|| format!("reading {}", c.display()))?;
            out.insert(stem(&c), spec);
        }
    }
    Ok(out)
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    classify(train_inner(a))
}

fn train_inner(a: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let defaults = class_defaults(&a.class);
    let (dropout, threshold) = match (a.dropout.or(defaults.map(|d| d.0)), a.threshold.or(defaults.map(|d| d.1))) {
        (Some(d), Some(t)) => (d, t),
        _ => {
            return Err(anyhow!(mtfa::Error::Config(format!(
                "class `{}` has no built-in defaults; pass --dropout and --threshold",
                a.class
            ))))
        }
    };
    let ann_path = a.annotations.clone().unwrap_or_else(|| a.data.join("annotations.tsv"));
    let refs = read_annotations(&ann_path).with_context(|| format!("reading annotations {}", ann_path.display()))?;
    let mut by_stem: BTreeMap<String, Vec<mtfa::EventAnnotation>> = BTreeMap::new();
    for (file, events) in &refs {
        let entry = by_stem.entry(stem(Path::new(file))).or_default();
        entry.extend(events.iter().filter(|e| e.label == a.class).cloned());
    }
    let features = load_features(&a.data)?;
    if features.is_empty() {
        return Err(anyhow!(mtfa::Error::Config(format!("no .mtfaspec or .wav files in {}", a.data.display()))));
    }
    let mut clips = Vec::with_capacity(features.len());
    for (id, spec) in features {
        let events = by_stem.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        let labels = label_frames(spec.n_frames(), spec.hop_seconds, spec.window_seconds, events)?;
        clips.push(LabeledClip { id, spec, labels });
    }
    let positives = clips.iter().filter(|c| c.labels.iter().any(|&l| l > 0.0)).count();
    if positives == 0 {
        log::warn!("no clip contains a `{}` event", a.class);
    }

    let model_config = ModelConfig {
        label: a.class.clone(),
        channels: a.channels,
        gru_units: a.units,
        n_mels: clips[0].spec.n_mels(),
        dropout,
        threshold,
        mask: match a.mask {
            MaskArg::Hourglass => MaskKind::Hourglass,
            MaskArg::SingleScale => MaskKind::SingleScale,
            MaskArg::None => MaskKind::None,
        },
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        learning_rate: a.lr,
        patience: a.patience,
        max_epochs: a.max_epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        validation: if a.validate_on_train {
            Validation::TrainingSet
        } else {
            Validation::Holdout(a.validation_fraction)
        },
        target_loss: a.target_loss,
        ..TrainConfig::default()
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let outcome = train_model(&clips, model_config.clone(), &train_config, |rec| {
        let r = serde_json::to_writer(&mut log_file, rec)
            .map_err(std::io::Error::from)
            .and_then(|_| writeln!(log_file))
            .and_then(|_| log_file.flush());
        if let Err(e) = r {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.model)?;

    let mut run = RunManifest::new(
        "train",
        Some(a.seed),
        json!({
            "class": a.class,
            "model": model_config,
            "train": train_config,
            "clips": clips.len(),
            "clips_with_events": positives,
            "train_clips": outcome.train_clips.iter().map(|&i| &clips[i].id).collect::<Vec<_>>(),
            "validation_clips": outcome.val_clips.iter().map(|&i| &clips[i].id).collect::<Vec<_>>(),
            "epochs_run": outcome.log.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "stop": outcome.stop,
        }),
    );
    run.inputs = vec![a.data.clone(), ann_path];
    run.outputs = vec![ckpt.clone(), log_path];
    run.finish(started, &a.manifest.unwrap_or_else(|| a.out.join("run.json")))?;
    println!(
        "best epoch {} (validation loss {:.5}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        ckpt.display()
    );
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<(), Failure> {
    classify(infer_inner(a))
}

fn infer_inner(a: InferArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let cfg = model.config().clone();
    let threshold = a.threshold.unwrap_or(cfg.threshold);
    let median_frames = median_width_frames(a.median_ms, HOP_SECONDS);
    if median_frames.is_multiple_of(2) {
        return Err(anyhow!(mtfa::Error::Config(format!(
            "--median-ms {} gives an even filter of {median_frames} frames; choose an odd multiple of 20 ms",
            a.median_ms
        ))));
    }
    let wavs = list_files(&a.wav_dir, "wav")?;
    let mut detections = AnnotationSet::new();
    let mut frames = Vec::with_capacity(wavs.len());
    for w in &wavs {
        let spec = logmel(&load_wav(w)?)?;
        let pred = match &a.dump_attention {
            Some(root) => {
                let (pred, maps) = model.predict_with_attention(&spec)?;
                let dir = root.join(stem(w));
                std::fs::create_dir_all(&dir)?;
                write_both(
                    &dir,
                    "input",
                    &Map {
                        rows: spec.n_frames(),
                        cols: spec.n_mels(),
                        data: spec.data(),
                    },
                )?;
                for (k, scale) in maps.scales.iter().enumerate() {
                    let (t, d) = (scale.shape()[1], scale.shape()[2]);
                    let mean = channel_mean(scale.shape(), scale.data());
                    let rows = spec.n_frames().div_ceil(1 << k).min(t);
                    write_both(
                        &dir,
                        &format!("scale{}", k + 1),
                        &Map {
                            rows,
                            cols: d,
                            data: &mean[..rows * d],
                        },
                    )?;
                }
                pred
            }
            None => model.predict(&spec)?,
        };
        let events = detect_events(&pred.probs, threshold, median_frames, pred.hop_seconds, &cfg.label)?;
        frames.push(json!({"file": file_name(w), "frames": pred.probs.len(), "events": events.len()}));
        detections.insert(file_name(w), events);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_annotations(&a.out, &detections)?;

    let mut run = RunManifest::new(
        "infer",
        None,
        json!({
            "model": cfg,
            "threshold": threshold,
            "median_ms": a.median_ms,
            "median_frames": median_frames,
            "dump_attention": a.dump_attention,
            "clips": frames,
        }),
    );
    run.inputs = vec![a.ckpt.clone(), a.wav_dir.clone()];
    run.outputs = [Some(a.out.clone()), a.dump_attention.clone()].into_iter().flatten().collect();
    run.finish(started, &a.manifest.unwrap_or_else(|| beside(&a.out, ".run.json")))?;
    let n: usize = detections.values().map(Vec::len).sum();
    println!("{n} events in {} files; detections in {}", wavs.len(), a.out.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    classify(evaluate_inner(a))
}

fn evaluate_inner(a: EvaluateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let refs = read_annotations(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
    let dets = read_annotations(&a.det).with_context(|| format!("reading {}", a.det.display()))?;
    let full = score_sets(&refs, &dets, a.collar_ms / 1000.0);
    let report = match &a.class {
        Some(c) => full.only(c),
        None => full,
    };
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    let mut run = RunManifest::new(
        "evaluate",
        None,
        json!({
            "collar_ms": a.collar_ms,
            "class": a.class,
            "report": report,
        }),
    );
    run.inputs = vec![a.reference.clone(), a.det.clone()];
    run.outputs = a.out.iter().cloned().collect();
    let manifest = a.manifest.clone().unwrap_or_else(|| match &a.out {
        Some(o) => beside(o, ".run.json"),
        None => beside(&a.det, ".eval.run.json"),
    });
    run.finish(started, &manifest)?;
    Ok(())
}
