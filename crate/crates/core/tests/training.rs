use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtfa::model::{decode_checkpoint, encode_checkpoint};
use mtfa::training::{chunk, evaluate_loss, split_clips, train, train_step, LabeledChunk, LabeledClip, TrainConfig, Validation};
use mtfa::{Graph, MaskKind, Mode, ModelConfig, Mtfa, Spectrogram, Tensor};

fn config(dropout: f64) -> ModelConfig {
    ModelConfig {
        label: "tone".into(),
        channels: 3,
        gru_units: 3,
        n_mels: 16,
        chunk_frames: 16,
        chunk_shift: 8,
        dropout,
        mask: MaskKind::Hourglass,
        ..ModelConfig::default()
    }
}

/// Noise with a loud band over a random frame range, labelled 1 there.
fn clip(id: usize, seed: u64) -> LabeledClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.gen_range(20..50);
    let on = rng.gen_range(0..frames / 2);
    let off = rng.gen_range(on + 1..frames);
    let mut data = Vec::with_capacity(frames * 16);
    for t in 0..frames {
        for d in 0..16 {
            let loud = (on..off).contains(&t) && (4..8).contains(&d);
            data.push(if loud { 2.0 } else { -6.0 } + rng.gen_range(-0.5..0.5));
        }
    }
    LabeledClip {
        id: format!("clip{id}"),
        spec: Spectrogram::new(data, frames, 16, 0.02, 0.04),
        labels: (0..frames).map(|t| f64::from(u8::from((on..off).contains(&t)))).collect(),
    }
}

fn clips(n: usize) -> Vec<LabeledClip> {
    (0..n).map(|i| clip(i, 100 + i as u64)).collect()
}

fn batch_of(chunks: &[LabeledChunk]) -> (Tensor, Tensor) {
    let n = chunks.len();
    let x = chunks.iter().flat_map(|c| c.features.clone()).collect();
    let y = chunks.iter().flat_map(|c| c.labels.clone()).collect();
    (Tensor::new(&[n, 16, 16], x).unwrap(), Tensor::new(&[n, 16], y).unwrap())
}

fn train_mode_loss(model: &Mtfa, x: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::with_params(model.params(), Mode::Train, 0);
    let out = model.forward(&mut g, x.clone(), false).unwrap();
    let l = g.bce_loss(out.probs, y).unwrap();
    g.value(l).item()
}

#[test]
fn a_small_step_lowers_the_batch_loss() {
    let c = clip(0, 7);
    let chunks = chunk(&c.spec, &c.labels, 16, 8, 0);
    let (x, y) = batch_of(&chunks);
    let refs: Vec<&LabeledChunk> = chunks.iter().collect();
    let cfg = TrainConfig {
        learning_rate: 1e-5,
        ..TrainConfig::default()
    };
    for seed in 0..20 {
        let mut model = Mtfa::new(config(0.0), seed).unwrap();
        let before = train_step(&mut model, &refs, &cfg, 0).unwrap();
        assert!((before - train_mode_loss(&Mtfa::new(config(0.0), seed).unwrap(), &x, &y)).abs() < 1e-12);
        let after = train_mode_loss(&model, &x, &y);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let c = clip(0, 8);
    let chunks = chunk(&c.spec, &c.labels, 16, 8, 0);
    let refs: Vec<&LabeledChunk> = chunks.iter().collect();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let mut model = Mtfa::new(config(0.3), 1).unwrap();
    let original = model.clone();
    train_step(&mut model, &refs, &cfg, 5).unwrap();
    for (a, b) in model.params().params().iter().zip(original.params().params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: 4,
        patience: 10,
        seed,
        validation: Validation::Holdout(0.25),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_exact_for_a_seed() {
    let data = clips(8);
    let a = train(&data, config(0.3), &quick(3), |_| {}).unwrap();
    let b = train(&data, config(0.3), &quick(3), |_| {}).unwrap();
    assert_eq!(encode_checkpoint(&a.model), encode_checkpoint(&b.model));
    let losses = |o: &mtfa::training::TrainOutcome| o.log.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!((a.best_epoch, a.train_clips.clone()), (b.best_epoch, b.train_clips.clone()));
    let c = train(&data, config(0.3), &quick(4), |_| {}).unwrap();
    assert_ne!(encode_checkpoint(&a.model), encode_checkpoint(&c.model));
}

#[test]
fn best_checkpoint_reproduces_its_validation_loss() {
    let data = clips(8);
    let mut seen = Vec::new();
    let out = train(&data, config(0.3), &quick(5), |e| seen.push(e.val_loss)).unwrap();
    assert_eq!(seen.len(), out.log.len());
    let logged = out.log[out.best_epoch - 1].val_loss;
    assert_eq!(logged, out.best_val_loss);
    assert!(seen.iter().all(|&v| v >= logged));

    let val: Vec<LabeledChunk> = out
        .val_clips
        .iter()
        .flat_map(|&i| chunk(&data[i].spec, &data[i].labels, 16, 8, i))
        .collect();
    let refs: Vec<&LabeledChunk> = val.iter().collect();
    assert_eq!(evaluate_loss(&out.model, &refs, 4).unwrap(), logged);
    let reloaded = decode_checkpoint(&encode_checkpoint(&out.model)).unwrap();
    let again = evaluate_loss(&reloaded, &refs, 4).unwrap();
    assert!((again - logged).abs() < 1e-6, "{again} vs {logged}");
}

#[test]
fn holdout_split_is_a_disjoint_cover() {
    for n in 2..40 {
        for f in [0.05, 0.1, 0.3, 0.5] {
            let (tr, va) = split_clips(n, Validation::Holdout(f), n as u64).unwrap();
            assert!(!tr.is_empty() && !va.is_empty());
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
    assert!(split_clips(1, Validation::Holdout(0.1), 0).is_err());
    let (tr, va) = split_clips(5, Validation::TrainingSet, 0).unwrap();
    assert_eq!(tr, va);
}

#[test]
fn bad_configs_are_rejected() {
    let data = clips(4);
    let bad = TrainConfig {
        batch_size: 0,
        ..quick(0)
    };
    assert!(train(&data, config(0.3), &bad, |_| {}).is_err());
    let wide = ModelConfig {
        n_mels: 32,
        ..config(0.3)
    };
    assert!(train(&data, wide, &quick(0), |_| {}).is_err());
}
