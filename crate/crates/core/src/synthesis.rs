//! Event-over-background mixtures and the synthetic stand-in sources used
//! when no recorded audio is available.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{rms, write_wav, AudioClip};
use crate::postproc::{write_annotations, AnnotationSet, EventAnnotation};

/// Peak amplitude of synthetic events.
pub const EVENT_PEAK: f64 = 0.9;
/// RMS of synthetic backgrounds.
pub const BACKGROUND_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    /// Amplitude-modulated sine, sustained and narrowband.
    Beep,
    /// Exponentially decaying white-noise transient.
    Burst,
    /// Fast broadband chirp.
    Sweep,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [EventKind::Beep, EventKind::Burst, EventKind::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::Beep => "beep",
            EventKind::Burst => "burst",
            EventKind::Sweep => "sweep",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Mean event durations of the three target classes in the original
    /// task: babycry, gunshot and glassbreak respectively.
    pub fn default_duration(self) -> f64 {
        match self {
            EventKind::Beep => 2.25,
            EventKind::Burst => 1.32,
            EventKind::Sweep => 1.16,
        }
    }
}

fn normalize_peak(samples: &mut [f64], peak: f64) {
    let m = samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        samples.iter_mut().for_each(|v| *v *= peak / m);
    }
}

/// Linear fade over the first and last `n` samples.
fn fade(samples: &mut [f64], n: usize) {
    let len = samples.len();
    let n = n.min(len / 2);
    for i in 0..n {
        let g = i as f64 / n as f64;
        samples[i] *= g;
        samples[len - 1 - i] *= g;
    }
}

/// Burst envelope time constant as a fraction of its duration. Energy at the
/// end is `exp(-2 / BURST_TAU)` of the start.
const BURST_TAU: f64 = 1.0 / 6.0;

pub fn synth_event(kind: EventKind, duration_s: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let fade_len = (0.005 * sr) as usize;
    let mut x: Vec<f64> = match kind {
        EventKind::Beep => {
            let f0 = rng.gen_range(500.0..1000.0);
            let fm = rng.gen_range(3.0..6.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let mut x: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let am = 0.6 + 0.4 * (2.0 * PI * fm * t).sin();
                    am * ((2.0 * PI * f0 * t + phase).sin() + 0.3 * (4.0 * PI * f0 * t + phase).sin())
                })
                .collect();
            fade(&mut x, fade_len);
            x
        }
        EventKind::Burst => {
            let tau = BURST_TAU * duration_s;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let w: f64 = rng.sample(StandardNormal);
                    w * (-t / tau).exp()
                })
                .collect()
        }
        EventKind::Sweep => {
            let top = 0.45 * sr;
            let f_lo = rng.gen_range(0.05..0.1) * top;
            let f_hi = rng.gen_range(0.7..0.95) * top;
            let k = (f_hi - f_lo) / duration_s;
            let mut x: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let w: f64 = rng.sample(StandardNormal);
                    (2.0 * PI * (f_lo * t + 0.5 * k * t * t)).sin() + 0.2 * w
                })
                .collect();
            fade(&mut x, fade_len);
            x
        }
    };
    normalize_peak(&mut x, EVENT_PEAK);
    AudioClip::new(x, sample_rate)
}

/// Sum of random-phase low-frequency sinusoids with `1/sqrt(f)` amplitudes
/// plus a little white noise, scaled to [`BACKGROUND_RMS`].
pub fn synth_background(duration_s: f64, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let partials: Vec<(f64, f64, f64)> = (0..24)
        .map(|_| {
            let f = 20.0 * 25f64.powf(rng.gen::<f64>());
            (f, 1.0 / f.sqrt(), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let tonal: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            partials.iter().map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    let tonal_rms = rms(&tonal).max(f64::MIN_POSITIVE);
    let mut x: Vec<f64> = tonal
        .iter()
        .map(|v| {
            let w: f64 = rng.sample(StandardNormal);
            v / tonal_rms + 0.1 * w
        })
        .collect();
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= BACKGROUND_RMS / r);
    }
    AudioClip::new(x, sample_rate)
}

/// A mixed clip with its placement record.
#[derive(Debug, Clone)]
pub struct Mixed {
    pub clip: AudioClip,
    pub annotation: EventAnnotation,
    /// Scale applied to the event before adding it.
    pub gain: f64,
    /// Set when the sum left `[-1, 1]` and was soft-clipped with `tanh`.
    pub clipped: bool,
}

/// `20·log10(gain·rms(event) / rms(background))`.
pub fn ebr_db(event: &AudioClip, background: &AudioClip, gain: f64) -> f64 {
    20.0 * (gain * event.rms() / background.rms()).log10()
}

/// Adds `event`, scaled to the requested event-to-background ratio, into
/// `background` starting at the sample nearest `onset_s`.
pub fn mix(event: &AudioClip, background: &AudioClip, ebr: f64, onset_s: f64, label: &str) -> Result<Mixed> {
    if event.sample_rate != background.sample_rate {
        return Err(Error::Config(format!(
            "event rate {} Hz differs from background rate {} Hz",
            event.sample_rate, background.sample_rate
        )));
    }
    let sr = background.sample_rate as f64;
    let start = (onset_s * sr).round();
    if start < 0.0 || start as usize + event.samples.len() > background.samples.len() {
        return Err(Error::Placement(format!(
            "event of {:.3} s at {onset_s:.3} s does not fit in {:.3} s of background",
            event.duration(),
            background.duration()
        )));
    }
    let start = start as usize;
    let (re, rb) = (event.rms(), background.rms());
    if re == 0.0 || rb == 0.0 {
        return Err(Error::Config("event-to-background ratio is undefined for silent audio".into()));
    }
    let gain = rb / re * 10f64.powf(ebr / 20.0);
    let mut out = background.samples.clone();
    for (o, e) in out[start..].iter_mut().zip(&event.samples) {
        *o += gain * e;
    }
    let clipped = out.iter().any(|v| v.abs() > 1.0);
    if clipped {
        out.iter_mut().for_each(|v| *v = v.tanh());
    }
    let onset = start as f64 / sr;
    Ok(Mixed {
        clip: AudioClip::new(out, background.sample_rate),
        annotation: EventAnnotation {
            label: label.to_string(),
            onset,
            offset: onset + event.duration(),
        },
        gain,
        clipped,
    })
}

/// A named source clip. For events, `label` is the class.
#[derive(Debug, Clone)]
pub struct Source {
    pub name: String,
    pub label: String,
    pub clip: AudioClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Ratios drawn uniformly per mixture.
    pub ebr_choices: Vec<f64>,
    pub presence_prob: f64,
    pub seed: u64,
    pub clip_seconds: f64,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            ebr_choices: vec![-6.0, 0.0, 6.0],
            presence_prob: 0.99,
            seed: 0,
            clip_seconds: 30.0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.presence_prob) {
            return Err(Error::Config(format!("presence probability {} is outside [0, 1]", self.presence_prob)));
        }
        if self.ebr_choices.is_empty() || self.ebr_choices.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("need at least one finite EBR value".into()));
        }
        if !(self.clip_seconds > 0.0 && self.clip_seconds.is_finite()) {
            return Err(Error::Config(format!("clip length {} s must be positive", self.clip_seconds)));
        }
        Ok(())
    }
}

/// Per-mixture manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub file: String,
    pub label: String,
    /// RNG stream the mixture was drawn from.
    pub stream: u64,
    pub background: String,
    pub background_offset: f64,
    pub event: Option<String>,
    pub ebr_db: Option<f64>,
    pub onset: Option<f64>,
    pub gain: Option<f64>,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub clip: AudioClip,
    pub annotation: Option<EventAnnotation>,
    pub record: MixtureRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: MixSpec,
    pub sample_rate: u32,
    pub count_per_class: usize,
    pub mixtures: Vec<MixtureRecord>,
}

fn render(stream: u64, file: String, label: &str, events: &[&Source], backgrounds: &[Source], spec: &MixSpec) -> Result<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
    let sr = bg.clip.sample_rate;
    let n = (spec.clip_seconds * sr as f64).round() as usize;
    if bg.clip.samples.len() < n {
        return Err(Error::Config(format!(
            "background {} is {:.3} s, shorter than the {:.3} s clip length",
            bg.name,
            bg.clip.duration(),
            spec.clip_seconds
        )));
    }
    let off = rng.gen_range(0..=bg.clip.samples.len() - n);
    let segment = AudioClip::new(bg.clip.samples[off..off + n].to_vec(), sr);
    let mut record = MixtureRecord {
        file,
        label: label.to_string(),
        stream,
        background: bg.name.clone(),
        background_offset: off as f64 / sr as f64,
        event: None,
        ebr_db: None,
        onset: None,
        gain: None,
        clipped: false,
    };
    if !rng.gen_bool(spec.presence_prob) {
        return Ok(Mixture {
            clip: segment,
            annotation: None,
            record,
        });
    }
    let ev = events[rng.gen_range(0..events.len())];
    let ebr = spec.ebr_choices[rng.gen_range(0..spec.ebr_choices.len())];
    let max_start = n.checked_sub(ev.clip.samples.len()).ok_or_else(|| {
        Error::Placement(format!(
            "event {} ({:.3} s) is longer than the {:.3} s clip",
            ev.name,
            ev.clip.duration(),
            spec.clip_seconds
        ))
    })?;
    let start = rng.gen_range(0..=max_start);
    let mixed = mix(&ev.clip, &segment, ebr, start as f64 / sr as f64, label)?;
    record.event = Some(ev.name.clone());
    record.ebr_db = Some(ebr);
    record.onset = Some(mixed.annotation.onset);
    record.gain = Some(mixed.gain);
    record.clipped = mixed.clipped;
    Ok(Mixture {
        clip: mixed.clip,
        annotation: Some(mixed.annotation),
        record,
    })
}

/// Draws `count_per_class` mixtures for every event label, in label order.
/// Mixture `i` uses its own RNG stream `i` of `spec.seed`, so the result does
/// not depend on evaluation order.
pub fn generate_mixtures(events: &[Source], backgrounds: &[Source], count_per_class: usize, spec: &MixSpec) -> Result<Vec<Mixture>> {
    spec.validate()?;
    if events.is_empty() || backgrounds.is_empty() {
        return Err(Error::Config("event and background pools must both be non-empty".into()));
    }
    let rate = backgrounds[0].clip.sample_rate;
    if let Some(s) = events.iter().chain(backgrounds).find(|s| s.clip.sample_rate != rate) {
        return Err(Error::Config(format!("{} has rate {} Hz, expected {rate} Hz", s.name, s.clip.sample_rate)));
    }
    let mut labels: Vec<&str> = events.iter().map(|e| e.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let jobs: Vec<(u64, &str, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(c, &l)| (0..count_per_class).map(move |k| ((c * count_per_class + k) as u64, l, k)))
        .collect();
    jobs.par_iter()
        .map(|&(stream, label, k)| {
            let pool: Vec<&Source> = events.iter().filter(|e| e.label == label).collect();
            render(stream, format!("mix_{label}_{k:05}.wav"), label, &pool, backgrounds, spec)
        })
        .collect()
}

/// Writes mixtures as 16-bit WAV files plus `annotations.tsv` and
/// `manifest.json` into `out_dir`.
pub fn write_dataset(out_dir: &Path, mixtures: &[Mixture], spec: &MixSpec, count_per_class: usize) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir)?;
    mixtures
        .par_iter()
        .try_for_each(|m| write_wav(out_dir.join(&m.record.file), &m.clip))?;
    let mut set = AnnotationSet::new();
    for m in mixtures {
        if let Some(a) = &m.annotation {
            set.entry(m.record.file.clone()).or_default().push(a.clone());
        }
    }
    write_annotations(out_dir.join("annotations.tsv"), &set)?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        sample_rate: mixtures.first().map_or(0, |m| m.clip.sample_rate),
        count_per_class,
        mixtures: mixtures.iter().map(|m| m.record.clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

pub fn generate_dataset(
    events: &[Source],
    backgrounds: &[Source],
    count_per_class: usize,
    spec: &MixSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mixtures = generate_mixtures(events, backgrounds, count_per_class, spec)?;
    write_dataset(out_dir, &mixtures, spec, count_per_class)
}

/// Synthetic source pools: `per_kind` events of each [`EventKind`] with
/// their default durations, and `n_backgrounds` backgrounds of
/// `background_seconds`. Seeds are derived from `seed`.
pub fn synthetic_sources(per_kind: usize, n_backgrounds: usize, background_seconds: f64, sample_rate: u32, seed: u64) -> (Vec<Source>, Vec<Source>) {
    let events = EventKind::ALL
        .iter()
        .enumerate()
        .flat_map(|(ki, &kind)| {
            (0..per_kind).map(move |i| Source {
                name: format!("{}_{i:03}", kind.name()),
                label: kind.name().to_string(),
                clip: synth_event(kind, kind.default_duration(), sample_rate, seed ^ (0x9E37_79B9 * (1 + ki as u64 * 1000 + i as u64))),
            })
        })
        .collect();
    let backgrounds = (0..n_backgrounds)
        .map(|i| Source {
            name: format!("background_{i:03}"),
            label: String::new(),
            clip: synth_background(background_seconds, sample_rate, seed.wrapping_add(0xB6_0000 + i as u64)),
        })
        .collect();
    (events, backgrounds)
}

/// Loads event sources from `<dir>/<label>/*.wav` and backgrounds from
/// `*.wav` in a flat directory. Files are taken in name order.
pub fn load_sources(dir: &Path, labelled: bool) -> Result<Vec<Source>> {
    let mut out = Vec::new();
    if labelled {
        for sub in sorted_entries(dir)? {
            if sub.is_dir() {
                let label = sub.file_name().unwrap().to_string_lossy().into_owned();
                for f in sorted_entries(&sub)?.into_iter().filter(|p| is_wav(p)) {
                    out.push(load_source(&f, &label)?);
                }
            }
        }
    } else {
        for f in sorted_entries(dir)?.into_iter().filter(|p| is_wav(p)) {
            out.push(load_source(&f, "")?);
        }
    }
    Ok(out)
}

fn load_source(path: &Path, label: &str) -> Result<Source> {
    Ok(Source {
        name: path.file_stem().unwrap().to_string_lossy().into_owned(),
        label: label.to_string(),
        clip: crate::features::load_wav(path)?,
    })
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ebr_scaling_examples() {
        let bg = synth_background(1.0, 8000, 1);
        let ev = synth_event(EventKind::Beep, 0.5, 8000, 2);
        let m0 = mix(&ev, &bg, 0.0, 0.25, "beep").unwrap();
        assert!((m0.gain * ev.rms() / bg.rms() - 1.0).abs() < 1e-9);
        let m6 = mix(&ev, &bg, -6.0, 0.25, "beep").unwrap();
        let ratio = m6.gain * ev.rms() / bg.rms();
        assert!((ratio - 10f64.powf(-0.3)).abs() < 1e-12 && (ratio - 0.5012).abs() < 1e-4);
        assert!((m6.annotation.offset - m6.annotation.onset - ev.duration()).abs() < 1e-12);
        assert!(!m6.clipped);
    }

    #[test]
    fn placement_errors() {
        let bg = synth_background(1.0, 8000, 1);
        let ev = synth_event(EventKind::Burst, 0.5, 8000, 2);
        assert!(matches!(mix(&ev, &bg, 0.0, 0.6, "b"), Err(Error::Placement(_))));
        assert!(mix(&ev, &bg, 0.0, 0.5, "b").is_ok());
    }

    #[test]
    fn loud_mixtures_are_soft_clipped() {
        let bg = synth_background(1.0, 8000, 1);
        let ev = synth_event(EventKind::Burst, 0.5, 8000, 2);
        let m = mix(&ev, &bg, 30.0, 0.0, "b").unwrap();
        assert!(m.clipped);
        assert!(m.clip.samples.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn event_designs() {
        for kind in EventKind::ALL {
            let e = synth_event(kind, kind.default_duration(), 16000, 5);
            assert_eq!(e.samples.len(), (kind.default_duration() * 16000.0).round() as usize);
            let peak = e.samples.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((peak - EVENT_PEAK).abs() < 1e-12);
            assert_eq!(e, synth_event(kind, kind.default_duration(), 16000, 5));
        }
        let b = synth_event(EventKind::Burst, 1.32, 16000, 9);
        let w = 320;
        let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        assert!(energy(&b.samples[b.samples.len() - w..]) < 0.01 * energy(&b.samples[..w]));
    }

    #[test]
    fn background_level_and_independence() {
        let a = synth_background(5.0, 16000, 1);
        let b = synth_background(5.0, 16000, 2);
        assert!((0.045..=0.055).contains(&a.rms()));
        let corr = a.samples.iter().zip(&b.samples).map(|(x, y)| x * y).sum::<f64>() / (a.rms() * b.rms() * a.samples.len() as f64);
        assert!(corr.abs() < 0.1, "correlation {corr}");
    }

    #[test]
    fn empty_pools_and_bad_spec_are_rejected() {
        let (ev, bg) = synthetic_sources(1, 1, 3.0, 8000, 0);
        let spec = MixSpec {
            clip_seconds: 3.0,
            ..MixSpec::default()
        };
        assert!(generate_mixtures(&[], &bg, 1, &spec).is_err());
        assert!(generate_mixtures(&ev, &[], 1, &spec).is_err());
        let bad = MixSpec {
            presence_prob: 1.5,
            ..spec.clone()
        };
        assert!(generate_mixtures(&ev, &bg, 1, &bad).is_err());
        let all = MixSpec {
            presence_prob: 1.0,
            ..spec
        };
        let mixes = generate_mixtures(&ev, &bg, 4, &all).unwrap();
        assert_eq!(mixes.len(), 12);
        assert!(mixes.iter().all(|m| m.annotation.is_some()));
    }
}
