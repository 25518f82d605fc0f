use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioClip, Spectrogram};
use crate::error::{Error, Result};

pub const HOP_SECONDS: f64 = 0.020;
pub const WINDOW_SECONDS: f64 = 0.040;
pub const N_MELS: usize = 128;
/// Energies below this are clamped before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Framing in samples for a given sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameParams {
    pub hop: usize,
    pub window: usize,
    pub n_fft: usize,
}

impl FrameParams {
    pub fn for_rate(sample_rate: u32) -> Self {
        let hop = (HOP_SECONDS * sample_rate as f64).round().max(1.0) as usize;
        let window = (WINDOW_SECONDS * sample_rate as f64).round().max(1.0) as usize;
        Self {
            hop,
            window,
            n_fft: window.next_power_of_two(),
        }
    }
}

/// Number of frames for `n_samples` of audio: `floor(n / hop) + 1`, the tail
/// being zero-padded so the last frames are complete.
pub fn frame_count(n_samples: usize, sample_rate: u32) -> usize {
    n_samples / FrameParams::for_rate(sample_rate).hop + 1
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft/2 + 1` non-negative FFT bins,
/// spanning 0 Hz to Nyquist, each scaled so its peak weight is 1.
/// Returned row-major as `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_fft: usize, n_mels: usize, sample_rate: u32) -> Result<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            *w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::EmptyMelFilter { index: m });
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(fb)
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// 128-bin log-mel spectrogram: Hamming window of 40 ms, hop 20 ms, power
/// spectrum, triangular mel filters, `ln(max(E, 1e-10))`.
pub fn logmel(clip: &AudioClip) -> Result<Spectrogram> {
    logmel_with(clip, N_MELS)
}

pub(crate) fn logmel_with(clip: &AudioClip, n_mels: usize) -> Result<Spectrogram> {
    let fp = FrameParams::for_rate(clip.sample_rate);
    let bins = fp.n_fft / 2 + 1;
    let fb = mel_filterbank(fp.n_fft, n_mels, clip.sample_rate)?;
    let window = hamming(fp.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fp.n_fft);
    let n_frames = frame_count(clip.samples.len(), clip.sample_rate);

    let mut buf = vec![Complex::new(0.0, 0.0); fp.n_fft];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; bins];
    let mut out = Vec::with_capacity(n_frames * n_mels);
    for t in 0..n_frames {
        let start = t * fp.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < fp.window {
                clip.samples.get(start + i).copied().unwrap_or(0.0) * window[i]
            } else {
                0.0
            };
            *c = Complex::new(s, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..n_mels {
            let e: f64 = fb[m * bins..(m + 1) * bins]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            out.push(e.max(LOG_FLOOR).ln());
        }
    }
    Ok(Spectrogram::new(out, n_frames, n_mels, HOP_SECONDS, WINDOW_SECONDS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(1_323_000, 44100), 1501);
        assert_eq!(frame_count(176_400, 44100), 201);
        assert_eq!(frame_count(882, 44100), 2);
        assert_eq!(frame_count(0, 44100), 1);
        assert_eq!(FrameParams::for_rate(44100).n_fft, 2048);
    }

    #[test]
    fn filterbank_peaks_and_coverage() {
        let fb = mel_filterbank(2048, 128, 44100).unwrap();
        let bins = 1025;
        for m in 0..128 {
            let row = &fb[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, 1.0, "filter {m}");
            // Constant power spectrum yields positive energy.
            assert!(row.iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn too_many_filters_names_the_empty_one() {
        match mel_filterbank(64, 128, 8000) {
            Err(Error::EmptyMelFilter { index }) => assert!(index < 128),
            other => panic!("expected empty-filter error, got {other:?}"),
        }
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let spec = logmel(&AudioClip::silence(0.5, 16000)).unwrap();
        assert_eq!(spec.n_mels(), 128);
        assert_eq!(spec.n_frames(), 26);
        assert!(spec.data().iter().all(|&v| v == LOG_FLOOR.ln()));
        assert!((LOG_FLOOR.ln() + 23.026).abs() < 1e-3);
    }

    #[test]
    fn pure_tone_peaks_in_one_band() {
        let sr = 44100;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin())
            .collect();
        let spec = logmel(&AudioClip::new(samples.clone(), sr)).unwrap();
        let fp = FrameParams::for_rate(sr);
        let complete = (samples.len() - fp.window) / fp.hop + 1;
        let argmax = |t: usize| {
            let f = spec.frame(t);
            (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap()
        };
        let first = argmax(0);
        for t in 1..complete {
            assert_eq!(argmax(t), first, "frame {t}");
        }
    }

    #[test]
    fn scaling_shifts_log_energies() {
        let sr = 16000;
        let samples: Vec<f64> = (0..8000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let a = logmel(&AudioClip::new(samples.clone(), sr)).unwrap();
        let alpha: f64 = 0.25;
        let b = logmel(&AudioClip::new(samples.iter().map(|v| v * alpha).collect(), sr)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            if *y > LOG_FLOOR.ln() + 1.0 {
                assert!((y - x - 2.0 * alpha.ln()).abs() < 1e-6);
            }
        }
    }
}
