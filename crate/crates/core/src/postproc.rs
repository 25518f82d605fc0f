//! From frame probabilities to timestamped events, plus the tab-separated
//! annotation format shared by references and detections.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::features::Spectrogram;

/// A labelled event with onset and offset in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub label: String,
    pub onset: f64,
    pub offset: f64,
}

impl EventAnnotation {
    pub fn new(label: impl Into<String>, onset: f64, offset: f64) -> Result<Self> {
        if !(onset >= 0.0 && offset > onset && offset.is_finite()) {
            return Err(Error::Annotation(format!(
                "need 0 <= onset < offset, got onset {onset}, offset {offset}"
            )));
        }
        Ok(Self {
            label: label.into(),
            onset,
            offset,
        })
    }
}

/// Appends copies of the final frame until the frame count is a multiple of
/// `multiple`. Returns the padded spectrogram and the original length.
pub fn pad_time_axis(spec: &Spectrogram, multiple: usize) -> (Spectrogram, usize) {
    let t = spec.n_frames();
    let padded = t.div_ceil(multiple) * multiple;
    let data = spec.window_padded(0, padded);
    (
        Spectrogram::new(data, padded, spec.n_mels(), spec.hop_seconds, spec.window_seconds),
        t,
    )
}

/// `prob >= threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= threshold).collect()
}

/// Number of frames covered by a median window of `ms` milliseconds.
pub fn median_width_frames(ms: f64, hop_seconds: f64) -> usize {
    (ms / 1000.0 / hop_seconds).round() as usize
}

/// Binary median (majority) filter of odd `width`, replicating the edge
/// values beyond either end.
pub fn median_filter(binary: &[bool], width: usize) -> Result<Vec<bool>> {
    if width.is_multiple_of(2) {
        return Err(contract("median_filter", format!("width {width} must be odd")));
    }
    let n = binary.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = (width / 2) as isize;
    let at = |i: isize| binary[i.clamp(0, n as isize - 1) as usize] as usize;
    let mut ones: usize = (-half..=half).map(at).sum();
    let mut out = Vec::with_capacity(n);
    for i in 0..n as isize {
        out.push(2 * ones > width);
        ones = ones + at(i + half + 1) - at(i - half);
    }
    Ok(out)
}

/// Each maximal run of active frames `[a, b]` becomes an event
/// `(a·hop, (b+1)·hop)`.
pub fn extract_events(binary: &[bool], hop_seconds: f64, label: &str) -> Vec<EventAnnotation> {
    let mut events = Vec::new();
    let mut start = None;
    for (i, &b) in binary.iter().chain(std::iter::once(&false)).enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                events.push(EventAnnotation {
                    label: label.to_string(),
                    onset: a as f64 * hop_seconds,
                    offset: i as f64 * hop_seconds,
                });
                start = None;
            }
            _ => {}
        }
    }
    events
}

/// Threshold, smooth and extract events in one call.
pub fn detect_events(probs: &[f64], threshold: f64, median_width: usize, hop_seconds: f64, label: &str) -> Result<Vec<EventAnnotation>> {
    let smoothed = median_filter(&binarize(probs, threshold), median_width)?;
    Ok(extract_events(&smoothed, hop_seconds, label))
}

/// Events grouped by audio file name. Files without events may be present
/// with an empty list.
pub type AnnotationSet = BTreeMap<String, Vec<EventAnnotation>>;

/// Renders `file<TAB>onset<TAB>offset<TAB>label` lines, six decimals,
/// files in name order and events by onset.
pub fn format_annotations(set: &AnnotationSet) -> String {
    let mut out = String::new();
    for (file, events) in set {
        let mut sorted: Vec<&EventAnnotation> = events.iter().collect();
        sorted.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        for e in sorted {
            let _ = writeln!(out, "{file}\t{:.6}\t{:.6}\t{}", e.onset, e.offset, e.label);
        }
    }
    out
}

pub fn write_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    std::fs::write(path, format_annotations(set))?;
    Ok(())
}

/// Parses the annotation format. A line holding only a file name declares a
/// file with no events; blank lines are ignored.
pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let mut set = AnnotationSet::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::Annotation(format!("line {}: {why}: {line:?}", ln + 1));
        match fields.as_slice() {
            [file] => {
                set.entry(file.to_string()).or_default();
            }
            [file, onset, offset, label] => {
                let onset: f64 = onset.trim().parse().map_err(|_| bad("bad onset"))?;
                let offset: f64 = offset.trim().parse().map_err(|_| bad("bad offset"))?;
                let ev = EventAnnotation::new(label.trim(), onset, offset).map_err(|e| bad(&e.to_string()))?;
                set.entry(file.to_string()).or_default().push(ev);
            }
            _ => return Err(bad("expected 1 or 4 tab-separated fields")),
        }
    }
    Ok(set)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn padding_examples() {
        let spec = |t| Spectrogram::new((0..t * 2).map(|v| v as f64).collect(), t, 2, 0.02, 0.04);
        let (p, orig) = pad_time_axis(&spec(1501), 8);
        assert_eq!((p.n_frames(), orig), (1504, 1501));
        assert_eq!(p.frame(1503), spec(1501).frame(1500));
        assert_eq!(pad_time_axis(&spec(256), 8).0.n_frames(), 256);
        let (p, _) = pad_time_axis(&spec(1), 8);
        assert_eq!(p.n_frames(), 8);
        assert!((0..8).all(|t| p.frame(t) == [0.0, 1.0]));
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.1, 0.5, 0.3], 0.4), bits(&[0, 1, 0]));
        assert_eq!(binarize(&[0.4], 0.4), vec![true]);
        assert_eq!(binarize(&[0.1, 0.2], 0.9), bits(&[0, 0]));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter(&bits(&[0, 1, 0, 1, 1]), 3).unwrap(), bits(&[0, 0, 1, 1, 1]));
        assert_eq!(median_filter(&bits(&[1, 1, 1]), 5).unwrap(), bits(&[1, 1, 1]));
        let mut spike = vec![false; 60];
        spike[30] = true;
        assert!(median_filter(&spike, 27).unwrap().iter().all(|&b| !b));
        assert!(median_filter(&spike, 4).is_err());
        assert_eq!(median_width_frames(540.0, 0.02), 27);
    }

    #[test]
    fn extract_examples() {
        let ev = extract_events(&bits(&[0, 1, 1, 0]), 0.02, "x");
        assert_eq!(ev.len(), 1);
        assert!((ev[0].onset - 0.02).abs() < 1e-12 && (ev[0].offset - 0.06).abs() < 1e-12);
        assert!(extract_events(&bits(&[0, 0]), 0.02, "x").is_empty());
        let ev = extract_events(&bits(&[1, 0, 1]), 0.02, "x");
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].onset, ev[1].offset), (0.0, 0.06));
        assert!((ev[0].offset - 0.02).abs() < 1e-12 && (ev[1].onset - 0.04).abs() < 1e-12);
    }

    #[test]
    fn tsv_roundtrip_and_errors() {
        let mut set = AnnotationSet::new();
        set.insert("b.wav".into(), vec![EventAnnotation::new("gunshot", 3.5, 4.25).unwrap()]);
        set.insert("a.wav".into(), vec![EventAnnotation::new("babycry", 0.1234567, 2.0).unwrap()]);
        let text = format_annotations(&set);
        assert_eq!(text, "a.wav\t0.123457\t2.000000\tbabycry\nb.wav\t3.500000\t4.250000\tgunshot\n");
        let back = parse_annotations(&(text + "c.wav\n")).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back["c.wav"].is_empty());
        assert!(parse_annotations("a.wav\t2.0\t1.0\tx\n").is_err());
        assert!(parse_annotations("a.wav\t1.0\n").is_err());
        assert!(EventAnnotation::new("x", 1.0, 1.0).is_err());
    }
}
