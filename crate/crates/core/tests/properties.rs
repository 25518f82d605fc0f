use proptest::prelude::*;

use mtfa::evaluation::match_events;
use mtfa::ops;
use mtfa::postproc::{format_annotations, median_filter, parse_annotations, AnnotationSet};
use mtfa::training::{chunk, chunk_count, label_frames};
use mtfa::{EventAnnotation, Spectrogram, Tensor};

fn runs(x: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < x.len() {
        let j = (i..x.len()).find(|&j| x[j] != x[i]).unwrap_or(x.len());
        out.push(j - i);
        i = j;
    }
    out
}

fn ev(onset: f64) -> EventAnnotation {
    EventAnnotation::new("x", onset, onset + 0.25).unwrap()
}

proptest! {
    #[test]
    fn long_runs_survive_the_median_filter(
        half in 1usize..10,
        lens in prop::collection::vec(0usize..12, 1..8),
        first in any::<bool>(),
    ) {
        let width = 2 * half + 1;
        let mut x = Vec::new();
        let mut v = first;
        for extra in lens {
            x.extend(std::iter::repeat_n(v, half + 1 + extra));
            v = !v;
        }
        prop_assert!(runs(&x).iter().all(|&r| r > half));
        prop_assert_eq!(median_filter(&x, width).unwrap(), x);
    }

    #[test]
    fn median_filter_preserves_length_and_constants(
        x in prop::collection::vec(any::<bool>(), 0..100),
        half in 0usize..10,
        c in any::<bool>(),
    ) {
        let width = 2 * half + 1;
        prop_assert_eq!(median_filter(&x, width).unwrap().len(), x.len());
        let constant = vec![c; x.len()];
        prop_assert_eq!(median_filter(&constant, width).unwrap(), constant);
    }

    #[test]
    fn matching_ignores_prediction_order(
        refs in prop::collection::vec(0u32..256, 0..7),
        preds in prop::collection::vec(0u32..256, 0..7),
        rot in 0usize..7,
    ) {
        let r: Vec<_> = refs.iter().map(|&k| ev(k as f64 / 64.0)).collect();
        let p: Vec<_> = preds.iter().map(|&k| ev(k as f64 / 64.0)).collect();
        let mut q = p.clone();
        q.reverse();
        if !q.is_empty() {
            let k = rot % q.len();
            q.rotate_left(k);
        }
        prop_assert_eq!(match_events(&r, &p, 0.5).pairs.len(), match_events(&r, &q, 0.5).pairs.len());
    }

    #[test]
    fn matching_is_shift_invariant(
        refs in prop::collection::vec(0u32..256, 0..7),
        preds in prop::collection::vec(0u32..256, 0..7),
        shift in 0u32..640,
    ) {
        let at = |ks: &[u32], s: u32| -> Vec<EventAnnotation> { ks.iter().map(|&k| ev((k + s) as f64 / 64.0)).collect() };
        let base = match_events(&at(&refs, 0), &at(&preds, 0), 0.5);
        let moved = match_events(&at(&refs, shift), &at(&preds, shift), 0.5);
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn chunk_count_matches_a_covering_walk(total in 1usize..2000, frames in 1usize..300, shift_frac in 1usize..=4) {
        let shift = (frames * shift_frac / 4).max(1);
        let mut start = 0;
        let mut count = 1;
        while start + frames < total {
            start += shift;
            count += 1;
        }
        prop_assert_eq!(chunk_count(total, frames, shift), count);
    }

    #[test]
    fn chunks_cover_every_frame(total in 1usize..200, frames in 1usize..64, shift in 1usize..64) {
        let shift = shift.min(frames);
        let spec = Spectrogram::new((0..total * 2).map(|v| v as f64).collect(), total, 2, 0.02, 0.04);
        let labels: Vec<f64> = (0..total).map(|t| (t % 2) as f64).collect();
        let chunks = chunk(&spec, &labels, frames, shift, 0);
        let mut seen = vec![false; total];
        for c in &chunks {
            prop_assert_eq!(c.features.len(), frames * 2);
            prop_assert_eq!(c.labels.len(), frames);
            for k in 0..frames {
                let t = (c.start + k).min(total - 1);
                seen[t] = true;
                prop_assert_eq!(c.labels[k], labels[t]);
                prop_assert_eq!(c.features[2 * k], (2 * t) as f64);
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn frame_labels_follow_frame_centres(events in prop::collection::vec((0u32..5000, 1u32..2000), 0..4), n in 1usize..400) {
        // Millisecond grid: centre of frame t is 20t + 20 ms.
        let anns: Vec<EventAnnotation> = events
            .iter()
            .map(|&(on, len)| EventAnnotation::new("x", on as f64 / 1000.0, (on + len) as f64 / 1000.0).unwrap())
            .collect();
        let got = label_frames(n, 0.02, 0.04, &anns).unwrap();
        for (t, &g) in got.iter().enumerate() {
            let centre = 20 * t as u32 + 20;
            let want = events.iter().any(|&(on, len)| on <= centre && centre < on + len);
            prop_assert_eq!(g, f64::from(u8::from(want)), "frame {}", t);
        }
    }

    #[test]
    fn annotation_tsv_round_trips(
        files in prop::collection::btree_map(
            "[a-z]{1,8}\\.wav",
            prop::collection::vec((0u64..60_000_000, 1u64..10_000_000, "[a-z]{1,6}"), 0..5),
            0..5,
        ),
    ) {
        let set: AnnotationSet = files
            .into_iter()
            .map(|(f, evs)| {
                let mut evs: Vec<EventAnnotation> = evs
                    .into_iter()
                    .map(|(on, len, l)| EventAnnotation::new(l, on as f64 / 1e6, (on + len) as f64 / 1e6).unwrap())
                    .collect();
                evs.sort_by(|a, b| a.onset.total_cmp(&b.onset));
                (f, evs)
            })
            .filter(|(_, evs)| !evs.is_empty())
            .collect();
        let text = format_annotations(&set);
        let back = parse_annotations(&text).unwrap();
        let back: AnnotationSet = back.into_iter().filter(|(_, v)| !v.is_empty()).collect();
        prop_assert_eq!(back.len(), set.len());
        for (f, evs) in &set {
            let mut got = back[f].clone();
            got.sort_by(|a, b| a.onset.total_cmp(&b.onset));
            let mut want = evs.clone();
            want.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.offset.total_cmp(&b.offset)).then(a.label.cmp(&b.label)));
            got.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.offset.total_cmp(&b.offset)).then(a.label.cmp(&b.label)));
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn maxpool_undoes_upsampling(data in prop::collection::vec(-10.0f64..10.0, 24)) {
        let x = Tensor::new(&[1, 2, 3, 4], data).unwrap();
        let up = ops::upsample_nearest2(&x).unwrap();
        prop_assert_eq!(up.shape(), &[1, 2, 6, 8]);
        prop_assert!((up.sum() - 4.0 * x.sum()).abs() < 1e-9);
        let (down, _) = ops::maxpool2d(&up).unwrap();
        prop_assert_eq!(down, x);
    }

    #[test]
    fn sigmoid_and_tanh_stay_inside_open_intervals(v in -1e4f64..1e4) {
        let s = ops::sigmoid_scalar(v);
        prop_assert!(s > 0.0 && s < 1.0);
        let t = ops::tanh(&Tensor::scalar(v)).item();
        prop_assert!(t > -1.0 && t < 1.0);
    }
}

#[test]
fn median_filter_is_not_idempotent() {
    let x = [false, true, false, true, false];
    let once = median_filter(&x, 3).unwrap();
    assert_eq!(once, [false, false, true, false, false]);
    let twice = median_filter(&once, 3).unwrap();
    assert_eq!(twice, [false; 5]);
    assert_ne!(once, twice);
}
