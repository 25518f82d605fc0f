//! Attention dumps: binary PGM images plus plain-text matrices.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// A `rows × cols` matrix, row-major, rows indexing time.
pub struct Map<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

/// Mean over the leading channel axis of `[C, R, K]` data.
pub fn channel_mean(shape: &[usize], data: &[f64]) -> Vec<f64> {
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&data[ch * plane..(ch + 1) * plane]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

/// Writes the map as an 8-bit PGM with time on the horizontal axis and low
/// frequencies at the bottom, min-max normalized.
pub fn write_pgm(path: &Path, m: &Map) -> io::Result<()> {
    let (lo, hi) = m.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", m.rows, m.cols).into_bytes();
    for f in (0..m.cols).rev() {
        for t in 0..m.rows {
            let v = (m.data[t * m.cols + f] - lo) / span;
            bytes.push((v * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes)
}

/// One line per time step, whitespace-separated values.
pub fn write_matrix(path: &Path, m: &Map) -> io::Result<()> {
    let mut s = String::with_capacity(m.data.len() * 12);
    for row in m.data.chunks(m.cols) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v:.6e}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)
}

pub fn write_both(dir: &Path, stem: &str, m: &Map) -> io::Result<()> {
    write_pgm(&dir.join(format!("{stem}.pgm")), m)?;
    write_matrix(&dir.join(format!("{stem}.txt")), m)
}
