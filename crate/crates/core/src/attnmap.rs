//! Attention heatmaps on a patch grid.
//!
//! Square tiles of `tile × tile` cells slide over the grid with stride
//! `stride` (tile 5 / stride 1 is 80 % overlap). A tile scores the mean
//! attention of the patches inside it; each cell averages the scores of every
//! tile covering it. The result is min–max normalized to [0, 1].

use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub tile: usize,
    pub stride: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { tile: 5, stride: 1 }
    }
}

impl GridSpec {
    pub fn overlap(&self) -> f64 {
        1.0 - self.stride as f64 / self.tile as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.stride == 0 || self.stride > self.tile {
            bail!(Config, "grid needs 0 < stride <= tile, got tile {} stride {}", self.tile, self.stride);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, normalized to [0, 1].
    pub values: Vec<f64>,
    /// Cells not covered by any tile that holds a patch.
    pub empty: Vec<bool>,
    /// Max equalled min before normalization, so every value is 0.
    pub degenerate: bool,
}

impl AttentionGrid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let i = (0..self.values.len())
            .filter(|&i| !self.empty[i])
            .fold(None::<usize>, |best, i| match best {
                Some(b) if self.values[b] >= self.values[i] => Some(b),
                _ => Some(i),
            })
            .unwrap_or(0);
        (i / self.cols, i % self.cols)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|c| format!("{}", self.get(r, c))).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary 8-bit greymap with one `# key=value` header comment per entry.
    pub fn to_pgm(&self, comments: &[(&str, String)]) -> Vec<u8> {
        let mut head = String::from("P5\n");
        for (k, v) in comments {
            head.push_str(&format!("# {k}={v}\n"));
        }
        head.push_str(&format!("{} {}\n255\n", self.cols, self.rows));
        let mut out = head.into_bytes();
        out.extend(self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Parses a binary PGM written by [`AttentionGrid::to_pgm`]: (cols, rows, pixels).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        bail!(Format, "expected an 8-bit P5 greymap");
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| crate::Error::Format(format!("bad PGM size {s:?}")));
    let (cols, rows) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != rows * cols {
        bail!(Format, "PGM holds {} pixels for a {}×{} image", pixels.len(), cols, rows);
    }
    Ok((cols, rows, pixels))
}

/// Tile starts along an axis of `len` cells; the last tile is clipped at the edge.
fn starts(len: usize, spec: &GridSpec) -> Vec<usize> {
    let last = len.saturating_sub(spec.tile);
    let mut s: Vec<usize> = (0..=last).step_by(spec.stride).collect();
    if *s.last().unwrap() != last {
        s.push(last);
    }
    s
}

/// `coords[i] = (row, col)` of patch `i`, `scores[i]` its attention weight.
pub fn attention_grid(coords: &[(u32, u32)], scores: &[f64], spec: &GridSpec) -> Result<AttentionGrid> {
    spec.validate()?;
    if coords.is_empty() || coords.len() != scores.len() {
        bail!(Data, "{} patch coordinates for {} attention scores", coords.len(), scores.len());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail!(Data, "non-finite attention score");
    }
    let rows = coords.iter().map(|c| c.0 as usize).max().unwrap() + 1;
    let cols = coords.iter().map(|c| c.1 as usize).max().unwrap() + 1;
    let mut cell_sum = vec![0.0; rows * cols];
    let mut cell_n = vec![0usize; rows * cols];
    for (&(r, c), &s) in coords.iter().zip(scores) {
        cell_sum[r as usize * cols + c as usize] += s;
        cell_n[r as usize * cols + c as usize] += 1;
    }

    let mut acc = vec![0.0; rows * cols];
    let mut covers = vec![0usize; rows * cols];
    for &r0 in &starts(rows, spec) {
        for &c0 in &starts(cols, spec) {
            let (r1, c1) = ((r0 + spec.tile).min(rows), (c0 + spec.tile).min(cols));
            let (mut sum, mut n) = (0.0, 0usize);
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += cell_sum[r * cols + c];
                    n += cell_n[r * cols + c];
                }
            }
            if n == 0 {
                continue;
            }
            let score = sum / n as f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc[r * cols + c] += score;
                    covers[r * cols + c] += 1;
                }
            }
        }
    }
    let empty: Vec<bool> = covers.iter().map(|&k| k == 0).collect();
    let raw: Vec<f64> = acc.iter().zip(&covers).map(|(a, &k)| if k > 0 { a / k as f64 } else { 0.0 }).collect();
    let live = || raw.iter().zip(&empty).filter(|(_, e)| !**e).map(|(v, _)| *v);
    let lo = live().fold(f64::INFINITY, f64::min);
    let hi = live().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi - lo > 1e-15 * hi.abs().max(1e-300));
    let values = raw
        .iter()
        .zip(&empty)
        .map(|(v, e)| if degenerate || *e { 0.0 } else { (v - lo) / (hi - lo) })
        .collect();
    Ok(AttentionGrid { rows, cols, values, empty, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(side: u32) -> Vec<(u32, u32)> {
        (0..side * side).map(|p| (p / side, p % side)).collect()
    }

    #[test]
    fn uniform_attention_is_a_flagged_zero_grid() {
        let coords = lattice(8);
        let g = attention_grid(&coords, &vec![1.0 / 64.0; 64], &GridSpec::default()).unwrap();
        assert!(g.degenerate);
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dominant_patch_is_the_argmax_cell() {
        let coords = lattice(12);
        let mut s = vec![0.001; 144];
        s[7 * 12 + 3] = 0.9;
        let g = attention_grid(&coords, &s, &GridSpec::default()).unwrap();
        // overlapping tiles spread the outlier into a plateau; its own cell is on it
        assert!((g.get(7, 3) - 1.0).abs() < 1e-12);
        let (r, c) = g.argmax();
        assert!(r.abs_diff(7) < 5 && c.abs_diff(3) < 5);
        assert!(g.get(0, 11) < 0.01);
        assert!(g.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(!g.degenerate);
    }

    #[test]
    fn pgm_round_trip() {
        let coords: Vec<(u32, u32)> = (0..15).map(|p| (p / 5, p % 5)).collect();
        let s: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let g = attention_grid(&coords, &s, &GridSpec { tile: 2, stride: 1 }).unwrap();
        let bytes = g.to_pgm(&[("seed", "3".into())]);
        assert!(bytes.starts_with(b"P5\n# seed=3\n"));
        let (cols, rows, px) = parse_pgm(&bytes).unwrap();
        assert_eq!((cols, rows), (g.cols, g.rows));
        assert_eq!(px, g.values.iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<_>>());
        assert!(px.contains(&0) && px.contains(&255));
        assert!(parse_pgm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn cells_average_every_covering_tile() {
        // 1×3 strip, tile 2 stride 1: tiles {0,1} and {1,2}
        let coords = vec![(0, 0), (0, 1), (0, 2)];
        let g = attention_grid(&coords, &[0.0, 2.0, 4.0], &GridSpec { tile: 2, stride: 1 }).unwrap();
        // tile scores 1 and 3; cells 1, 2, 3 → normalized 0, 0.5, 1
        assert_eq!(g.values, vec![0.0, 0.5, 1.0]);
        assert_eq!(GridSpec::default().overlap(), 0.8);
        assert!(GridSpec { tile: 2, stride: 3 }.validate().is_err());
    }
}
