use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Centre line of one vessel branch. `widths[i]` is the width (pixels) of the
/// segment from `points[i]` to `points[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// `(row, col)` positions.
    pub points: Vec<(f64, f64)>,
    pub widths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VesselMap {
    /// Binary mask, 1 on vessel pixels.
    pub grid: Array2<u8>,
    pub centerlines: Vec<Polyline>,
    /// `(row, col)` of the optic-disc analogue the tree is rooted at.
    pub disc_center: (f64, f64),
}

impl VesselMap {
    pub fn size(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub fn vessel_fraction(&self) -> f64 {
        self.grid.iter().filter(|&&v| v != 0).count() as f64 / self.grid.len() as f64
    }
}

// Geometry of the 64-pixel reference tree; everything scales with image size.
const SEGMENT_LEN: f64 = 3.0;
const TRUNK_WIDTH: f64 = 2.2;
const MIN_WIDTH: f64 = 0.8;
const WIDTH_DECAY: f64 = 0.97;
const CHILD_WIDTH: f64 = 0.72;
const BRANCH_PROB: f64 = 0.16;
const CURVATURE_STD: f64 = 0.14;
const MAX_DEPTH: usize = 4;
const MAX_SEGMENTS: usize = 80;
const MAX_BRANCHES: usize = 48;
/// Pixels within this distance of a centre line are always painted so thin
/// branches stay 8-connected.
const MIN_HALF_WIDTH: f64 = 0.55;

struct Grower<'a, R: Rng> {
    rng: &'a mut R,
    h: usize,
    w: usize,
    scale: f64,
    lines: Vec<Polyline>,
}

impl<R: Rng> Grower<'_, R> {
    fn inside(&self, p: (f64, f64)) -> bool {
        p.0 >= 1.0 && p.1 >= 1.0 && p.0 <= (self.h - 2) as f64 && p.1 <= (self.w - 2) as f64
    }

    fn grow(&mut self, start: (f64, f64), mut angle: f64, width: f64, depth: usize) {
        let bend = Normal::new(0.0, CURVATURE_STD).expect("valid std");
        let mut points = vec![start];
        let mut widths = Vec::new();
        let mut children = Vec::new();
        let mut w = width;
        let min_w = MIN_WIDTH * self.scale;
        let step = SEGMENT_LEN * self.scale;
        let mut p = start;
        for _ in 0..MAX_SEGMENTS {
            if w < min_w {
                break;
            }
            angle += bend.sample(self.rng);
            let next = (p.0 + step * angle.sin(), p.1 + step * angle.cos());
            if !self.inside(next) {
                break;
            }
            points.push(next);
            widths.push(w);
            p = next;
            let child_w = w * CHILD_WIDTH;
            if depth < MAX_DEPTH && child_w >= min_w && self.rng.gen_bool(BRANCH_PROB) {
                let side = if self.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let turn = self.rng.gen_range(0.45..1.0);
                children.push((p, angle + side * turn, child_w));
                angle -= side * 0.5 * turn * 0.3;
            }
            w *= WIDTH_DECAY;
        }
        if widths.is_empty() {
            return;
        }
        self.lines.push(Polyline { points, widths });
        for (p, a, cw) in children {
            if self.lines.len() >= MAX_BRANCHES {
                break;
            }
            self.grow(p, a, cw, depth + 1);
        }
    }
}

/// Grows a seeded branching vessel tree rooted near a disc centre.
pub fn generate_vessel_tree(seed: u64, size: (usize, usize)) -> Result<VesselMap> {
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(Error::invalid(format!(
            "vessel tree needs at least 32x32 pixels, got {h}x{w}"
        )));
    }
    let mut rng = rng::stream(seed, "vessel-tree");
    let scale = h.min(w) as f64 / 64.0;
    let disc_center = (
        h as f64 * (0.5 + rng.gen_range(-0.08..0.08)),
        w as f64 * rng.gen_range(0.38..0.62),
    );
    let n_trunks = rng.gen_range(4..=6);
    let offset = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut grower = Grower {
        rng: &mut rng,
        h,
        w,
        scale,
        lines: Vec::new(),
    };
    for k in 0..n_trunks {
        let jitter = grower.rng.gen_range(-0.3..0.3);
        let angle = offset + std::f64::consts::TAU * k as f64 / n_trunks as f64 + jitter;
        let width = TRUNK_WIDTH * scale * grower.rng.gen_range(0.85..1.15);
        grower.grow(disc_center, angle, width, 0);
    }
    let centerlines = grower.lines;
    let grid = rasterize(&centerlines, (h, w));
    Ok(VesselMap {
        grid,
        centerlines,
        disc_center,
    })
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qr, qc) = (a.0 + t * dr, a.1 + t * dc);
    ((p.0 - qr).powi(2) + (p.1 - qc).powi(2)).sqrt()
}

/// Paints every pixel centre within half a segment width of a centre line.
pub fn rasterize(lines: &[Polyline], size: (usize, usize)) -> Array2<u8> {
    let (h, w) = size;
    let mut grid = Array2::<u8>::zeros((h, w));
    for line in lines {
        for (seg, &width) in line.points.windows(2).zip(&line.widths) {
            let (a, b) = (seg[0], seg[1]);
            let half = (width / 2.0).max(MIN_HALF_WIDTH);
            let r0 = (a.0.min(b.0) - half).floor().max(0.0) as usize;
            let r1 = ((a.0.max(b.0) + half).ceil() as usize).min(h - 1);
            let c0 = (a.1.min(b.1) - half).floor().max(0.0) as usize;
            let c1 = ((a.1.max(b.1) + half).ceil() as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if segment_distance((r as f64, c as f64), a, b) <= half {
                        grid[[r, c]] = 1;
                    }
                }
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_vessel_tree(7, (64, 64)).unwrap();
        let b = generate_vessel_tree(7, (64, 64)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ() {
        let a = generate_vessel_tree(7, (64, 64)).unwrap();
        let b = generate_vessel_tree(8, (64, 64)).unwrap();
        assert_ne!(a.grid, b.grid);
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(matches!(
            generate_vessel_tree(1, (31, 64)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn vessel_fraction_in_range_over_100_seeds() {
        for size in [(64, 64), (128, 96)] {
            for seed in 0..100 {
                let m = generate_vessel_tree(seed, size).unwrap();
                let f = m.vessel_fraction();
                assert!((0.01..=0.25).contains(&f), "seed {seed} {size:?}: fraction {f}");
            }
        }
    }

    #[test]
    fn grid_is_rasterized_centerlines_and_in_bounds() {
        for seed in 0..10 {
            let m = generate_vessel_tree(seed, (64, 80)).unwrap();
            assert_eq!(m.grid, rasterize(&m.centerlines, (64, 80)));
            for l in &m.centerlines {
                assert_eq!(l.points.len(), l.widths.len() + 1);
                for &(r, c) in &l.points {
                    assert!((0.0..64.0).contains(&r) && (0.0..80.0).contains(&c));
                }
                assert!(l.widths.windows(2).all(|w| w[1] < w[0]));
            }
        }
    }
}
