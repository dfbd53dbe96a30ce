//! Non-local graph construction: for every pixel, the `k` nearest feature
//! vectors inside a square search window, never including the pixel's own
//! spatial neighborhood.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlgConfig {
    pub k: usize,
    /// The search window is the `(2r+1)²` block centered on the pixel,
    /// clipped at the image border.
    pub window_radius: usize,
    /// Pixels with Chebyshev distance `≤ exclusion_radius` are never
    /// neighbors; radius 1 excludes the 3×3 block including the pixel itself.
    pub exclusion_radius: usize,
}

impl Default for NlgConfig {
    fn default() -> Self {
        NlgConfig { k: 8, window_radius: 16, exclusion_radius: 1 }
    }
}

impl NlgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exclusion_radius >= self.window_radius {
            return Err(Error::Config(format!(
                "exclusion radius {} must be smaller than window radius {}",
                self.exclusion_radius, self.window_radius
            )));
        }
        Ok(())
    }

    fn eligible(&self, i: usize, j: usize, width: usize) -> bool {
        let (ri, ci) = ((i / width) as isize, (i % width) as isize);
        let (rj, cj) = ((j / width) as isize, (j % width) as isize);
        let (dr, dc) = ((rj - ri).unsigned_abs(), (cj - ci).unsigned_abs());
        let in_window = dr <= self.window_radius && dc <= self.window_radius;
        let excluded = dr <= self.exclusion_radius && dc <= self.exclusion_radius;
        in_window && !excluded
    }

    /// Smallest number of eligible candidates over all pixels of an
    /// `height × width` grid, with the pixel that attains it.
    pub fn min_eligible(&self, height: usize, width: usize) -> (usize, usize) {
        let clipped = |c: usize, r: usize, n: usize| c.min(r) + 1 + (n - 1 - c).min(r);
        let mut best = (usize::MAX, 0);
        for row in 0..height {
            for col in 0..width {
                let window = clipped(row, self.window_radius, height) * clipped(col, self.window_radius, width);
                let excl = clipped(row, self.exclusion_radius, height) * clipped(col, self.exclusion_radius, width);
                if window - excl < best.0 {
                    best = (window - excl, row * width + col);
                }
            }
        }
        best
    }

    /// Check that every pixel of the grid has at least `k` candidates.
    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.k == 0 {
            return Ok(());
        }
        let (eligible, pixel) = self.min_eligible(height, width);
        if eligible < self.k {
            return Err(Error::WindowTooSmall { pixel, eligible, k: self.k });
        }
        Ok(())
    }
}

/// Per-pixel neighbor lists, `k` row-major pixel indices each, ordered by
/// ascending feature distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonLocalGraph {
    height: usize,
    width: usize,
    k: usize,
    neighbors: Vec<u32>,
}

impl NonLocalGraph {
    /// Graph with no edges.
    pub fn empty(height: usize, width: usize) -> Self {
        NonLocalGraph { height, width, k: 0, neighbors: Vec::new() }
    }

    /// Build from explicit lists; every list must have the same length.
    pub fn from_lists(height: usize, width: usize, lists: &[Vec<usize>]) -> Result<Self> {
        if lists.len() != height * width {
            return Err(Error::shape("graph", format!("{} lists for {height}x{width}", lists.len())));
        }
        let k = lists.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(lists.len() * k);
        for l in lists {
            if l.len() != k || l.iter().any(|&j| j >= height * width) {
                return Err(Error::shape("graph", "ragged or out-of-range neighbor list"));
            }
            neighbors.extend(l.iter().map(|&j| j as u32));
        }
        Ok(NonLocalGraph { height, width, k, neighbors })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn neighbors(&self, pixel: usize) -> &[u32] {
        &self.neighbors[pixel * self.k..(pixel + 1) * self.k]
    }

    /// Debug dump, one `"i: j1 j2 ... jk"` line per pixel.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let _ = write!(s, "{i}:");
            for j in self.neighbors(i) {
                let _ = write!(s, " {j}");
            }
            s.push('\n');
        }
        s
    }
}

/// Feature layout `[C, H, W]` viewed as one vector per pixel.
struct PixelMajor<T> {
    data: Vec<T>,
    channels: usize,
}

impl<T: Scalar> PixelMajor<T> {
    fn new(planar: &[T], channels: usize, pixels: usize) -> Self {
        let mut data = vec![T::zero(); planar.len()];
        for c in 0..channels {
            for p in 0..pixels {
                data[p * channels + c] = planar[c * pixels + p];
            }
        }
        PixelMajor { data, channels }
    }

    #[inline]
    fn dist2(&self, i: usize, j: usize) -> T {
        let a = &self.data[i * self.channels..(i + 1) * self.channels];
        let b = &self.data[j * self.channels..(j + 1) * self.channels];
        let mut acc = T::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += (x - y) * (x - y);
        }
        acc
    }
}

fn feature_dims<T: Scalar>(features: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *features.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("build_knn_graph", format!("expected [C, H, W], got {s:?}"))),
    }
}

#[inline]
fn before<T: PartialOrd>(a: (T, u32), b: (T, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// k-NN graph over a `[C, H, W]` feature map (or a batch of one).
pub fn build_knn_graph<T: Scalar>(features: &Tensor<T>, cfg: &NlgConfig) -> Result<NonLocalGraph> {
    let (c, h, w) = feature_dims(features)?;
    knn_from_planar(features.data(), c, h, w, cfg)
}

/// Same as [`build_knn_graph`] on a raw planar `[C, H, W]` buffer.
pub(crate) fn knn_from_planar<T: Scalar>(
    planar: &[T],
    channels: usize,
    height: usize,
    width: usize,
    cfg: &NlgConfig,
) -> Result<NonLocalGraph> {
    cfg.check_grid(height, width)?;
    let k = cfg.k;
    if k == 0 {
        return Ok(NonLocalGraph::empty(height, width));
    }
    let pm = PixelMajor::new(planar, channels, height * width);
    let r = cfg.window_radius;
    let mut neighbors = vec![0u32; height * width * k];
    neighbors.par_chunks_mut(k).enumerate().for_each(|(i, out)| {
        let (row, col) = (i / width, i % width);
        let mut best: Vec<(T, u32)> = Vec::with_capacity(k + 1);
        for rj in row.saturating_sub(r)..(row + r + 1).min(height) {
            let near_row = rj.abs_diff(row) <= cfg.exclusion_radius;
            for cj in col.saturating_sub(r)..(col + r + 1).min(width) {
                if near_row && cj.abs_diff(col) <= cfg.exclusion_radius {
                    continue;
                }
                let j = rj * width + cj;
                let cand = (pm.dist2(i, j), j as u32);
                if best.len() == k && !before(cand, best[k - 1]) {
                    continue;
                }
                let pos = best.iter().position(|&b| before(cand, b)).unwrap_or(best.len());
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        for (o, (_, j)) in out.iter_mut().zip(best) {
            *o = j;
        }
    });
    Ok(NonLocalGraph { height, width, k, neighbors })
}

/// Exhaustive reference: every pixel pair, filtered by eligibility, fully
/// sorted by `(distance, index)`.
pub fn brute_force_knn<T: Scalar>(features: &Tensor<T>, cfg: &NlgConfig) -> Result<NonLocalGraph> {
    let (c, h, w) = feature_dims(features)?;
    cfg.check_grid(h, w)?;
    let n = h * w;
    let d = features.data();
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut all: Vec<(T, usize)> = (0..n)
            .filter(|&j| cfg.eligible(i, j, w))
            .map(|j| {
                let mut acc = T::zero();
                for ch in 0..c {
                    let diff = d[ch * n + i] - d[ch * n + j];
                    acc += diff * diff;
                }
                (acc, j)
            })
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        lists.push(all.into_iter().take(cfg.k).map(|(_, j)| j).collect::<Vec<_>>());
    }
    if cfg.k == 0 {
        return Ok(NonLocalGraph::empty(h, w));
    }
    NonLocalGraph::from_lists(h, w, &lists)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, window_radius: usize, exclusion_radius: usize) -> NlgConfig {
        NlgConfig { k, window_radius, exclusion_radius }
    }

    #[test]
    fn constant_map_breaks_ties_by_raster_index() {
        let f = Tensor::<f64>::full(vec![2, 5, 5], 0.5);
        let g = build_knn_graph(&f, &cfg(2, 4, 1)).unwrap();
        // pixel 0 excludes 0, 1, 5, 6
        assert_eq!(g.neighbors(0), &[2, 3]);
        // pixel 12 (center) excludes rows 1..=3 cols 1..=3
        assert_eq!(g.neighbors(12), &[0, 1]);
    }

    #[test]
    fn k_zero_is_empty() {
        let f = Tensor::<f64>::full(vec![1, 4, 4], 0.0);
        let g = build_knn_graph(&f, &cfg(0, 3, 1)).unwrap();
        assert!(g.is_empty());
        assert!(g.neighbors(5).is_empty());
    }

    #[test]
    fn forced_single_candidate() {
        // 1×4 strip with window radius 2: each pixel has exactly one candidate.
        let f = Tensor::<f64>::from_fn(vec![1, 1, 4], |i| i as f64);
        let g = build_knn_graph(&f, &cfg(1, 2, 1)).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.neighbors(1), &[3]);
        assert_eq!(g.neighbors(2), &[0]);
    }

    #[test]
    fn small_window_is_reported() {
        let f = Tensor::<f64>::full(vec![1, 3, 3], 0.0);
        let err = build_knn_graph(&f, &cfg(8, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::WindowTooSmall { eligible: 3, k: 8, pixel: 0 }));
        assert!(matches!(cfg(1, 1, 1).validate(), Err(Error::Config(_))));
    }

    #[test]
    fn four_by_four_matches_exhaustive_search() {
        let vals = [3.0, 9.0, 1.5, 7.0, 2.0, 11.0, 4.0, 0.5, 8.0, 6.0, 13.0, 2.5, 10.0, 5.0, 12.0, 1.0];
        let f = Tensor::<f64>::new(vec![1, 4, 4], vals.to_vec()).unwrap();
        let c = cfg(1, 3, 1);
        let g = build_knn_graph(&f, &c).unwrap();
        assert_eq!(g, brute_force_knn(&f, &c).unwrap());
        // pixel 0 (value 3.0): nearest eligible is 2.5 at index 11
        assert_eq!(g.neighbors(0), &[11]);
    }

    #[test]
    fn text_dump() {
        let g = NonLocalGraph::from_lists(1, 3, &[vec![2], vec![0], vec![0]]).unwrap();
        assert_eq!(g.to_text(), "0: 2\n1: 0\n2: 0\n");
    }
}
