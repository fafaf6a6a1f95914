//! Region visibility masks over the patch-token grid.
//!
//! A mask row marks which patch tokens a region may attend to. Rows are
//! conceptually vectors over {0, −∞}; we store booleans and render the
//! additive form on demand, with −∞ realized as the most negative finite
//! value of the arithmetic type (the attention kernel still re-zeroes masked
//! positions after softmax so their weight is exactly 0).

use crate::error::{Error, Result};
use crate::real::Real;
use crate::region::Region;
use ndarray::Array2;

/// Per-region patch visibility: `L` rows by `N_p` patch columns, every row
/// containing at least one visible entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    visible: Array2<bool>,
}

impl VisibilityMask {
    /// Wraps a raw boolean matrix, enforcing the non-empty-row invariant.
    pub fn new(visible: Array2<bool>) -> Result<Self> {
        if visible.nrows() == 0 {
            return Err(Error::validation("no regions to attend"));
        }
        for (l, row) in visible.outer_iter().enumerate() {
            if !row.iter().any(|&v| v) {
                return Err(Error::validation(format!(
                    "mask row {l} has no visible patch"
                )));
            }
        }
        Ok(VisibilityMask { visible })
    }

    /// Number of regions (rows).
    pub fn num_regions(&self) -> usize {
        self.visible.nrows()
    }

    /// Number of patch tokens (columns).
    pub fn num_patches(&self) -> usize {
        self.visible.ncols()
    }

    pub fn is_visible(&self, region: usize, patch: usize) -> bool {
        self.visible[[region, patch]]
    }

    /// Row-major indices of the visible patches for one region.
    pub fn visible_indices(&self, region: usize) -> Vec<usize> {
        self.visible
            .row(region)
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| v.then_some(j))
            .collect()
    }

    pub fn as_bool(&self) -> &Array2<bool> {
        &self.visible
    }

    /// Renders the additive attention bias: 0 where visible, the most
    /// negative finite value of `F` where masked.
    pub fn additive<F: Real>(&self) -> Array2<F> {
        self.visible
            .map(|&v| if v { F::zero() } else { F::min_value() })
    }
}

/// Computes patch visibility for each region: a patch is visible iff its
/// center pixel `((c+0.5)p, (r+0.5)p)` lies inside the region's bbox; a bbox
/// that captures no center instead gets the single patch with maximal overlap
/// area (ties broken toward the smallest row-major index).
pub fn build_visibility_mask(
    regions: &[Region],
    grid: (usize, usize),
    p: usize,
) -> Result<VisibilityMask> {
    if regions.is_empty() {
        return Err(Error::validation("no regions to attend"));
    }
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || p == 0 {
        return Err(Error::config("patch grid and patch size must be non-zero"));
    }
    let n_patches = rows * cols;
    let mut visible = Array2::from_elem((regions.len(), n_patches), false);
    for (l, region) in regions.iter().enumerate() {
        let mut any = false;
        for r in 0..rows {
            for c in 0..cols {
                let cx = (c as f64 + 0.5) * p as f64;
                let cy = (r as f64 + 0.5) * p as f64;
                if region.bbox.contains_point(cx, cy) {
                    visible[[l, r * cols + c]] = true;
                    any = true;
                }
            }
        }
        if !any {
            let idx = max_overlap_patch(region, rows, cols, p)?;
            visible[[l, idx]] = true;
        }
    }
    VisibilityMask::new(visible)
}

/// Row-major index of the patch whose pixel rectangle overlaps the region's
/// bbox the most; smallest index wins ties.
fn max_overlap_patch(region: &Region, rows: usize, cols: usize, p: usize) -> Result<usize> {
    let mut best: Option<(u64, usize)> = None;
    for r in 0..rows {
        for c in 0..cols {
            let patch = crate::region::BBox::new(
                (c * p) as u32,
                (r * p) as u32,
                ((c + 1) * p) as u32,
                ((r + 1) * p) as u32,
            );
            let area = region.bbox.intersection_area(&patch);
            let idx = r * cols + c;
            let better = match best {
                None => area > 0,
                Some((best_area, _)) => area > best_area,
            };
            if better {
                best = Some((area, idx));
            }
        }
    }
    best.map(|(_, idx)| idx).ok_or_else(|| {
        Error::validation("region bbox overlaps no patch on the grid")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{BBox, Region};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn obj(x0: u32, y0: u32, x1: u32, y1: u32) -> Region {
        Region::object(BBox::new(x0, y0, x1, y1), 0)
    }

    /// Independent oracle: brute-force overlap areas for every patch, argmax
    /// with smallest-index tie-break.
    fn overlap_oracle(region: &Region, rows: usize, cols: usize, p: usize) -> usize {
        let mut areas = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let px0 = (c * p) as i64;
                let py0 = (r * p) as i64;
                let w = (region.bbox.x1 as i64).min(px0 + p as i64) - (region.bbox.x0 as i64).max(px0);
                let h = (region.bbox.y1 as i64).min(py0 + p as i64) - (region.bbox.y0 as i64).max(py0);
                areas.push((w.max(0) * h.max(0)) as u64);
            }
        }
        areas
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap()
    }

    #[test]
    fn whole_image_region_sees_every_patch() {
        let mask = build_visibility_mask(&[obj(0, 0, 32, 32)], (2, 2), 16).unwrap();
        assert_eq!(mask.visible_indices(0), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_patch_region_sees_one_patch() {
        let mask = build_visibility_mask(&[obj(0, 0, 16, 16)], (2, 2), 16).unwrap();
        assert_eq!(mask.visible_indices(0), vec![0]);
        let additive = mask.additive::<f64>();
        assert_eq!(additive[[0, 0]], 0.0);
        for j in 1..4 {
            assert_eq!(additive[[0, j]], f64::MIN);
        }
    }

    #[test]
    fn sub_patch_region_falls_back_to_overlap_argmax() {
        // bbox [2,2,7,6] inside patch (0,0) of a 2x2/p=16 grid never contains
        // the center (8,8): 8 >= 7 in x.
        let region = obj(2, 2, 7, 6);
        let mask = build_visibility_mask(std::slice::from_ref(&region), (2, 2), 16).unwrap();
        assert_eq!(mask.visible_indices(0), vec![overlap_oracle(&region, 2, 2, 16)]);
        assert_eq!(mask.visible_indices(0), vec![0]);
    }

    #[test]
    fn fallback_straddling_boundary_matches_oracle() {
        // bbox straddles patches (0,1) and (1,1) unevenly; no center inside.
        let region = obj(20, 12, 28, 19);
        let mask = build_visibility_mask(std::slice::from_ref(&region), (2, 2), 16).unwrap();
        let oracle = overlap_oracle(&region, 2, 2, 16);
        assert_eq!(mask.visible_indices(0), vec![oracle]);
        // rows [12,16) vs [16,19): 4px vs 3px of height -> patch (0,1) = 1.
        assert_eq!(oracle, 1);
    }

    #[test]
    fn fallback_tie_breaks_to_smallest_index() {
        // Centered on the 4-corner junction: equal 2x2 overlap with all four
        // patches, no center contained.
        let region = obj(14, 14, 18, 18);
        let mask = build_visibility_mask(std::slice::from_ref(&region), (2, 2), 16).unwrap();
        assert_eq!(mask.visible_indices(0), vec![0]);
    }

    #[test]
    fn random_sub_patch_regions_match_overlap_oracle() {
        let mut rng = rng_from_seed(7);
        for _ in 0..200 {
            let x0 = rng.random_range(0..29u32);
            let y0 = rng.random_range(0..29u32);
            let x1 = x0 + rng.random_range(1..4u32);
            let y1 = y0 + rng.random_range(1..4u32);
            let region = obj(x0, y0, x1.min(32), y1.min(32));
            let mask =
                build_visibility_mask(std::slice::from_ref(&region), (2, 2), 16).unwrap();
            let visible = mask.visible_indices(0);
            assert!(!visible.is_empty());
            // When no center is captured, the fallback must agree with the
            // brute-force oracle.
            let centers_hit = (0..2).flat_map(|r| (0..2).map(move |c| (r, c))).any(|(r, c)| {
                region
                    .bbox
                    .contains_point((c as f64 + 0.5) * 16.0, (r as f64 + 0.5) * 16.0)
            });
            if !centers_hit {
                assert_eq!(visible, vec![overlap_oracle(&region, 2, 2, 16)]);
            }
        }
    }

    #[test]
    fn every_row_has_a_visible_patch() {
        let regions: Vec<Region> = (0..6)
            .map(|i| obj(i, i, i + 2, i + 2))
            .collect();
        let mask = build_visibility_mask(&regions, (4, 4), 8).unwrap();
        for l in 0..mask.num_regions() {
            assert!(!mask.visible_indices(l).is_empty());
        }
    }

    #[test]
    fn empty_region_list_is_an_error() {
        assert!(build_visibility_mask(&[], (2, 2), 16).is_err());
    }

    #[test]
    fn mask_constructor_rejects_empty_rows() {
        let visible = Array2::from_elem((2, 4), false);
        assert!(VisibilityMask::new(visible).is_err());
    }
}
