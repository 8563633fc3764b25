//! Square occlusion masks and masked model inputs.
//!
//! Convention: the mask grid `M` holds 1 on *missing* cells and 0 on known
//! cells. The complementary known-indicator `B = 1 - M` is what the model
//! sees as "where data exists"; all formulas in this crate are written in
//! terms of `M` so that `X_mask = X * (1 - M)` zeroes exactly the missing
//! region.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Placement scheme for the square masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskLayout {
    /// One square centered in the field.
    Single,
    /// `grid_rows x grid_cols` squares centered on a uniform lattice.
    Grid,
}

/// Configuration for one mask family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub layout: MaskLayout,
    /// Side length of each square, in cells.
    pub mask_side: usize,
    #[serde(default = "one")]
    pub grid_rows: usize,
    #[serde(default = "one")]
    pub grid_cols: usize,
}

fn one() -> usize {
    1
}

impl MaskConfig {
    pub fn single(mask_side: usize) -> Self {
        MaskConfig {
            layout: MaskLayout::Single,
            mask_side,
            grid_rows: 1,
            grid_cols: 1,
        }
    }

    pub fn grid(rows: usize, cols: usize, mask_side: usize) -> Self {
        MaskConfig {
            layout: MaskLayout::Grid,
            mask_side,
            grid_rows: rows,
            grid_cols: cols,
        }
    }

    /// Number of squares this config places.
    pub fn count(&self) -> usize {
        match self.layout {
            MaskLayout::Single => 1,
            MaskLayout::Grid => self.grid_rows * self.grid_cols,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_side == 0 {
            return Err(Error::Config("mask_side must be positive".into()));
        }
        if self.layout == MaskLayout::Grid && (self.grid_rows == 0 || self.grid_cols == 0) {
            return Err(Error::Config(
                "grid layout requires positive grid_rows and grid_cols".into(),
            ));
        }
        Ok(())
    }
}

/// A concrete 0/1 missing-region indicator grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    /// Row-major; 1 = missing, 0 = known.
    pub m: Vec<u8>,
}

impl MaskGrid {
    pub fn masked_cells(&self) -> usize {
        self.m.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.m.iter().all(|&v| v == 0)
    }

    /// Mask as f64 multipliers (1.0 missing / 0.0 known).
    pub fn as_f64(&self) -> Vec<f64> {
        self.m.iter().map(|&v| v as f64).collect()
    }
}

/// A ground-truth field together with its occluded version and the mask.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub x: Vec<f64>,
    pub x_mask: Vec<f64>,
    pub mask: MaskGrid,
}

/// Place the configured squares on an `h x w` grid.
///
/// Placement is deterministic: a single mask is centered; grid masks are
/// centered at `((i + 1/2) * h / rows, (j + 1/2) * w / cols)`. Squares must
/// fit in bounds and must not overlap.
pub fn build_mask(config: &MaskConfig, h: usize, w: usize) -> Result<MaskGrid> {
    config.validate()?;
    let side = config.mask_side;
    let mut squares: Vec<(usize, usize)> = Vec::new(); // top-left corners
    match config.layout {
        MaskLayout::Single => {
            if side > h || side > w {
                return Err(Error::Config(format!(
                    "mask side {side} exceeds field size {h}x{w}"
                )));
            }
            squares.push(((h - side) / 2, (w - side) / 2));
        }
        MaskLayout::Grid => {
            for i in 0..config.grid_rows {
                for j in 0..config.grid_cols {
                    // Center in half-cell units, then shift by side/2.
                    let ci = ((2 * i + 1) * h) as isize / (2 * config.grid_rows) as isize;
                    let cj = ((2 * j + 1) * w) as isize / (2 * config.grid_cols) as isize;
                    let top = ci - (side / 2) as isize;
                    let left = cj - (side / 2) as isize;
                    if top < 0
                        || left < 0
                        || top + side as isize > h as isize
                        || left + side as isize > w as isize
                    {
                        return Err(Error::Config(format!(
                            "mask square at grid cell ({i},{j}) exceeds field bounds"
                        )));
                    }
                    squares.push((top as usize, left as usize));
                }
            }
        }
    }

    let mut m = vec![0u8; h * w];
    for &(top, left) in &squares {
        for i in top..top + side {
            for j in left..left + side {
                if m[i * w + j] != 0 {
                    return Err(Error::Config(format!(
                        "mask squares overlap at cell ({i},{j})"
                    )));
                }
                m[i * w + j] = 1;
            }
        }
    }
    Ok(MaskGrid { h, w, m })
}

/// Zero the missing region of `x`.
pub fn apply_mask(x: &[f64], mask: &MaskGrid) -> Result<MaskedSample> {
    if x.len() != mask.h * mask.w {
        return Err(Error::Config(format!(
            "field has {} values but mask is {}x{}",
            x.len(),
            mask.h,
            mask.w
        )));
    }
    let x_mask: Vec<f64> = x
        .iter()
        .zip(&mask.m)
        .map(|(&v, &m)| if m == 1 { 0.0 } else { v })
        .collect();
    Ok(MaskedSample {
        x: x.to_vec(),
        x_mask,
        mask: mask.clone(),
    })
}

/// Stack the 3-channel completion input: channel 0 = `X_mask`, channel 1 =
/// known indicator `1 - M`, channel 2 = missing indicator `M`.
pub fn stack_input(s: &MaskedSample) -> Vec<f64> {
    let px = s.mask.h * s.mask.w;
    let mut out = Vec::with_capacity(3 * px);
    out.extend_from_slice(&s.x_mask);
    out.extend(s.mask.m.iter().map(|&m| 1.0 - m as f64));
    out.extend(s.mask.m.iter().map(|&m| m as f64));
    out
}

/// The three named mask configurations, scaled to a grid of side `n`
/// (25% of the area each): one n/2 square, four n/4 squares (2x2), sixteen
/// n/8 squares (4x4).
pub fn standard_configs(n: usize) -> Vec<(String, MaskConfig)> {
    vec![
        ("single1".to_string(), MaskConfig::single(n / 2)),
        ("grid4".to_string(), MaskConfig::grid(2, 2, n / 4)),
        ("grid16".to_string(), MaskConfig::grid(4, 4, n / 8)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Count 4-connected components of the mask (test-only flood fill).
    fn components(mask: &MaskGrid) -> usize {
        let (h, w) = (mask.h, mask.w);
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if mask.m[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (i, j) = (p / w, p % w);
                let mut push = |q: usize| {
                    if mask.m[q] == 1 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if i > 0 {
                    push(p - w);
                }
                if i + 1 < h {
                    push(p + w);
                }
                if j > 0 {
                    push(p - 1);
                }
                if j + 1 < w {
                    push(p + 1);
                }
            }
        }
        count
    }

    #[test]
    fn single_mask_covers_quarter_area_centered() {
        let m = build_mask(&MaskConfig::single(128), 256, 256).unwrap();
        assert_eq!(m.masked_cells(), 128 * 128);
        assert_eq!(m.masked_cells() as f64 / (256.0 * 256.0), 0.25);
        // Centered: corners known, center missing.
        assert_eq!(m.m[0], 0);
        assert_eq!(m.m[128 * 256 + 128], 1);
        assert_eq!(m.m[64 * 256 + 64], 1); // top-left corner of the square
        assert_eq!(m.m[63 * 256 + 63], 0);
    }

    #[test]
    fn sixteen_masks_have_sixteen_components() {
        let m = build_mask(&MaskConfig::grid(4, 4, 32), 256, 256).unwrap();
        assert_eq!(m.masked_cells(), 16 * 32 * 32);
        assert_eq!(components(&m), 16);
    }

    #[test]
    fn paper_configs_mask_identical_areas() {
        let sums: Vec<usize> = [
            MaskConfig::single(128),
            MaskConfig::grid(2, 2, 64),
            MaskConfig::grid(4, 4, 32),
        ]
        .iter()
        .map(|c| build_mask(c, 256, 256).unwrap().masked_cells())
        .collect();
        assert_eq!(sums, vec![16384, 16384, 16384]);
    }

    #[test]
    fn desk_configs_mask_quarter_area_on_64() {
        for (name, cfg) in standard_configs(64) {
            let m = build_mask(&cfg, 64, 64).unwrap();
            assert_eq!(m.masked_cells(), 1024, "config {name}");
            assert_eq!(components(&m), cfg.count(), "config {name}");
        }
    }

    #[test]
    fn oversized_or_overlapping_masks_are_rejected() {
        assert!(build_mask(&MaskConfig::single(70), 64, 64).is_err());
        // 2x2 squares of side 40 on 64^2: centers at 16 and 48, so squares
        // would overflow the boundary and overlap each other.
        assert!(build_mask(&MaskConfig::grid(2, 2, 40), 64, 64).is_err());
    }

    #[test]
    fn apply_mask_identities() {
        let x: Vec<f64> = (0..16).map(|v| v as f64 + 1.0).collect();
        let empty = MaskGrid {
            h: 4,
            w: 4,
            m: vec![0; 16],
        };
        assert_eq!(apply_mask(&x, &empty).unwrap().x_mask, x);

        let full = MaskGrid {
            h: 4,
            w: 4,
            m: vec![1; 16],
        };
        assert!(apply_mask(&x, &full).unwrap().x_mask.iter().all(|&v| v == 0.0));

        let mut one_cell = vec![0u8; 16];
        one_cell[2 * 4 + 3] = 1;
        let m = MaskGrid {
            h: 4,
            w: 4,
            m: one_cell,
        };
        let s = apply_mask(&x, &m).unwrap();
        for idx in 0..16 {
            if idx == 2 * 4 + 3 {
                assert_eq!(s.x_mask[idx], 0.0);
            } else {
                assert_eq!(s.x_mask[idx], x[idx]);
            }
        }
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let m = MaskGrid {
            h: 4,
            w: 4,
            m: vec![0; 16],
        };
        assert!(apply_mask(&[0.0; 15], &m).is_err());
    }

    #[test]
    fn stacked_channels_partition_and_zero_consistently() {
        let x: Vec<f64> = (0..64).map(|v| (v % 7) as f64 - 3.0).collect();
        let mask = build_mask(&MaskConfig::grid(2, 2, 2), 8, 8).unwrap();
        let s = apply_mask(&x, &mask).unwrap();
        let t = stack_input(&s);
        let px = 64;
        for i in 0..px {
            // channels 1 and 2 sum to one
            assert_eq!(t[px + i] + t[2 * px + i], 1.0);
            // channel 0 zero wherever channel 2 (missing) is one
            if t[2 * px + i] == 1.0 {
                assert_eq!(t[i], 0.0);
            } else {
                assert_eq!(t[i], x[i]);
            }
        }
    }

    #[test]
    fn empty_mask_stacks_trivially() {
        let x = vec![1.5; 16];
        let empty = MaskGrid {
            h: 4,
            w: 4,
            m: vec![0; 16],
        };
        let t = stack_input(&apply_mask(&x, &empty).unwrap());
        assert!(t[16..32].iter().all(|&v| v == 1.0));
        assert!(t[32..48].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_commutes_with_coarse_masks() {
        // A mask defined on the coarse grid applied after downsampling
        // equals downsampling the finely-masked field when the fine mask is
        // the coarse mask's strided expansion restricted to kept nodes.
        let fine = crate::solver::FlowField::from_fn(64, |x1, x2| x1.sin() + (2.0 * x2).cos());
        let coarse = crate::dataset::downsample(&fine, 4).unwrap();
        let mask = build_mask(&MaskConfig::single(8), 16, 16).unwrap();
        let masked_after = apply_mask(&coarse.values, &mask).unwrap().x_mask;
        // Expand mask to the fine grid on kept nodes only, mask, then stride.
        let mut fine_masked = fine.values.clone();
        for i in 0..16 {
            for j in 0..16 {
                if mask.m[i * 16 + j] == 1 {
                    fine_masked[(i * 4) * 64 + j * 4] = 0.0;
                }
            }
        }
        let strided = crate::dataset::downsample(
            &crate::solver::FlowField {
                n: 64,
                values: fine_masked,
                time: 0.0,
            },
            4,
        )
        .unwrap();
        assert_eq!(strided.values, masked_after);
    }
}
