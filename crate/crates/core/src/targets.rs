//! Supervision targets: center-region positives on the fused grid, per-level
//! part positives, offset vectors with validity and scale weights, and
//! quarter-resolution mask crops for every part-positive cell.
//!
//! Grid coordinate convention: an image position `u` (pixel `k` sits at
//! coordinate `k`) maps to the continuous grid coordinate
//! `g = (u + 0.5) * S / W - 0.5`, which places the center of grid cell `k` at
//! coordinate `k`. The cell containing a position is therefore `round(g)`
//! (half-up), which is exactly the rounding the decoder applies to offset
//! targets — targets and decoding agree bit for bit on cell assignment.

use crate::config::GridSpec;
use crate::synth::{mask_bbox, ParsingScene};
use ndarray::{Array2, Array3};
use std::collections::HashMap;

/// Continuous grid coordinate of image position `u` on a `grid`-cell axis of
/// `extent` pixels, in the cell-center frame.
pub fn to_grid(u: f64, grid: usize, extent: usize) -> f64 {
    (u + 0.5) * grid as f64 / extent as f64 - 0.5
}

/// Index of the cell containing continuous grid coordinate `g` (half-up),
/// clamped to the grid.
pub fn containing_cell(g: f64, grid: usize) -> usize {
    let k = (g + 0.5).floor();
    (k.max(0.0) as usize).min(grid - 1)
}

/// The ground-truth mask of one part, cropped to quarter resolution, owned by
/// one part-positive grid cell.
#[derive(Debug, Clone)]
pub struct MaskTarget {
    pub level: usize,
    /// (row, col) on the level grid.
    pub cell: (usize, usize),
    pub category: usize,
    /// (H/4, W/4) binary raster.
    pub mask: Array2<f64>,
}

/// Everything the losses need for one scene.
#[derive(Debug, Clone)]
pub struct TargetSet {
    /// (S, S) center positives on the fused grid.
    pub center_pos: Array2<f64>,
    /// (S, S) index of the human owning each center-positive cell, -1 outside.
    pub center_owner: Array2<i64>,
    /// Per level: (C_P, S_l, S_l) part positives, channel = category.
    pub part_pos: Vec<Array3<f64>>,
    /// (2*C_P, S, S); channels (2p, 2p+1) hold the (x, y) offset of part p.
    pub offset: Array3<f64>,
    /// (C_P, S, S) validity of the offset entries.
    pub offset_valid: Array3<f64>,
    /// (C_P, S, S) scale weight of valid entries: 1/sqrt(h*w) of the owning
    /// human's union bounding box in grid units.
    pub offset_weight: Array3<f64>,
    pub mask_targets: Vec<MaskTarget>,
}

impl TargetSet {
    /// Center-positive cells of each human, from the ownership map.
    pub fn center_cells_per_human(&self, num_humans: usize) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); num_humans];
        for ((r, c), &owner) in self.center_owner.indexed_iter() {
            if owner >= 0 {
                out[owner as usize].push((r, c));
            }
        }
        out
    }
}

/// Cells whose center lies in the `eps*h x eps*w` rectangle around `c`,
/// intersected with the grid; falls back to the single cell containing `c`
/// when the rectangle covers no cell center. Coordinates are in the
/// cell-center frame (the center of cell `k` is at coordinate `k`).
pub fn center_region(
    c: (f64, f64),
    extent_hw: (f64, f64),
    eps: f64,
    grid: usize,
) -> Vec<(usize, usize)> {
    let (cx, cy) = c;
    let (h, w) = extent_hw;
    let hx = eps * w / 2.0;
    let hy = eps * h / 2.0;
    let mut cells = Vec::new();
    let r0 = (cy - hy).ceil().max(0.0) as i64;
    let r1 = (cy + hy).floor().min(grid as f64 - 1.0) as i64;
    let c0 = (cx - hx).ceil().max(0.0) as i64;
    let c1 = (cx + hx).floor().min(grid as f64 - 1.0) as i64;
    for r in r0..=r1 {
        for col in c0..=c1 {
            // r0..r1 / c0..c1 already bound |cell - c| <= half extent.
            cells.push((r as usize, col as usize));
        }
    }
    if cells.is_empty() {
        cells.push((containing_cell(cy, grid), containing_cell(cx, grid)));
    }
    cells
}

/// Nearest-neighbor downsample of a binary mask to quarter resolution,
/// sampling block centers. Guaranteed nonempty: if no block center hits the
/// mask, the block containing the barycenter is set.
fn quarter_mask(mask: &Array2<u8>, barycenter: (f64, f64)) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (qh, qw) = (h / 4, w / 4);
    let mut out = Array2::<f64>::zeros((qh, qw));
    let mut any = false;
    for qr in 0..qh {
        for qc in 0..qw {
            if mask[(qr * 4 + 2, qc * 4 + 2)] != 0 {
                out[(qr, qc)] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let qr = ((barycenter.1 / 4.0).round().max(0.0) as usize).min(qh - 1);
        let qc = ((barycenter.0 / 4.0).round().max(0.0) as usize).min(qw - 1);
        out[(qr, qc)] = 1.0;
    }
    out
}

/// Convert a scene into supervision targets.
///
/// When center regions of two humans overlap, the human with the smaller
/// union-mask area owns the cell and its offsets; the same rule arbitrates
/// part-positive cells of one category. A scene with zero humans yields
/// all-negative targets.
pub fn assign_targets(scene: &ParsingScene, grid: &GridSpec, eps: f64) -> TargetSet {
    let (h_img, w_img) = (scene.height(), scene.width());
    assert!(
        h_img % 4 == 0 && w_img % 4 == 0,
        "scene dimensions must be divisible by 4"
    );
    let s = grid.human_grid;
    let c_p = scene
        .humans
        .iter()
        .flat_map(|h| h.parts.iter().map(|p| p.category + 1))
        .max()
        .unwrap_or(1);
    let c_p = c_p.max(1);

    let mut center_pos = Array2::<f64>::zeros((s, s));
    let mut center_owner = Array2::<i64>::from_elem((s, s), -1);
    let mut owner_area = Array2::<f64>::from_elem((s, s), f64::INFINITY);

    // Human center positives on the fused grid; smaller instances win ties.
    for (hi, human) in scene.humans.iter().enumerate() {
        let Some((r0, c0, r1, c1)) = mask_bbox(&human.union_mask) else {
            continue;
        };
        let area = crate::synth::mask_area(&human.union_mask) as f64;
        let cx = to_grid(human.barycenter.0, s, w_img);
        let cy = to_grid(human.barycenter.1, s, h_img);
        let h_g = (r1 - r0 + 1) as f64 * s as f64 / h_img as f64;
        let w_g = (c1 - c0 + 1) as f64 * s as f64 / w_img as f64;
        for (r, c) in center_region((cx, cy), (h_g, w_g), eps, s) {
            center_pos[(r, c)] = 1.0;
            if area < owner_area[(r, c)] {
                owner_area[(r, c)] = area;
                center_owner[(r, c)] = hi as i64;
            }
        }
    }

    // Offsets from every owned center cell to the owner's part barycenters.
    let mut offset = Array3::<f64>::zeros((2 * c_p, s, s));
    let mut offset_valid = Array3::<f64>::zeros((c_p, s, s));
    let mut offset_weight = Array3::<f64>::zeros((c_p, s, s));
    for ((r, c), &owner) in center_owner.indexed_iter() {
        if owner < 0 {
            continue;
        }
        let human = &scene.humans[owner as usize];
        let (r0, c0, r1, c1) = mask_bbox(&human.union_mask).expect("owner has pixels");
        let h_g = (r1 - r0 + 1) as f64 * s as f64 / h_img as f64;
        let w_g = (c1 - c0 + 1) as f64 * s as f64 / w_img as f64;
        let weight = 1.0 / (h_g * w_g).sqrt();
        for part in &human.parts {
            let p = part.category;
            let c_px = to_grid(part.barycenter.0, s, w_img);
            let c_py = to_grid(part.barycenter.1, s, h_img);
            offset[(2 * p, r, c)] = c_px - c as f64;
            offset[(2 * p + 1, r, c)] = c_py - r as f64;
            offset_valid[(p, r, c)] = 1.0;
            offset_weight[(p, r, c)] = weight;
        }
    }

    // Part positives per routed level, with per-cell mask-target ownership.
    let mut part_pos: Vec<Array3<f64>> = grid
        .levels
        .iter()
        .map(|lv| Array3::zeros((c_p, lv.grid, lv.grid)))
        .collect();
    // (level, row, col, category) -> (area, human index, part index)
    let mut mask_owner: HashMap<(usize, usize, usize, usize), (f64, usize, usize)> =
        HashMap::new();
    for (hi, human) in scene.humans.iter().enumerate() {
        for (pi, part) in human.parts.iter().enumerate() {
            let area = crate::synth::mask_area(&part.mask) as f64;
            let scale = area.sqrt();
            let Some((r0, c0, r1, c1)) = mask_bbox(&part.mask) else {
                continue;
            };
            for level in grid.level_for_scale(scale) {
                let g = grid.grid(level);
                let cx = to_grid(part.barycenter.0, g, w_img);
                let cy = to_grid(part.barycenter.1, g, h_img);
                let h_g = (r1 - r0 + 1) as f64 * g as f64 / h_img as f64;
                let w_g = (c1 - c0 + 1) as f64 * g as f64 / w_img as f64;
                for (r, c) in center_region((cx, cy), (h_g, w_g), eps, g) {
                    part_pos[level][(part.category, r, c)] = 1.0;
                    let key = (level, r, c, part.category);
                    let claim = (area, hi, pi);
                    match mask_owner.get(&key) {
                        Some(&(prev_area, _, _)) if prev_area <= area => {}
                        _ => {
                            mask_owner.insert(key, claim);
                        }
                    }
                }
            }
        }
    }

    let mut mask_targets: Vec<MaskTarget> = mask_owner
        .into_iter()
        .map(|((level, r, c, category), (_, hi, pi))| {
            let part = &scene.humans[hi].parts[pi];
            MaskTarget {
                level,
                cell: (r, c),
                category,
                mask: quarter_mask(&part.mask, part.barycenter),
            }
        })
        .collect();
    // Deterministic order regardless of hash-map iteration.
    mask_targets.sort_by_key(|m| (m.level, m.cell.0, m.cell.1, m.category));

    TargetSet {
        center_pos,
        center_owner,
        part_pos,
        offset,
        offset_valid,
        offset_weight,
        mask_targets,
    }
}
