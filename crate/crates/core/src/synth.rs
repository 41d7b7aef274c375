//! Deterministic synthetic "blob-human" scenes.
//!
//! Each human is a connected composition of categorized primitives (ellipse
//! head, rectangle torso, limb strips) rendered in category colors with a
//! per-human tint. Generation is a pure function of `(seed, spec)`.
//!
//! Masks are rasterized on the quarter-resolution lattice and upscaled by 4,
//! so every mask is constant on 4x4 blocks. The shared mask feature of the
//! network lives at quarter resolution; aligning the data to that lattice
//! means the quarter-resolution mask targets are lossless.
//!
//! Visibility semantics: within a human, parts are painted in a fixed order
//! and later parts own contested pixels; across humans (occlusion on), later
//! humans overwrite earlier ones. Barycenters always describe the visible
//! mask.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("scene spec infeasible: {0}")]
    Infeasible(String),
}

/// One categorized binary part mask of one human.
#[derive(Debug, Clone, PartialEq)]
pub struct PartInstance {
    pub category: usize,
    /// H x W raster of 0/1.
    pub mask: Array2<u8>,
    /// (x, y): mean of foreground pixel coordinates.
    pub barycenter: (f64, f64),
}

impl PartInstance {
    /// Returns `None` for an empty mask.
    pub fn new(category: usize, mask: Array2<u8>) -> Option<Self> {
        let barycenter = barycenter_of_mask(&mask)?;
        Some(PartInstance {
            category,
            mask,
            barycenter,
        })
    }

    /// sqrt(foreground pixel count): the instance scale used for level routing.
    pub fn scale(&self) -> f64 {
        (mask_area(&self.mask) as f64).sqrt()
    }
}

/// A human: its visible part masks, their union, and the union's barycenter.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanInstance {
    /// At most one part per category.
    pub parts: Vec<PartInstance>,
    pub union_mask: Array2<u8>,
    pub barycenter: (f64, f64),
}

impl HumanInstance {
    /// Build from parts, recomputing the union and barycenter. Returns `None`
    /// when no part has a foreground pixel.
    pub fn from_parts(parts: Vec<PartInstance>) -> Option<Self> {
        let first = parts.first()?;
        let mut union = Array2::<u8>::zeros(first.mask.raw_dim());
        for p in &parts {
            for (u, &m) in union.iter_mut().zip(p.mask.iter()) {
                *u |= m;
            }
        }
        let barycenter = barycenter_of_mask(&union)?;
        Some(HumanInstance {
            parts,
            union_mask: union,
            barycenter,
        })
    }

    pub fn scale(&self) -> f64 {
        (mask_area(&self.union_mask) as f64).sqrt()
    }
}

/// One image plus its human instances. Ground truth and predictions share
/// this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsingScene {
    pub id: String,
    /// (H, W, 3) RGB raster.
    pub image: Array3<u8>,
    pub humans: Vec<HumanInstance>,
}

impl ParsingScene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Generator parameters.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Inclusive range of humans per scene.
    pub num_humans: (usize, usize),
    /// Sampled body height range in pixels.
    pub scale_range: (f64, f64),
    pub num_part_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Allow humans to overlap; later humans own contested pixels.
    pub occlusion: bool,
    /// Render two categories in the same color to stress classification.
    pub confusable: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_humans: (2, 3),
            scale_range: (40.0, 56.0),
            num_part_classes: 6,
            height: 128,
            width: 128,
            occlusion: false,
            confusable: false,
        }
    }
}

pub fn mask_area(mask: &Array2<u8>) -> usize {
    mask.iter().filter(|&&v| v != 0).count()
}

/// (x, y) mean of foreground pixel coordinates, or `None` for an empty mask.
pub fn barycenter_of_mask(mask: &Array2<u8>) -> Option<(f64, f64)> {
    let mut n: u64 = 0;
    let mut sx: u64 = 0;
    let mut sy: u64 = 0;
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 {
            n += 1;
            sx += c as u64;
            sy += r as u64;
        }
    }
    if n == 0 {
        None
    } else {
        Some((sx as f64 / n as f64, sy as f64 / n as f64))
    }
}

/// Inclusive (min_row, min_col, max_row, max_col) of the foreground, or `None`.
pub fn mask_bbox(mask: &Array2<u8>) -> Option<(usize, usize, usize, usize)> {
    let mut out: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v != 0 {
            out = Some(match out {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    out
}

/// Fixed color for a category. With `confusable`, category 3 borrows the
/// color of category 2.
pub fn category_color(category: usize, confusable: bool) -> [u8; 3] {
    let c = if confusable && category == 3 { 2 } else { category };
    let hue = (c as f64 * 0.618_034) % 1.0;
    hsv_to_rgb(hue, 0.78, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Quarter-resolution body plan for one human.
struct BodyPlan {
    /// (category, kind-specific rects/ellipse) painted in this order; later
    /// entries own contested pixels.
    prims: Vec<(usize, Primitive)>,
    /// Quarter-res bounding box (r0, c0, r1, c1) inclusive.
    bbox: (i64, i64, i64, i64),
}

enum Primitive {
    Rect { r0: i64, c0: i64, r1: i64, c1: i64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

fn plan_body(rng: &mut ChaCha8Rng, height_px: f64, c_p: usize) -> BodyPlan {
    // All dimensions in quarter-res cells, anchored at the torso center (0,0).
    let qh = height_px / 4.0;
    let jitter = |rng: &mut ChaCha8Rng| 0.88 + 0.24 * rng.gen::<f64>();

    let torso_h = (0.40 * qh * jitter(rng)).max(2.0);
    let torso_w = (0.30 * qh * jitter(rng)).max(2.0);
    let head_ry = (0.15 * qh * jitter(rng)).max(1.0);
    let head_rx = (0.12 * qh * jitter(rng)).max(1.0);
    let arm_w = (0.10 * qh * jitter(rng)).max(1.0);
    let arm_l = (0.34 * qh * jitter(rng)).max(2.0);
    let leg_w = (0.11 * qh * jitter(rng)).max(1.0);
    let leg_l = (0.36 * qh * jitter(rng)).max(2.0);

    let t_r0 = -(torso_h / 2.0).round() as i64;
    let t_r1 = (torso_h / 2.0).round() as i64;
    let t_c0 = -(torso_w / 2.0).round() as i64;
    let t_c1 = (torso_w / 2.0).round() as i64;

    let mut prims: Vec<(usize, Primitive)> = Vec::new();
    // Torso.
    if c_p > 1 {
        prims.push((
            1,
            Primitive::Rect {
                r0: t_r0,
                c0: t_c0,
                r1: t_r1,
                c1: t_c1,
            },
        ));
    } else {
        // Degenerate single-category human: torso only, category 0.
        prims.push((
            0,
            Primitive::Rect {
                r0: t_r0,
                c0: t_c0,
                r1: t_r1,
                c1: t_c1,
            },
        ));
        let bbox = (t_r0, t_c0, t_r1, t_c1);
        return BodyPlan { prims, bbox };
    }

    let arm_w_i = arm_w.round().max(1.0) as i64;
    let arm_l_i = arm_l.round() as i64;
    let leg_w_i = leg_w.round().max(1.0) as i64;
    let leg_l_i = leg_l.round() as i64;

    // Legs below the torso.
    if c_p > 4 {
        prims.push((
            4,
            Primitive::Rect {
                r0: t_r1,
                c0: t_c0,
                r1: t_r1 + leg_l_i,
                c1: t_c0 + leg_w_i,
            },
        ));
    }
    if c_p > 5 {
        prims.push((
            5,
            Primitive::Rect {
                r0: t_r1,
                c0: t_c1 - leg_w_i,
                r1: t_r1 + leg_l_i,
                c1: t_c1,
            },
        ));
    }
    // Arms alongside the torso, attached at the shoulders.
    if c_p > 2 {
        prims.push((
            2,
            Primitive::Rect {
                r0: t_r0,
                c0: t_c0 - arm_w_i,
                r1: t_r0 + arm_l_i,
                c1: t_c0,
            },
        ));
    }
    if c_p > 3 {
        prims.push((
            3,
            Primitive::Rect {
                r0: t_r0,
                c0: t_c1,
                r1: t_r0 + arm_l_i,
                c1: t_c1 + arm_w_i,
            },
        ));
    }
    // Head above the torso, overlapping by one cell to stay connected.
    let head_cy = t_r0 as f64 - head_ry + 1.0;
    prims.push((
        0,
        Primitive::Ellipse {
            cy: head_cy,
            cx: 0.0,
            ry: head_ry,
            rx: head_rx,
        },
    ));
    // Accessory bands across the torso for extra categories.
    for cat in 6..c_p {
        let k = (cat - 6) as i64;
        let band_r = t_r0 + 1 + (2 * k + 1) % (t_r1 - t_r0).max(1);
        prims.push((
            cat,
            Primitive::Rect {
                r0: band_r,
                c0: t_c0,
                r1: band_r + 1,
                c1: t_c1,
            },
        ));
    }

    let mut bbox = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (_, p) in &prims {
        let (r0, c0, r1, c1) = match *p {
            Primitive::Rect { r0, c0, r1, c1 } => (r0, c0, r1, c1),
            Primitive::Ellipse { cy, cx, ry, rx } => (
                (cy - ry).floor() as i64,
                (cx - rx).floor() as i64,
                (cy + ry).ceil() as i64,
                (cx + rx).ceil() as i64,
            ),
        };
        bbox.0 = bbox.0.min(r0);
        bbox.1 = bbox.1.min(c0);
        bbox.2 = bbox.2.max(r1);
        bbox.3 = bbox.3.max(c1);
    }
    BodyPlan { prims, bbox }
}

fn paint(canvas: &mut Array2<i32>, plan: &BodyPlan, anchor: (i64, i64), id_base: i32) {
    let (qh, qw) = canvas.dim();
    for (cat, prim) in &plan.prims {
        let code = id_base + *cat as i32;
        match *prim {
            Primitive::Rect { r0, c0, r1, c1 } => {
                for r in r0 + anchor.0..=r1 + anchor.0 {
                    for c in c0 + anchor.1..=c1 + anchor.1 {
                        if r >= 0 && c >= 0 && (r as usize) < qh && (c as usize) < qw {
                            canvas[(r as usize, c as usize)] = code;
                        }
                    }
                }
            }
            Primitive::Ellipse { cy, cx, ry, rx } => {
                let r0 = (cy - ry).floor() as i64 + anchor.0;
                let r1 = (cy + ry).ceil() as i64 + anchor.0;
                let c0 = (cx - rx).floor() as i64 + anchor.1;
                let c1 = (cx + rx).ceil() as i64 + anchor.1;
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if r < 0 || c < 0 || r as usize >= qh || c as usize >= qw {
                            continue;
                        }
                        let dy = (r - anchor.0) as f64 + 0.5 - cy;
                        let dx = (c - anchor.1) as f64 + 0.5 - cx;
                        if (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0 {
                            canvas[(r as usize, c as usize)] = code;
                        }
                    }
                }
            }
        }
    }
}

/// Generate a scene. Pure in `(seed, spec)`: the same arguments produce a
/// byte-identical scene.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<ParsingScene, SynthError> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let (qh, qw) = (h / 4, w / 4);
    let c_p = spec.num_part_classes;

    let n_humans = rng.gen_range(spec.num_humans.0..=spec.num_humans.1);

    // Place all humans; when one cannot be fitted, re-draw the entire layout.
    let mut layout: Option<(Vec<(i64, i64, f64)>, Vec<BodyPlan>)> = None;
    'scene: for _ in 0..40 {
        let mut placed: Vec<(i64, i64, f64)> = Vec::new(); // anchor + body height
        let mut plans: Vec<BodyPlan> = Vec::new();
        for _ in 0..n_humans {
            let height_px =
                spec.scale_range.0 + (spec.scale_range.1 - spec.scale_range.0) * rng.gen::<f64>();
            let plan = plan_body(&mut rng, height_px, c_p);
            let (br0, bc0, br1, bc1) = plan.bbox;
            let (r_lo, r_hi) = (1 - br0, qh as i64 - 1 - br1);
            let (c_lo, c_hi) = (1 - bc0, qw as i64 - 1 - bc1);
            if r_lo >= r_hi || c_lo >= c_hi {
                return Err(SynthError::Infeasible(format!(
                    "a human of height {height_px:.0}px does not fit a {w}x{h} scene"
                )));
            }
            let mut anchor = None;
            for _ in 0..200 {
                let ar = rng.gen_range(r_lo..r_hi);
                let ac = rng.gen_range(c_lo..c_hi);
                // Keep barycenters apart so center regions stay distinct.
                let min_sep = 0.42 * height_px / 4.0;
                let sep_ok = placed.iter().all(|&(pr, pc, ph)| {
                    let d = (((ar - pr).pow(2) + (ac - pc).pow(2)) as f64).sqrt();
                    d >= min_sep.max(0.42 * ph / 4.0)
                });
                let overlap_ok = if spec.occlusion {
                    true
                } else {
                    // Without occlusion bodies must stay disjoint.
                    placed.iter().zip(plans.iter()).all(|(&(pr, pc, _), pp)| {
                        let (or0, oc0, or1, oc1) = pp.bbox;
                        ar + br1 + 1 < pr + or0
                            || pr + or1 + 1 < ar + br0
                            || ac + bc1 + 1 < pc + oc0
                            || pc + oc1 + 1 < ac + bc0
                    })
                };
                if sep_ok && overlap_ok {
                    anchor = Some((ar, ac));
                    break;
                }
            }
            let Some((ar, ac)) = anchor else {
                continue 'scene;
            };
            placed.push((ar, ac, height_px));
            plans.push(plan);
        }
        layout = Some((placed, plans));
        break;
    }
    let Some((placed, plans)) = layout else {
        return Err(SynthError::Infeasible(format!(
            "could not place {n_humans} humans of height {:.0}-{:.0}px in a {w}x{h} scene",
            spec.scale_range.0, spec.scale_range.1
        )));
    };

    // Encodes (human, category) as human * c_p + category + 1; 0 = background.
    let mut canvas = Array2::<i32>::zeros((qh, qw));
    for (k, (&(ar, ac, _), plan)) in placed.iter().zip(plans.iter()).enumerate() {
        paint(&mut canvas, plan, (ar, ac), (k * c_p) as i32 + 1);
    }

    // Per-human tint: well separated values, shuffled.
    let mut tints: Vec<f64> = (0..n_humans)
        .map(|i| 0.55 + 0.45 * (i as f64) / (n_humans.max(2) - 1) as f64)
        .collect();
    for i in (1..tints.len()).rev() {
        let j = rng.gen_range(0..=i);
        tints.swap(i, j);
    }

    // Extract per-human visible part masks at full resolution.
    let mut humans = Vec::new();
    for k in 0..n_humans {
        let mut parts = Vec::new();
        for cat in 0..c_p {
            let code = (k * c_p + cat) as i32 + 1;
            let mut mask = Array2::<u8>::zeros((h, w));
            let mut any = false;
            for ((qr, qc), &v) in canvas.indexed_iter() {
                if v == code {
                    any = true;
                    for dr in 0..4 {
                        for dc in 0..4 {
                            mask[(qr * 4 + dr, qc * 4 + dc)] = 1;
                        }
                    }
                }
            }
            if any {
                // Parts fully occluded away are dropped from the annotation.
                parts.push(PartInstance::new(cat, mask).expect("nonempty"));
            }
        }
        if let Some(human) = HumanInstance::from_parts(parts) {
            humans.push(human);
        }
    }

    // Render: smooth dark background, category-colored humans, light noise.
    let gx = rng.gen_range(-0.15..0.15);
    let gy = rng.gen_range(-0.15..0.15);
    let base = rng.gen_range(40.0..70.0);
    let mut image = Array3::<u8>::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let code = canvas[(r / 4, c / 4)];
            let px = if code == 0 {
                let v = base + gx * c as f64 + gy * r as f64;
                let v = v.clamp(0.0, 110.0) as u8;
                [v, v, v]
            } else {
                let idx = (code - 1) as usize;
                let (human, cat) = (idx / c_p, idx % c_p);
                let color = category_color(cat, spec.confusable);
                let t = tints[human];
                [
                    (color[0] as f64 * t) as u8,
                    (color[1] as f64 * t) as u8,
                    (color[2] as f64 * t) as u8,
                ]
            };
            for ch in 0..3 {
                let noise = rng.gen_range(-5i16..=5i16);
                image[(r, c, ch)] = (px[ch] as i16 + noise).clamp(0, 255) as u8;
            }
        }
    }

    Ok(ParsingScene {
        id: format!("scene_{seed:08}"),
        image,
        humans,
    })
}

fn validate_spec(spec: &SceneSpec) -> Result<(), SynthError> {
    if spec.height < 64 || spec.width < 64 {
        return Err(SynthError::InvalidSpec("image must be at least 64x64".into()));
    }
    if spec.height % 4 != 0 || spec.width % 4 != 0 {
        return Err(SynthError::InvalidSpec(
            "image sides must be divisible by 4".into(),
        ));
    }
    if spec.num_part_classes < 1 {
        return Err(SynthError::InvalidSpec("need at least one category".into()));
    }
    if spec.num_humans.0 > spec.num_humans.1 || spec.num_humans.1 == 0 {
        return Err(SynthError::InvalidSpec("bad human count range".into()));
    }
    if !(spec.scale_range.0 > 8.0) || spec.scale_range.0 > spec.scale_range.1 {
        return Err(SynthError::InvalidSpec("bad scale range".into()));
    }
    let max_side = spec.height.min(spec.width) as f64;
    if spec.scale_range.1 > max_side {
        return Err(SynthError::Infeasible(format!(
            "humans of height {:.0}px cannot fit a {}x{} scene",
            spec.scale_range.1, spec.width, spec.height
        )));
    }
    Ok(())
}

/// Nearest-neighbor rescale of a scene to a new size. Masks stay binary;
/// barycenters and unions are recomputed. Used by scale-jitter augmentation.
pub fn resize_scene(scene: &ParsingScene, new_h: usize, new_w: usize) -> ParsingScene {
    let (h, w) = (scene.height(), scene.width());
    let src_r = |r: usize| (((r as f64 + 0.5) * h as f64 / new_h as f64) as usize).min(h - 1);
    let src_c = |c: usize| (((c as f64 + 0.5) * w as f64 / new_w as f64) as usize).min(w - 1);

    let mut image = Array3::<u8>::zeros((new_h, new_w, 3));
    for r in 0..new_h {
        for c in 0..new_w {
            for ch in 0..3 {
                image[(r, c, ch)] = scene.image[(src_r(r), src_c(c), ch)];
            }
        }
    }
    let humans = scene
        .humans
        .iter()
        .filter_map(|hm| {
            let parts = hm
                .parts
                .iter()
                .filter_map(|p| {
                    let mut mask = Array2::<u8>::zeros((new_h, new_w));
                    for r in 0..new_h {
                        for c in 0..new_w {
                            mask[(r, c)] = p.mask[(src_r(r), src_c(c))];
                        }
                    }
                    PartInstance::new(p.category, mask)
                })
                .collect();
            HumanInstance::from_parts(parts)
        })
        .collect();
    ParsingScene {
        id: scene.id.clone(),
        image,
        humans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn human_barycenter_matches_union_of_parts() {
        let spec = SceneSpec {
            num_humans: (1, 1),
            ..Default::default()
        };
        let scene = generate_scene(7, &spec).unwrap();
        assert_eq!(scene.humans.len(), 1);
        let human = &scene.humans[0];
        let mut union = Array2::<u8>::zeros((spec.height, spec.width));
        for p in &human.parts {
            for (u, &m) in union.iter_mut().zip(p.mask.iter()) {
                *u |= m;
            }
        }
        assert_eq!(union, human.union_mask);
        let bc = barycenter_of_mask(&union).unwrap();
        assert_eq!(bc, human.barycenter);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec::default();
        let a = generate_scene(7, &spec).unwrap();
        let b = generate_scene(7, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occluded_parts_are_dropped_or_nonempty() {
        let spec = SceneSpec {
            num_humans: (3, 3),
            occlusion: true,
            ..Default::default()
        };
        let scene = generate_scene(11, &spec).unwrap();
        for human in &scene.humans {
            for part in &human.parts {
                assert!(mask_area(&part.mask) >= 1);
            }
        }
    }

    #[test]
    fn parts_unique_per_category_and_within_bounds() {
        for seed in 0..100 {
            let spec = SceneSpec {
                num_humans: if seed % 2 == 0 { (2, 4) } else { (1, 3) },
                occlusion: seed % 2 == 0,
                ..Default::default()
            };
            let scene = generate_scene(seed, &spec).unwrap();
            for human in &scene.humans {
                assert!(!human.parts.is_empty());
                assert!(human.parts.len() <= spec.num_part_classes);
                let mut seen = vec![false; spec.num_part_classes];
                for p in &human.parts {
                    assert!(p.category < spec.num_part_classes);
                    assert!(!seen[p.category], "duplicate category {}", p.category);
                    seen[p.category] = true;
                }
            }
        }
    }

    #[test]
    fn barycenters_recompute_exactly() {
        let scene = generate_scene(3, &SceneSpec::default()).unwrap();
        for human in &scene.humans {
            for p in &human.parts {
                let rec = barycenter_of_mask(&p.mask).unwrap();
                assert!((rec.0 - p.barycenter.0).abs() < 1e-9);
                assert!((rec.1 - p.barycenter.1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn masks_are_block_aligned() {
        let scene = generate_scene(5, &SceneSpec::default()).unwrap();
        for human in &scene.humans {
            for p in &human.parts {
                let m = &p.mask;
                for qr in 0..m.nrows() / 4 {
                    for qc in 0..m.ncols() / 4 {
                        let v = m[(qr * 4, qc * 4)];
                        for dr in 0..4 {
                            for dc in 0..4 {
                                assert_eq!(m[(qr * 4 + dr, qc * 4 + dc)], v);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_spec_is_an_error() {
        let spec = SceneSpec {
            scale_range: (120.0, 127.0),
            num_humans: (6, 6),
            occlusion: false,
            ..Default::default()
        };
        match generate_scene(1, &spec) {
            Err(SynthError::Infeasible(_)) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn single_category_scenes_are_valid() {
        let spec = SceneSpec {
            num_part_classes: 1,
            ..Default::default()
        };
        let scene = generate_scene(2, &spec).unwrap();
        assert!(!scene.humans.is_empty());
        for h in &scene.humans {
            assert_eq!(h.parts.len(), 1);
            assert_eq!(h.parts[0].category, 0);
        }
    }
}
