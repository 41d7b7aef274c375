//! The on-disk scene schema shared by ground truth and predictions.
//!
//! A scene directory holds `image.png` (RGB), one indexed PNG per human
//! (8-bit, pixel value = category + 1, 0 = background) and `scene.json`
//! listing the humans and their categories. A dataset directory holds scene
//! subdirectories plus `manifest.json`. Prediction directories use the same
//! layout with an additional per-human `score`; readers that do not care
//! about scores ignore it.

use crate::synth::{HumanInstance, ParsingScene, PartInstance};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version tag written into every index file.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("png error on {path}: {source}")]
    Png {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("bad index {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: category id {found} out of range (num_part_classes = {num_classes})")]
    CategoryOutOfRange {
        path: PathBuf,
        found: usize,
        num_classes: usize,
    },
    #[error("{path}: raster is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        path: PathBuf,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PartEntry {
    category: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HumanEntry {
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    parts: Vec<PartEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneIndex {
    format: u32,
    id: String,
    width: usize,
    height: usize,
    num_part_classes: usize,
    humans: Vec<HumanEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    num_part_classes: usize,
    scenes: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(io_err(path))
}

fn save_rgb(path: &Path, image: &Array3<u8>) -> Result<(), DatasetError> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            buf.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([image[(r, c, 0)], image[(r, c, 1)], image[(r, c, 2)]]),
            );
        }
    }
    buf.save(path).map_err(|source| DatasetError::Png {
        path: path.to_path_buf(),
        source,
    })
}

fn load_rgb(path: &Path) -> Result<Array3<u8>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| DatasetError::Png {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let p = img.get_pixel(c as u32, r as u32);
            out[(r, c, 0)] = p[0];
            out[(r, c, 1)] = p[1];
            out[(r, c, 2)] = p[2];
        }
    }
    Ok(out)
}

/// Paint a human's parts into one indexed raster. Parts are painted in
/// ascending score order (stable on category) so higher-confidence parts own
/// contested pixels; ground-truth parts never overlap so the order is moot.
fn human_to_indexed(human: &HumanInstance, h: usize, w: usize) -> Array2<u8> {
    let mut raster = Array2::<u8>::zeros((h, w));
    for part in &human.parts {
        let code = (part.category + 1) as u8;
        for ((r, c), &m) in part.mask.indexed_iter() {
            if m != 0 {
                raster[(r, c)] = code;
            }
        }
    }
    raster
}

fn save_indexed(path: &Path, raster: &Array2<u8>) -> Result<(), DatasetError> {
    let (h, w) = raster.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in raster.indexed_iter() {
        buf.put_pixel(c as u32, r as u32, image::Luma([v]));
    }
    buf.save(path).map_err(|source| DatasetError::Png {
        path: path.to_path_buf(),
        source,
    })
}

fn load_indexed(path: &Path) -> Result<Array2<u8>, DatasetError> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|source| DatasetError::Png {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[(r, c)] = img.get_pixel(c as u32, r as u32)[0];
        }
    }
    Ok(out)
}

/// Write one scene directory. `scores`, when given, must have one entry per
/// human and is stored for prediction directories.
pub fn write_scene_with_scores(
    dir: &Path,
    scene: &ParsingScene,
    num_part_classes: usize,
    scores: Option<&[f64]>,
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (scene.height(), scene.width());
    save_rgb(&dir.join("image.png"), &scene.image)?;
    let mut humans = Vec::new();
    for (i, human) in scene.humans.iter().enumerate() {
        let file = format!("human_{i:02}.png");
        save_indexed(&dir.join(&file), &human_to_indexed(human, h, w))?;
        humans.push(HumanEntry {
            file,
            score: scores.map(|s| s[i]),
            parts: human
                .parts
                .iter()
                .map(|p| PartEntry {
                    category: p.category,
                })
                .collect(),
        });
    }
    let index = SceneIndex {
        format: FORMAT_VERSION,
        id: scene.id.clone(),
        width: w,
        height: h,
        num_part_classes,
        humans,
    };
    write_json(&dir.join("scene.json"), &index)
}

pub fn write_scene(
    dir: &Path,
    scene: &ParsingScene,
    num_part_classes: usize,
) -> Result<(), DatasetError> {
    write_scene_with_scores(dir, scene, num_part_classes, None)
}

/// Read one scene directory; barycenters and unions are recomputed from the
/// mask rasters. Returns the scene and per-human scores (1.0 when absent).
pub fn read_scene_scored(dir: &Path) -> Result<(ParsingScene, Vec<f64>), DatasetError> {
    let index_path = dir.join("scene.json");
    if !index_path.exists() {
        return Err(DatasetError::MissingFile(index_path));
    }
    let text = std::fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index: SceneIndex = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: index_path.clone(),
        source,
    })?;
    if index.format != FORMAT_VERSION {
        return Err(DatasetError::Version(index.format));
    }
    let image = load_rgb(&dir.join("image.png"))?;
    let (h, w, _) = image.dim();
    if h != index.height || w != index.width {
        return Err(DatasetError::SizeMismatch {
            path: dir.join("image.png"),
            got_w: w as u32,
            got_h: h as u32,
            want_w: index.width as u32,
            want_h: index.height as u32,
        });
    }

    let mut humans = Vec::new();
    let mut scores = Vec::new();
    for entry in &index.humans {
        let path = dir.join(&entry.file);
        let raster = load_indexed(&path)?;
        let (rh, rw) = raster.dim();
        if rh != h || rw != w {
            return Err(DatasetError::SizeMismatch {
                path,
                got_w: rw as u32,
                got_h: rh as u32,
                want_w: w as u32,
                want_h: h as u32,
            });
        }
        let max_code = raster.iter().copied().max().unwrap_or(0) as usize;
        if max_code > index.num_part_classes {
            return Err(DatasetError::CategoryOutOfRange {
                path,
                found: max_code - 1,
                num_classes: index.num_part_classes,
            });
        }
        let mut parts = Vec::new();
        for cat in 0..index.num_part_classes {
            let code = (cat + 1) as u8;
            let mask = raster.mapv(|v| u8::from(v == code));
            if let Some(part) = PartInstance::new(cat, mask) {
                parts.push(part);
            }
        }
        // Humans with no visible pixels are legal in prediction directories.
        let human = HumanInstance::from_parts(parts).unwrap_or_else(|| HumanInstance {
            parts: Vec::new(),
            union_mask: Array2::zeros((h, w)),
            barycenter: (0.0, 0.0),
        });
        humans.push(human);
        scores.push(entry.score.unwrap_or(1.0));
    }
    Ok((
        ParsingScene {
            id: index.id,
            image,
            humans,
        },
        scores,
    ))
}

pub fn read_scene(dir: &Path) -> Result<ParsingScene, DatasetError> {
    Ok(read_scene_scored(dir)?.0)
}

/// Write a dataset directory: one subdirectory per scene plus a manifest.
pub fn write_dataset(
    dir: &Path,
    scenes: &[ParsingScene],
    num_part_classes: usize,
) -> Result<(), DatasetError> {
    write_dataset_with_scores(dir, scenes, num_part_classes, None)
}

pub fn write_dataset_with_scores(
    dir: &Path,
    scenes: &[ParsingScene],
    num_part_classes: usize,
    scores: Option<&[Vec<f64>]>,
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut names = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let name = scene.id.clone();
        write_scene_with_scores(
            &dir.join(&name),
            scene,
            num_part_classes,
            scores.map(|s| s[i].as_slice()),
        )?;
        names.push(name);
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        num_part_classes,
        scenes: names,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Read every scene of a dataset directory, in manifest order.
pub fn read_dataset_scored(
    dir: &Path,
) -> Result<(Vec<(ParsingScene, Vec<f64>)>, usize), DatasetError> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(DatasetError::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.clone(),
        source,
    })?;
    if manifest.format != FORMAT_VERSION {
        return Err(DatasetError::Version(manifest.format));
    }
    let mut out = Vec::new();
    for name in &manifest.scenes {
        out.push(read_scene_scored(&dir.join(name))?);
    }
    Ok((out, manifest.num_part_classes))
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<ParsingScene>, usize), DatasetError> {
    let (scored, c_p) = read_dataset_scored(dir)?;
    Ok((scored.into_iter().map(|(s, _)| s).collect(), c_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneSpec};

    #[test]
    fn scene_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let scene = generate_scene(42, &spec).unwrap();
        let dir = tmp.path().join("s");
        write_scene(&dir, &scene, spec.num_part_classes).unwrap();
        let back = read_scene(&dir).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn index_lists_humans_and_categories() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            num_humans: (2, 2),
            ..Default::default()
        };
        let scene = generate_scene(9, &spec).unwrap();
        let dir = tmp.path().join("s");
        write_scene(&dir, &scene, spec.num_part_classes).unwrap();
        let text = std::fs::read_to_string(dir.join("scene.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["format"], 1);
        assert_eq!(v["humans"].as_array().unwrap().len(), 2);
        for (h, json) in scene.humans.iter().zip(v["humans"].as_array().unwrap()) {
            assert_eq!(json["parts"].as_array().unwrap().len(), h.parts.len());
        }
    }

    #[test]
    fn out_of_range_category_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let scene = generate_scene(1, &spec).unwrap();
        let dir = tmp.path().join("s");
        write_scene(&dir, &scene, spec.num_part_classes).unwrap();
        // Corrupt one mask with a value beyond num_part_classes.
        let path = dir.join("human_00.png");
        let mut raster = load_indexed(&path).unwrap();
        raster[(0, 0)] = (spec.num_part_classes + 1) as u8;
        save_indexed(&path, &raster).unwrap();
        match read_scene(&dir) {
            Err(DatasetError::CategoryOutOfRange { found, .. }) => {
                assert_eq!(found, spec.num_part_classes)
            }
            other => panic!("expected category error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mask_file_is_distinct_error() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        let scene = generate_scene(2, &spec).unwrap();
        let dir = tmp.path().join("s");
        write_scene(&dir, &scene, spec.num_part_classes).unwrap();
        std::fs::remove_file(dir.join("human_00.png")).unwrap();
        assert!(matches!(
            read_scene(&dir),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn dataset_round_trip_many_scenes() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            occlusion: true,
            ..Default::default()
        };
        let scenes: Vec<_> = (0..50)
            .map(|s| generate_scene(s, &spec).unwrap())
            .collect();
        write_dataset(tmp.path(), &scenes, spec.num_part_classes).unwrap();
        let (back, c_p) = read_dataset(tmp.path()).unwrap();
        assert_eq!(c_p, spec.num_part_classes);
        assert_eq!(scenes, back);
    }

    #[test]
    fn scores_survive_prediction_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            num_humans: (2, 2),
            ..Default::default()
        };
        let scene = generate_scene(5, &spec).unwrap();
        let dir = tmp.path().join("p");
        write_scene_with_scores(&dir, &scene, spec.num_part_classes, Some(&[0.9, 0.4])).unwrap();
        let (_, scores) = read_scene_scored(&dir).unwrap();
        assert_eq!(scores, vec![0.9, 0.4]);
    }
}
