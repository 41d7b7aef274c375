//! The parsing network: a small strided backbone, an FPN, the fused
//! center/offset heads, per-level part heads with dynamic mask kernels, the
//! shared quarter-resolution mask feature, mask-attention refinement of the
//! category tower, and the mask-of-interest reclassification head.
//!
//! Forward passes are pure functions of (parameters, input); a counter on
//! [`Model`] tracks how many have run, which the decoder uses to prove its
//! single-pass property.

use crate::autodiff::{Tape, Var};
use crate::config::{Config, GridSpec, ModelConfig};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Bias given to classification output layers so untrained heatmaps sit near
/// a prior probability of 0.01, keeping early focal losses small.
const PRIOR_BIAS: f64 = -4.595_119_850_134_589_5; // ln(0.01 / 0.99)

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input of {h}x{w} is not divisible by 32")]
    BadInputSize { h: usize, w: usize },
    #[error("dynamic kernel has {got} channels, mask feature has {expected}")]
    KernelLength { expected: usize, got: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("archive io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad archive: {0}")]
    BadArchive(String),
}

// ---------------------------------------------------------------------------
// Parameters

/// Named parameter arrays, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

/// Backbone stage widths derived from the base width.
pub fn stage_widths(cfg: &ModelConfig) -> [usize; 5] {
    let w = cfg.backbone_width;
    [w, 2 * w, 2 * w, 4 * w, 4 * w]
}

/// (name, shape) of every parameter for a given configuration. Parameter
/// count is a pure function of the model config.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    fn conv(out: &mut Vec<(String, Vec<usize>)>, name: &str, cout: usize, cin: usize, k: usize) {
        out.push((format!("{name}.w"), vec![cout, cin, k, k]));
        out.push((format!("{name}.b"), vec![cout]));
    }
    fn tower(out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, width: usize, depth: usize) {
        let mut prev = cin;
        for d in 0..depth {
            out.push((format!("{name}.tower{d}.w"), vec![width, prev, 3, 3]));
            out.push((format!("{name}.tower{d}.b"), vec![width]));
            prev = width;
        }
    }

    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let widths = stage_widths(cfg);
    conv(&mut out, "backbone.stem", widths[0], 3, 3);
    for i in 1..5 {
        conv(&mut out, &format!("backbone.stage{i}.down"), widths[i], widths[i - 1], 3);
        conv(&mut out, &format!("backbone.stage{i}.conv"), widths[i], widths[i], 3);
    }
    let fpn = cfg.fpn_channels;
    for i in 2..=5 {
        conv(&mut out, &format!("fpn.lateral{i}"), fpn, widths[i - 1], 1);
        conv(&mut out, &format!("fpn.out{i}"), fpn, fpn, 3);
    }
    conv(&mut out, "fpn.p6", fpn, fpn, 3);

    let fusion = cfg.resolved_fusion_channels();
    conv(&mut out, "fuse.mix", fusion, 5 * fpn, 3);

    let head = cfg.head_channels;
    tower(&mut out, "center", fusion + 2, head, cfg.tower_depth);
    conv(&mut out, "center.out", 1, head, 1);

    let group = (fusion + 2) / cfg.num_part_classes;
    for p in 0..cfg.num_part_classes {
        tower(&mut out, &format!("offset.part{p}"), group, group, cfg.tower_depth);
        conv(&mut out, &format!("offset.part{p}.out"), 2, group, 1);
    }

    tower(&mut out, "part.cat", fpn + 2, head, cfg.tower_depth);
    conv(&mut out, "part.cat.out", cfg.num_part_classes, head, 1);
    tower(&mut out, "part.kernel", fpn + 2, head, cfg.tower_depth);
    conv(&mut out, "part.kernel.out", cfg.kernel_channels, head, 1);

    for i in 1..=5 {
        conv(&mut out, &format!("mask.proj{i}"), cfg.kernel_channels, widths[i - 1], 1);
    }
    conv(&mut out, "mask.mix", cfg.kernel_channels, cfg.kernel_channels, 3);

    let mc = cfg.mir.channels;
    let mut prev = fusion + 2;
    for d in 0..cfg.tower_depth {
        conv(&mut out, &format!("mir.conv{d}"), mc, prev, 3);
        prev = mc;
    }
    conv(&mut out, "mir.aux", cfg.num_part_classes + 1, mc, 1);
    let fc = cfg.mir.fc_dim;
    out.push((
        "mir.compress.w".into(),
        vec![fc, mc * cfg.mir.roi_size * cfg.mir.roi_size],
    ));
    out.push(("mir.compress.b".into(), vec![fc]));
    out.push(("mir.fc1.w".into(), vec![fc, fc]));
    out.push(("mir.fc1.b".into(), vec![fc]));
    out.push(("mir.fc2.w".into(), vec![cfg.num_part_classes, fc]));
    out.push(("mir.fc2.b".into(), vec![cfg.num_part_classes]));
    out
}

impl NetworkParams {
    /// He-normal initialization; classification output biases start at the
    /// 0.01 prior.
    pub fn init(cfg: &ModelConfig, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = BTreeMap::new();
        for (name, shape) in param_specs(cfg) {
            let arr = if name.ends_with(".b") {
                let bias = if name == "center.out.b" || name == "part.cat.out.b" {
                    PRIOR_BIAS
                } else {
                    0.0
                };
                ArrayD::from_elem(IxDyn(&shape), bias)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng))
            };
            arrays.insert(name, arr);
        }
        NetworkParams { arrays }
    }

    pub fn zeros(cfg: &ModelConfig) -> NetworkParams {
        let arrays = param_specs(cfg)
            .into_iter()
            .map(|(name, shape)| (name, ArrayD::zeros(IxDyn(&shape))))
            .collect();
        NetworkParams { arrays }
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, NetError> {
        self.arrays
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint archive: named f64 arrays plus a JSON metadata blob,
// little-endian, bit-exact round trip.

const ARCHIVE_MAGIC: &[u8; 8] = b"MHPARCH1";

pub struct Archive {
    pub arrays: BTreeMap<String, ArrayD<f64>>,
    pub meta: serde_json::Value,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ArchiveManifest {
    format: u32,
    entries: Vec<ArchiveEntry>,
    meta: serde_json::Value,
}

pub fn save_archive(path: &Path, archive: &Archive) -> Result<(), NetError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, arr) in &archive.arrays {
        let offset = blob.len() / 8; // element offset into the f64 blob
        let data = arr.as_standard_layout();
        for &v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ArchiveEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len: arr.len(),
        });
    }
    let manifest = ArchiveManifest {
        format: 1,
        entries,
        meta: archive.meta.clone(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest_json.len() + blob.len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    std::fs::write(path, out).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_archive(path: &Path) -> Result<Archive, NetError> {
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(NetError::BadArchive("bad magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: ArchiveManifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| NetError::BadArchive(format!("manifest: {e}")))?;
    if manifest.format != 1 {
        return Err(NetError::BadArchive(format!(
            "unsupported format {}",
            manifest.format
        )));
    }
    let blob = &bytes[16 + mlen..];
    let mut arrays = BTreeMap::new();
    for e in manifest.entries {
        if e.dtype != "f64" {
            return Err(NetError::BadArchive(format!("dtype {}", e.dtype)));
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > blob.len() {
            return Err(NetError::BadArchive("truncated data".into()));
        }
        let mut data = Vec::with_capacity(e.len);
        for i in 0..e.len {
            let b: [u8; 8] = blob[start + i * 8..start + i * 8 + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(b));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|e| NetError::BadArchive(format!("shape: {e}")))?;
        arrays.insert(e.name, arr);
    }
    Ok(Archive {
        arrays,
        meta: manifest.meta,
    })
}

/// Save parameters together with the configuration that shaped them. The
/// config rides along as TOML text (JSON cannot express the infinite scale
/// bound of the top pyramid level).
pub fn save_checkpoint(path: &Path, params: &NetworkParams, cfg: &Config) -> Result<(), NetError> {
    let archive = Archive {
        arrays: params.arrays.clone(),
        meta: serde_json::json!({ "config_toml": cfg.to_toml() }),
    };
    save_archive(path, &archive)
}

pub fn config_from_meta(meta: &serde_json::Value) -> Result<Config, NetError> {
    let text = meta["config_toml"]
        .as_str()
        .ok_or_else(|| NetError::BadArchive("missing config".into()))?;
    Config::from_toml(text).map_err(|e| NetError::BadArchive(format!("config: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, Config), NetError> {
    let archive = load_archive(path)?;
    let cfg = config_from_meta(&archive.meta)?;
    Ok((
        NetworkParams {
            arrays: archive.arrays,
        },
        cfg,
    ))
}

// ---------------------------------------------------------------------------
// Forward graph builders

/// Lazily registers parameters as tape inputs, so gradients can be read back
/// per name after the backward pass.
pub struct Bind<'p> {
    params: &'p NetworkParams,
    pub vars: BTreeMap<String, Var>,
}

impl<'p> Bind<'p> {
    pub fn new(params: &'p NetworkParams) -> Self {
        Bind {
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, t: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let arr = self
            .params
            .arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = t.input(arr);
        self.vars.insert(name.to_string(), v);
        v
    }
}

fn conv_block(t: &mut Tape, b: &mut Bind, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = b.var(t, &format!("{name}.w"));
    let bias = b.var(t, &format!("{name}.b"));
    t.conv2d(x, w, Some(bias), stride, pad)
}

fn conv_relu(t: &mut Tape, b: &mut Bind, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let y = conv_block(t, b, name, x, stride, pad);
    t.relu(y)
}

/// Two channels of relative coordinates spanning [-1, 1]: x along columns,
/// then y along rows.
pub fn coord_channels(s0: usize, s1: usize) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((2, s0, s1));
    for r in 0..s0 {
        for c in 0..s1 {
            out[(0, r, c)] = if s1 > 1 {
                -1.0 + 2.0 * c as f64 / (s1 - 1) as f64
            } else {
                0.0
            };
            out[(1, r, c)] = if s0 > 1 {
                -1.0 + 2.0 * r as f64 / (s0 - 1) as f64
            } else {
                0.0
            };
        }
    }
    out
}

fn append_coords(t: &mut Tape, x: Var) -> Var {
    let v = t.value3(x);
    let (_, s0, s1) = v.dim();
    let coords = t.input3(coord_channels(s0, s1));
    t.concat_c(&[x, coords])
}

/// Backbone stages C1..C5 with strides 2, 4, 8, 16, 32.
pub fn backbone(t: &mut Tape, b: &mut Bind, image: Var) -> Vec<Var> {
    let mut stages = Vec::with_capacity(5);
    let c1 = conv_relu(t, b, "backbone.stem", image, 2, 1);
    stages.push(c1);
    let mut cur = c1;
    for i in 1..5 {
        let down = conv_relu(t, b, &format!("backbone.stage{i}.down"), cur, 2, 1);
        let conv = conv_relu(t, b, &format!("backbone.stage{i}.conv"), down, 1, 1);
        stages.push(conv);
        cur = conv;
    }
    stages
}

/// Pyramid features F2..F6 with strides 4..64.
pub fn fpn(t: &mut Tape, b: &mut Bind, stages: &[Var]) -> Vec<Var> {
    // Laterals on C2..C5, top-down pathway, 3x3 output convolutions.
    let mut laterals = Vec::new();
    for i in 2..=5 {
        laterals.push(conv_block(
            t,
            b,
            &format!("fpn.lateral{i}"),
            stages[i - 1],
            1,
            0,
        ));
    }
    let mut tops = vec![laterals[3]];
    for idx in (0..3).rev() {
        let below = t.value3(laterals[idx]).dim();
        let up = t.resize_bilinear(*tops.last().unwrap(), below.1, below.2);
        let merged = t.add(laterals[idx], up);
        tops.push(merged);
    }
    tops.reverse(); // P2..P5
    let mut out = Vec::new();
    for (idx, &p) in tops.iter().enumerate() {
        out.push(conv_block(t, b, &format!("fpn.out{}", idx + 2), p, 1, 1));
    }
    let f6 = conv_block(t, b, "fpn.p6", tops[3], 2, 1);
    out.push(f6);
    out
}

/// Resize every level to S x S, concatenate, mix with a 3x3 convolution and
/// append coordinate channels.
pub fn fuse_and_coord(t: &mut Tape, b: &mut Bind, pyramid: &[Var], s: usize) -> Var {
    let resized: Vec<Var> = pyramid
        .iter()
        .map(|&f| t.resize_bilinear(f, s, s))
        .collect();
    let cat = t.concat_c(&resized);
    let mixed = conv_relu(t, b, "fuse.mix", cat, 1, 1);
    append_coords(t, mixed)
}

/// Tower of 3x3 convolutions with a nonlinearity, then a 1x1 projection.
fn head_tower(
    t: &mut Tape,
    b: &mut Bind,
    name: &str,
    x: Var,
    depth: usize,
    out_name: &str,
) -> Var {
    let mut cur = x;
    for d in 0..depth {
        cur = conv_relu(t, b, &format!("{name}.tower{d}"), cur, 1, 1);
    }
    conv_block(t, b, out_name, cur, 1, 0)
}

pub fn center_head(t: &mut Tape, b: &mut Bind, fused: Var, cfg: &ModelConfig) -> Var {
    let logits = head_tower(t, b, "center", fused, cfg.tower_depth, "center.out");
    t.sigmoid(logits)
}

/// Decoupled per-part offset branches, each consuming its own slice of the
/// fused feature; outputs are concatenated to (2*C_P, S, S), linear.
pub fn offset_head(t: &mut Tape, b: &mut Bind, fused: Var, cfg: &ModelConfig, group: usize) -> Var {
    let mut outs = Vec::new();
    for p in 0..cfg.num_part_classes {
        let slice = t.slice_c(fused, p * group, group);
        let mut cur = slice;
        for d in 0..cfg.tower_depth {
            cur = conv_relu(t, b, &format!("offset.part{p}.tower{d}"), cur, 1, 1);
        }
        outs.push(conv_block(t, b, &format!("offset.part{p}.out"), cur, 1, 0));
    }
    t.concat_c(&outs)
}

/// Mask-attention refinement: attention is the sigmoid of cosine similarity
/// between L2-normalized mask-feature vectors, and the refined feature is the
/// residual attention-weighted pooling of `g`.
pub fn rfr_refine(t: &mut Tape, g: Var, f_mask_resized: Var) -> Var {
    let gv = t.value3(g);
    let (c_g, s0, s1) = gv.dim();
    let n = s0 * s1;
    let fv = t.value3(f_mask_resized);
    let c_f = fv.dim().0;

    let g_rows = {
        let g2 = t.reshape(g, &[c_g, n]);
        t.transpose2(g2)
    }; // (N, C_g)
    let f_rows = {
        let f2 = t.reshape(f_mask_resized, &[c_f, n]);
        t.transpose2(f2)
    }; // (N, C_f)

    let sq = t.mul(f_rows, f_rows);
    let norms = t.row_sum(sq);
    let norm = t.sqrt_eps(norms, 1e-12);
    let inv_norm = t.recip_eps(norm, 0.0);
    let f_hat = t.mul_col(f_rows, inv_norm);

    let f_hat_t = t.transpose2(f_hat);
    let logits = t.matmul(f_hat, f_hat_t); // (N, N) cosine similarities
    let attention = t.sigmoid(logits);
    let row_sums = t.row_sum(attention);
    let inv_rows = t.recip_eps(row_sums, 0.0);
    let pooled = t.matmul(attention, g_rows);
    let pooled_norm = t.mul_col(pooled, inv_rows);
    let refined = t.add(g_rows, pooled_norm);

    let refined_t = t.transpose2(refined);
    t.reshape(refined_t, &[c_g, s0, s1])
}

/// One pyramid level through the shared part head: category heatmap and
/// kernel map at the level's grid size.
pub fn part_head(
    t: &mut Tape,
    b: &mut Bind,
    level_feature: Var,
    grid: usize,
    f_mask: Var,
    cfg: &ModelConfig,
) -> (Var, Var) {
    let resized = t.resize_bilinear(level_feature, grid, grid);
    let x = append_coords(t, resized);
    let cat_input = if cfg.rfr_enabled {
        let f_res = t.resize_bilinear(f_mask, grid, grid);
        rfr_refine(t, x, f_res)
    } else {
        x
    };
    let cat_logits = head_tower(t, b, "part.cat", cat_input, cfg.tower_depth, "part.cat.out");
    let heat = t.sigmoid(cat_logits);
    let kernels = head_tower(t, b, "part.kernel", x, cfg.tower_depth, "part.kernel.out");
    (heat, kernels)
}

/// Quarter-resolution shared mask feature: project each backbone stage,
/// resize to (H/4, W/4), sum, and mix with one convolution.
pub fn mask_feature(t: &mut Tape, b: &mut Bind, stages: &[Var], qh: usize, qw: usize) -> Var {
    let mut resized = Vec::new();
    for (i, &stage) in stages.iter().enumerate() {
        let proj = conv_block(t, b, &format!("mask.proj{}", i + 1), stage, 1, 0);
        resized.push(t.resize_bilinear(proj, qh, qw));
    }
    let sum = t.add_many(&resized);
    conv_block(t, b, "mask.mix", sum, 1, 1)
}

/// MIR trunk on the fused feature: a convolution stack whose output is both
/// ROI-classified and supervised by an auxiliary semantic map.
pub fn mir_trunk(t: &mut Tape, b: &mut Bind, fused: Var, cfg: &ModelConfig) -> (Var, Var) {
    let mut cur = fused;
    for d in 0..cfg.tower_depth {
        cur = conv_relu(t, b, &format!("mir.conv{d}"), cur, 1, 1);
    }
    let aux = conv_block(t, b, "mir.aux", cur, 1, 0);
    (cur, aux)
}

/// MIR classification of one mask: region-aligned resampling of the trunk
/// feature over the mask's bounding box, a full-extent compression, and two
/// fully connected layers.
pub fn mir_classify(
    t: &mut Tape,
    b: &mut Bind,
    trunk: Var,
    bbox: [f64; 4],
    cfg: &ModelConfig,
) -> Var {
    let roi = t.roi_align(trunk, bbox, cfg.mir.roi_size);
    let flat = t.reshape(roi, &[cfg.mir.channels * cfg.mir.roi_size * cfg.mir.roi_size]);
    let w = b.var(t, "mir.compress.w");
    let bias = b.var(t, "mir.compress.b");
    let compressed = t.linear(flat, w, bias);
    let act = t.relu(compressed);
    let w1 = b.var(t, "mir.fc1.w");
    let b1 = b.var(t, "mir.fc1.b");
    let h1 = t.linear(act, w1, b1);
    let h1 = t.relu(h1);
    let w2 = b.var(t, "mir.fc2.w");
    let b2 = b.var(t, "mir.fc2.b");
    t.linear(h1, w2, b2)
}

// ---------------------------------------------------------------------------
// Model

/// Output variables of one forward pass.
pub struct HeadVars {
    pub h_center: Var,
    pub m_offset: Var,
    pub h_part: Vec<Var>,
    pub f_kernel: Vec<Var>,
    pub f_mask: Var,
    pub fused: Var,
}

pub struct ForwardPass<'p> {
    pub tape: Tape,
    pub vars: HeadVars,
    pub bind: Bind<'p>,
}

/// Plain-array head outputs, the decoder's input. Probability maps are
/// post-sigmoid and live in (0, 1).
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// (S, S).
    pub h_center: Array2<f64>,
    /// (2*C_P, S, S).
    pub m_offset: Array3<f64>,
    /// Per level (C_P, S_l, S_l).
    pub h_part: Vec<Array3<f64>>,
    /// Per level (C_K, S_l, S_l).
    pub f_kernel: Vec<Array3<f64>>,
    /// (C_K, H/4, W/4).
    pub f_mask: Array3<f64>,
    /// (fusion + 2, S, S); input of the MIR trunk.
    pub fused: Array3<f64>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub grid: GridSpec,
    pub params: NetworkParams,
    forward_count: AtomicU64,
}

impl Model {
    pub fn new(cfg: ModelConfig, grid: GridSpec, params: NetworkParams) -> Model {
        Model {
            cfg,
            grid,
            params,
            forward_count: AtomicU64::new(0),
        }
    }

    pub fn init(cfg: &Config, seed: u64) -> Model {
        Model::new(
            cfg.model.clone(),
            cfg.grid.clone(),
            NetworkParams::init(&cfg.model, seed),
        )
    }

    /// Forward passes run since construction (or the last reset).
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    /// Build the full forward graph for one (3, H, W) image in [-0.5, 0.5].
    pub fn forward(&self, image: &Array3<f64>) -> Result<ForwardPass<'_>, NetError> {
        let (_, h, w) = image.dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(NetError::BadInputSize { h, w });
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);

        let mut t = Tape::new();
        let mut bind = Bind::new(&self.params);
        let img = t.input3(image.clone());

        let stages = backbone(&mut t, &mut bind, img);
        let pyramid = fpn(&mut t, &mut bind, &stages);
        let f_mask = mask_feature(&mut t, &mut bind, &stages, h / 4, w / 4);

        let s = self.grid.human_grid;
        let fused = fuse_and_coord(&mut t, &mut bind, &pyramid, s);
        let h_center = center_head(&mut t, &mut bind, fused, &self.cfg);
        let group = (self.cfg.resolved_fusion_channels() + 2) / self.cfg.num_part_classes;
        let m_offset = offset_head(&mut t, &mut bind, fused, &self.cfg, group);

        let mut h_part = Vec::new();
        let mut f_kernel = Vec::new();
        for (level, lv) in self.grid.levels.iter().enumerate() {
            let (heat, kernels) =
                part_head(&mut t, &mut bind, pyramid[level], lv.grid, f_mask, &self.cfg);
            let _ = level;
            h_part.push(heat);
            f_kernel.push(kernels);
        }

        Ok(ForwardPass {
            tape: t,
            vars: HeadVars {
                h_center,
                m_offset,
                h_part,
                f_kernel,
                f_mask,
                fused,
            },
            bind,
        })
    }

    /// Forward pass returning plain arrays for decoding.
    pub fn head_outputs(&self, image: &Array3<f64>) -> Result<HeadOutputs, NetError> {
        let fp = self.forward(image)?;
        let t = &fp.tape;
        let center3 = t.value3(fp.vars.h_center);
        let (_, s0, s1) = center3.dim();
        let h_center = center3
            .into_shape_with_order((s0, s1))
            .expect("single channel");
        Ok(HeadOutputs {
            h_center,
            m_offset: t.value3(fp.vars.m_offset),
            h_part: fp.vars.h_part.iter().map(|&v| t.value3(v)).collect(),
            f_kernel: fp.vars.f_kernel.iter().map(|&v| t.value3(v)).collect(),
            f_mask: t.value3(fp.vars.f_mask),
            fused: t.value3(fp.vars.fused),
        })
    }
}

/// RGB (H, W, 3) u8 raster to a (3, H, W) tensor in [-0.5, 0.5].
pub fn image_to_tensor(image: &ndarray::Array3<u8>) -> Array3<f64> {
    let (h, w, _) = image.dim();
    Array3::from_shape_fn((3, h, w), |(c, r, cc)| {
        image[(r, cc, c)] as f64 / 255.0 - 0.5
    })
}

/// Apply one dynamic kernel to the mask feature: per-pixel inner product
/// followed by a sigmoid.
pub fn dynamic_mask(kernel: &Array1<f64>, f_mask: &Array3<f64>) -> Result<Array2<f64>, NetError> {
    let (c, h, w) = f_mask.dim();
    if kernel.len() != c {
        return Err(NetError::KernelLength {
            expected: c,
            got: kernel.len(),
        });
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for cc in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += kernel[ch] * f_mask[(ch, r, cc)];
            }
            out[(r, cc)] = if acc >= 0.0 {
                1.0 / (1.0 + (-acc).exp())
            } else {
                acc.exp() / (1.0 + acc.exp())
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny_config() -> Config {
        let mut cfg = Config::from_toml(
            "[grid]\ngrids = [8, 7, 6, 5, 4]\nhuman_grid = 8\n\
             [model]\nnum_part_classes = 3\nkernel_channels = 8\nbackbone_width = 4\n\
             fpn_channels = 4\nhead_channels = 6\ntower_depth = 1\n\
             [model.mir]\nroi_size = 4\nchannels = 4\nfc_dim = 8\n",
        )
        .unwrap();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn pyramid_strides_for_256() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 0);
        let image = Array3::<f64>::zeros((3, 256, 256));
        let fp = model.forward(&image).unwrap();
        let sizes: Vec<(usize, usize)> = (0..5)
            .map(|i| {
                let v = fp.tape.value3(fp.vars.h_part[i]);
                (v.dim().1, v.dim().2)
            })
            .collect();
        // Heads live on the level grids.
        assert_eq!(sizes, vec![(8, 8), (7, 7), (6, 6), (5, 5), (4, 4)]);
        // F_Mask is quarter resolution.
        assert_eq!(fp.tape.value3(fp.vars.f_mask).dim(), (8, 64, 64));
    }

    #[test]
    fn backbone_feature_strides() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 0);
        let image = Array3::<f64>::zeros((3, 256, 256));
        let mut t = Tape::new();
        let mut bind = Bind::new(&model.params);
        let img = t.input3(image);
        let stages = backbone(&mut t, &mut bind, img);
        let pyr = fpn(&mut t, &mut bind, &stages);
        let spatial: Vec<usize> = pyr.iter().map(|&f| t.value3(f).dim().1).collect();
        assert_eq!(spatial, vec![64, 32, 16, 8, 4]);
        for &f in &pyr {
            assert_eq!(t.value3(f).dim().0, cfg.model.fpn_channels);
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 0);
        let image = Array3::<f64>::zeros((3, 100, 128));
        assert!(matches!(
            model.forward(&image),
            Err(NetError::BadInputSize { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 3);
        let image = Array3::from_shape_fn((3, 64, 64), |(c, r, w)| {
            ((c + 2 * r + 3 * w) % 17) as f64 / 17.0 - 0.5
        });
        let a = model.head_outputs(&image).unwrap();
        let b = model.head_outputs(&image).unwrap();
        assert_eq!(a.h_center, b.h_center);
        assert_eq!(a.m_offset, b.m_offset);
        assert_eq!(a.f_mask, b.f_mask);
        for (x, y) in a.h_part.iter().zip(&b.h_part) {
            assert_eq!(x, y);
        }
        assert_eq!(model.forward_count(), 2);
    }

    #[test]
    fn coordinate_channels_span_unit_box() {
        let coords = coord_channels(8, 8);
        assert_eq!(coords[(0, 0, 0)], -1.0);
        assert_eq!(coords[(1, 0, 0)], -1.0);
        assert_eq!(coords[(0, 7, 7)], 1.0);
        assert_eq!(coords[(1, 7, 7)], 1.0);
        assert_eq!(coords[(0, 0, 7)], 1.0);
        assert_eq!(coords[(1, 0, 7)], -1.0);
    }

    #[test]
    fn zero_params_give_flat_heads() {
        let cfg = tiny_config();
        let model = Model::new(
            cfg.model.clone(),
            cfg.grid.clone(),
            NetworkParams::zeros(&cfg.model),
        );
        let image = Array3::from_shape_fn((3, 64, 64), |(c, r, w)| {
            ((c * r + w) % 7) as f64 / 7.0 - 0.5
        });
        let out = model.head_outputs(&image).unwrap();
        // Zero logits -> sigmoid 0.5 everywhere.
        assert!(out.h_center.iter().all(|&v| v == 0.5));
        // Zero parameters -> zero offsets.
        assert!(out.m_offset.iter().all(|&v| v == 0.0));
        // All-zero mask projections -> all-zero mask feature (bias is zero).
        assert!(out.f_mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offset_branches_split_fused_feature() {
        let cfg = tiny_config();
        let fusion = cfg.model.resolved_fusion_channels();
        assert_eq!((fusion + 2) % cfg.model.num_part_classes, 0);
        let model = Model::init(&cfg, 1);
        let image = Array3::<f64>::zeros((3, 64, 64));
        let fp = model.forward(&image).unwrap();
        let off = fp.tape.value3(fp.vars.m_offset);
        assert_eq!(off.dim().0, 2 * cfg.model.num_part_classes);
    }

    #[test]
    fn fused_feature_constant_in_interior_for_constant_pyramid() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 2);
        let mut t = Tape::new();
        let mut bind = Bind::new(&model.params);
        let pyramid: Vec<Var> = [(16usize, 0.3), (8, -0.2), (4, 0.7), (2, 0.1), (1, 0.5)]
            .iter()
            .map(|&(side, v)| {
                t.input3(Array3::from_elem(
                    (cfg.model.fpn_channels, side, side),
                    v,
                ))
            })
            .collect();
        let fused = fuse_and_coord(&mut t, &mut bind, &pyramid, 8);
        let v = t.value3(fused);
        let c_total = v.dim().0;
        // Interior cells (away from the zero-padded convolution border) are
        // spatially constant on every non-coordinate channel.
        for ch in 0..c_total - 2 {
            let reference = v[(ch, 3, 3)];
            for r in 1..7 {
                for c in 1..7 {
                    assert!((v[(ch, r, c)] - reference).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn part_head_parameters_are_shared_across_levels() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 5);
        let image = Array3::from_shape_fn((3, 64, 64), |(c, r, w)| {
            ((c + r * w) % 13) as f64 / 13.0 - 0.5
        });
        let fp = model.forward(&image).unwrap();
        // Re-run the shared head on the levels in reverse order; per-level
        // outputs must be unchanged.
        let mut t = Tape::new();
        let mut bind = Bind::new(&model.params);
        let img = t.input3(image);
        let stages = backbone(&mut t, &mut bind, img);
        let pyramid = fpn(&mut t, &mut bind, &stages);
        let f_mask = mask_feature(&mut t, &mut bind, &stages, 16, 16);
        for level in (0..5).rev() {
            let (heat, _) = part_head(
                &mut t,
                &mut bind,
                pyramid[level],
                model.grid.grid(level),
                f_mask,
                &cfg.model,
            );
            assert_eq!(t.value3(heat), fp.tape.value3(fp.vars.h_part[level]));
        }
    }

    #[test]
    fn mask_feature_linearity_probe() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 7);
        let widths = stage_widths(&cfg.model);
        let mut t = Tape::new();
        let mut bind = Bind::new(&model.params);
        let sizes = [32usize, 16, 8, 4, 2];
        let stages: Vec<Var> = (0..5)
            .map(|i| {
                t.input3(Array3::from_shape_fn(
                    (widths[i], sizes[i], sizes[i]),
                    |(c, r, w)| ((c + r + w + i) % 5) as f64 * 0.1,
                ))
            })
            .collect();
        let fm1_var = mask_feature(&mut t, &mut bind, &stages, 16, 16);
        let fm1 = t.value3(fm1_var);
        // Double one stage: the summed feature must change.
        let doubled = t.value3(stages[2]).mapv(|v| v * 2.0);
        let mut stages2 = stages.clone();
        stages2[2] = t.input3(doubled);
        let fm2_var = mask_feature(&mut t, &mut bind, &stages2, 16, 16);
        let fm2 = t.value3(fm2_var);
        assert!(fm1.iter().zip(fm2.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn dynamic_mask_against_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let f = Array3::from_shape_fn((8, 10, 9), |_| rng.gen_range(-2.0..2.0));
        let k = Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let got = dynamic_mask(&k, &f).unwrap();
        for r in 0..10 {
            for c in 0..9 {
                let mut acc = 0.0;
                for ch in 0..8 {
                    acc += k[ch] * f[(ch, r, c)];
                }
                let expect = 1.0 / (1.0 + (-acc as f64).exp());
                assert!((got[(r, c)] - expect).abs() < 1e-6);
            }
        }
        // Zero kernel -> uniform 0.5.
        let zero = dynamic_mask(&Array1::zeros(8), &f).unwrap();
        assert!(zero.iter().all(|&v| v == 0.5));
        // Length mismatch is an error.
        assert!(dynamic_mask(&Array1::zeros(5), &f).is_err());
    }

    #[test]
    fn rfr_uniform_attention_pools_the_mean() {
        let mut t = Tape::new();
        let g = Array3::from_shape_fn((3, 4, 4), |(c, r, w)| (c + r * w) as f64 * 0.25);
        let gv = t.input3(g.clone());
        // Spatially constant mask feature -> every attention row is uniform.
        let f = t.input3(Array3::from_elem((5, 4, 4), 0.8));
        let refined_var = rfr_refine(&mut t, gv, f);
        let refined = t.value3(refined_var);
        for ch in 0..3 {
            let mean: f64 = g.index_axis(ndarray::Axis(0), ch).mean().unwrap();
            for r in 0..4 {
                for c in 0..4 {
                    let delta = refined[(ch, r, c)] - g[(ch, r, c)];
                    assert!((delta - mean).abs() < 1e-9, "pooled term should be the mean");
                }
            }
        }
    }

    #[test]
    fn rfr_orthogonal_features_peak_at_self() {
        // One-hot mask features: cosine similarity is 1 on the diagonal and 0
        // elsewhere, so pooling weights are sigmoid(1) for self, sigmoid(0)
        // otherwise.
        let n = 9;
        let mut t = Tape::new();
        let g = Array3::from_shape_fn((2, 3, 3), |(c, r, w)| (1 + c + 2 * r + 3 * w) as f64);
        let gv = t.input3(g.clone());
        let f = Array3::from_shape_fn((n, 3, 3), |(ch, r, w)| {
            if ch == r * 3 + w {
                2.0
            } else {
                0.0
            }
        });
        let fv = t.input3(f);
        let refined_var = rfr_refine(&mut t, gv, fv);
        let refined = t.value3(refined_var);
        let s1 = 1.0 / (1.0 + (-1.0f64).exp());
        let s0 = 0.5;
        for ch in 0..2 {
            let total: f64 = g.index_axis(ndarray::Axis(0), ch).sum();
            for r in 0..3 {
                for c in 0..3 {
                    let gij = g[(ch, r, c)];
                    let expect = gij + (s1 * gij + s0 * (total - gij)) / (s1 + s0 * (n - 1) as f64);
                    assert!((refined[(ch, r, c)] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mir_logits_depend_only_on_bbox() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 9);
        let fused_ch = cfg.model.resolved_fusion_channels() + 2;
        let fused = Array3::from_shape_fn((fused_ch, 8, 8), |(c, r, w)| {
            ((c + r + w) % 9) as f64 * 0.2 - 0.5
        });
        let logits_for = |bbox: [f64; 4]| {
            let mut t = Tape::new();
            let mut bind = Bind::new(&model.params);
            let fv = t.input3(fused.clone());
            let (trunk, _) = mir_trunk(&mut t, &mut bind, fv, &cfg.model);
            let l = mir_classify(&mut t, &mut bind, trunk, bbox, &cfg.model);
            t.value(l).iter().copied().collect::<Vec<f64>>()
        };
        let a = logits_for([1.0, 2.0, 6.0, 7.0]);
        let b = logits_for([1.0, 2.0, 6.0, 7.0]);
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.model.num_part_classes);
        let c = logits_for([0.0, 0.0, 8.0, 8.0]);
        assert_ne!(a, c);
    }

    #[test]
    fn params_shape_is_pure_function_of_config() {
        let cfg = tiny_config();
        let a = NetworkParams::init(&cfg.model, 0);
        let b = NetworkParams::init(&cfg.model, 999);
        let names_a: Vec<_> = a.arrays.keys().collect();
        let names_b: Vec<_> = b.arrays.keys().collect();
        assert_eq!(names_a, names_b);
        for (k, v) in &a.arrays {
            assert_eq!(v.shape(), b.arrays[k].shape());
        }
        assert_eq!(a.num_scalars(), b.num_scalars());
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let cfg = tiny_config();
        let params = NetworkParams::init(&cfg.model, 17);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("model.ckpt");
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (back, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(params, back);
        assert_eq!(cfg, cfg2);
    }
}
