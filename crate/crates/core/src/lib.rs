//! Single-stage multi-human parsing on deterministic synthetic scenes.
//!
//! A human is represented as a point set: the barycenter of its visible union
//! mask plus per-part barycenters reached through center-based offset vectors.
//! One forward pass of a small convolutional network produces everything the
//! decoder needs — a center heatmap, offset maps, per-level part heatmaps and
//! dynamic mask kernels, and a shared mask feature — so inference never runs
//! the network per instance.
//!
//! Module map:
//! - [`config`]: grid layout, model hyperparameters, training schedule.
//! - [`synth`]: deterministic blob-human scene generator.
//! - [`dataset`]: on-disk scene schema (PNG masks + JSON index).
//! - [`targets`]: supervision targets (center regions, offsets, mask crops).
//! - [`autodiff`]: the reverse-mode tape the network is built on.
//! - [`network`]: backbone, FPN, heads, mask features, RFR, MIR.
//! - [`losses`]: focal / smooth-l1 / dice components and the weighted total.
//! - [`decode`]: single-pass inference and matrix NMS.
//! - [`metrics`]: AP^p, AP^p_vol and PCP_50.
//! - [`trainer`]: SGD loop, MIR fine-tuning, checkpoints.
//! - [`oracle`]: head outputs constructed from targets, for decoder validation.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod synth;
pub mod targets;
pub mod trainer;
