//! Image-quality metrics (RMSE, PSNR, SSIM) and the evaluation harness that
//! scores a trained generator against a dataset.
//!
//! Every report carries an *identity baseline* — the same metrics computed on
//! the untouched composite — because a relighting model is only useful if it
//! beats leaving the image alone.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{Image, ModelConfig};
use crate::model::{Checkpoint, GeneratorNet};
use crate::nn::ParamSet;
use crate::store::read_sample;
use crate::{Error, Result};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian weighting std-dev inside the window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Luminance stabilizer factor (of dynamic range).
pub const SSIM_K1: f64 = 0.01;
/// Contrast stabilizer factor (of dynamic range).
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const DYNAMIC_RANGE: f64 = 1.0;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::Config(format!(
            "metric inputs must share a shape, got {:?} vs {:?}",
            a.pixels.shape(),
            b.pixels.shape()
        )));
    }
    Ok(())
}

fn mse(a: &Image, b: &Image) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.pixels.iter().zip(b.pixels.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / a.pixels.len() as f64
}

/// Root mean squared error over all pixels and channels.
pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(mse(a, b).sqrt())
}

/// Peak signal-to-noise ratio in decibels against the given peak value.
/// Identical images have zero error and report `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / m).log10())
}

/// Normalized 1-D Gaussian taps for the SSIM window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let center = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - center;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Valid-mode separable Gaussian filter: rows first, then columns. Output is
/// `(H - W + 1) x (W - W + 1)` for window side `W`.
fn gauss_filter_valid(x: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * x[[r, c + k]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[[r + k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Structural similarity: Gaussian-weighted 11x11 windows, stabilizers
/// `K1=0.01`/`K2=0.03` at dynamic range 1, averaged over every fully
/// contained window position and all channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let side = a.side();
    if side < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs a side of at least {SSIM_WINDOW}, got {side}"
        )));
    }
    let c1 = (SSIM_K1 * DYNAMIC_RANGE) * (SSIM_K1 * DYNAMIC_RANGE);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE) * (SSIM_K2 * DYNAMIC_RANGE);
    let taps = gaussian_taps();

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa = a.pixels.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let pb = b.pixels.index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let mu_a = gauss_filter_valid(&pa, &taps);
        let mu_b = gauss_filter_valid(&pb, &taps);
        let m_aa = gauss_filter_valid(&(&pa * &pa), &taps);
        let m_bb = gauss_filter_valid(&(&pb * &pb), &taps);
        let m_ab = gauss_filter_valid(&(&pa * &pb), &taps);
        for ((r, c), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[r, c]];
            let var_a = m_aa[[r, c]] - ma * ma;
            let var_b = m_bb[[r, c]] - mb * mb;
            let cov = m_ab[[r, c]] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// RMSE / PSNR / SSIM of one image pair. PSNR may be `f64::INFINITY`
/// (identical images); it serializes as JSON `null` and reads back as the
/// infinity sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub rmse: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// All three metrics for one pair.
pub fn metric_triple(a: &Image, b: &Image) -> Result<MetricTriple> {
    Ok(MetricTriple { rmse: rmse(a, b)?, psnr: psnr(a, b, DYNAMIC_RANGE)?, ssim: ssim(a, b)? })
}

/// Arithmetic component-wise mean. An infinite PSNR entry makes the mean
/// infinite, matching "any identical pair dominates".
pub fn mean_triple(items: &[MetricTriple]) -> Result<MetricTriple> {
    if items.is_empty() {
        return Err(Error::Data("cannot aggregate an empty metric list".into()));
    }
    let n = items.len() as f64;
    Ok(MetricTriple {
        rmse: items.iter().map(|t| t.rmse).sum::<f64>() / n,
        psnr: items.iter().map(|t| t.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|t| t.ssim).sum::<f64>() / n,
    })
}

/// Per-sample scores: the model output against ground truth, and the
/// untouched composite against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub relit: MetricTriple,
    pub baseline: MetricTriple,
}

/// Full evaluation readout, serialized as the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_digest: String,
    /// Metrics cover every pixel, not an object-centric crop.
    pub metric_region: String,
    pub per_sample: Vec<SampleMetrics>,
    /// Means of the relit-vs-gt column.
    pub aggregate: MetricTriple,
    /// Means of the composite-vs-gt column.
    pub baseline: MetricTriple,
}

/// Rebuild a generator and its parameters from a checkpoint, refusing
/// checkpoints written under a different configuration.
pub fn restore_generator(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<(GeneratorNet, ParamSet<f32>)> {
    let digest = cfg.digest();
    if ckpt.config_digest != digest {
        return Err(Error::Data(format!(
            "checkpoint digest {} does not match configuration digest {digest}",
            ckpt.config_digest
        )));
    }
    let net = GeneratorNet::new(cfg)?;
    let mut params: ParamSet<f32> = net.init_params(0);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let stored = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))?;
        let slot = params.get_mut(&name);
        if stored.shape() != slot.data.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                stored.shape(),
                slot.data.shape()
            )));
        }
        slot.data = stored.clone();
    }
    Ok((net, params))
}

/// Score a checkpoint on the given samples: per-sample metrics, aggregate
/// means, the identity baseline, and (optionally) side-by-side
/// composite | relit | ground-truth grids as PNGs.
pub fn evaluate(
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
    ids: &[String],
    data_root: &Path,
    grid_dir: Option<&Path>,
) -> Result<MetricReport> {
    if ids.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample id".into()));
    }
    let (net, params) = restore_generator(cfg, ckpt)?;
    if let Some(dir) = grid_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut per_sample = Vec::with_capacity(ids.len());
    for id in ids {
        let sample = read_sample(data_root, id)?;
        let out = net.infer(&params, &sample.composite, &sample.object_mask, &sample.background_mask)?;
        let relit = metric_triple(&out.relit, &sample.gt_harmonized)?;
        let baseline = metric_triple(&sample.composite, &sample.gt_harmonized)?;
        if let Some(dir) = grid_dir {
            let path = dir.join(format!("{id}.png"));
            write_comparison_grid(&path, &[&sample.composite, &out.relit, &sample.gt_harmonized])?;
        }
        per_sample.push(SampleMetrics { sample_id: id.clone(), relit, baseline });
    }
    let aggregate = mean_triple(&per_sample.iter().map(|s| s.relit).collect::<Vec<_>>())?;
    let baseline = mean_triple(&per_sample.iter().map(|s| s.baseline).collect::<Vec<_>>())?;
    Ok(MetricReport {
        config_digest: ckpt.config_digest.clone(),
        metric_region: "whole-image".into(),
        per_sample,
        aggregate,
        baseline,
    })
}

/// Write images side by side (left to right) as one 8-bit PNG.
pub fn write_comparison_grid(path: &Path, panels: &[&Image]) -> Result<()> {
    let side = panels.first().map(|p| p.side()).unwrap_or(0);
    if side == 0 || panels.iter().any(|p| p.side() != side) {
        return Err(Error::Config("grid panels must be non-empty and equally sized".into()));
    }
    let mut strip = Array3::<f32>::zeros((3, side, side * panels.len()));
    for (i, panel) in panels.iter().enumerate() {
        strip
            .slice_mut(ndarray::s![.., .., i * side..(i + 1) * side])
            .assign(&panel.pixels);
    }
    let mut raw = Vec::with_capacity(side * side * panels.len() * 3);
    for row in 0..side {
        for col in 0..side * panels.len() {
            for ch in 0..3 {
                raw.push((strip[[ch, row, col]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw((side * panels.len()) as u32, side as u32, raw)
        .expect("buffer sized to grid dimensions");
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: png write failed: {e}", path.display())))
}
