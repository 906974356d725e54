//! On-disk dataset format, loaders, deterministic splits, and corpus
//! statistics.
//!
//! Layout: `<root>/manifest.json` plus one directory per sample holding four
//! 8-bit PNGs (composite, the two masks, ground truth), the two environment
//! maps as raw little-endian `f32` blobs, and a `meta.json` sidecar recording
//! shapes. LDR images are display-referred so PNG quantization is applied
//! once at write time; environment maps are unbounded radiance and keep full
//! float precision. `read_sample(write_sample(t))` reproduces the quantized
//! tuple bit-for-bit.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EnvMap, Image, Mask, SixTuple};
use crate::{Error, Result};

pub const MANIFEST_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    /// Sample ids in generation order; loaders follow this order.
    pub sample_ids: Vec<String>,
    pub image_side: usize,
    pub envmap_shape: (usize, usize),
    /// Digest of the generator configuration that produced the set.
    pub generator_config_digest: String,
    /// For illumination pairs: maps each sample to its partner. Symmetric,
    /// no fixed points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_map: Option<BTreeMap<String, String>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let ids: HashSet<&str> = self.sample_ids.iter().map(String::as_str).collect();
        if ids.len() != self.sample_ids.len() {
            return Err(Error::Data("manifest sample ids are not unique".into()));
        }
        if let Some(pairs) = &self.pair_map {
            for (a, b) in pairs {
                if a == b {
                    return Err(Error::Data(format!("pair map fixes sample {a} to itself")));
                }
                if !ids.contains(a.as_str()) || !ids.contains(b.as_str()) {
                    return Err(Error::Data(format!("pair map references unknown sample {a} or {b}")));
                }
                if pairs.get(b) != Some(a) {
                    return Err(Error::Data(format!("pair map is not symmetric at {a} <-> {b}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-sample sidecar: just enough to validate shapes on read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SampleMeta {
    sample_id: String,
    image_side: usize,
    envmap_shape: (usize, usize),
}

// ---------------------------------------------------------------------------
// Manifest and sample I/O
// ---------------------------------------------------------------------------

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("{}: serialize failed: {e}", path.display())))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&body)
        .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))?;
    manifest.validate()?;
    Ok(manifest)
}

fn sample_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

fn save_image_png(path: &Path, image: &Image) -> Result<()> {
    let side = image.side();
    let mut raw = Vec::with_capacity(side * side * 3);
    for row in 0..side {
        for col in 0..side {
            for ch in 0..3 {
                let v = image.pixels[[ch, row, col]].clamp(0.0, 1.0);
                raw.push((v * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(side as u32, side as u32, raw)
        .expect("buffer sized to image dimensions");
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: png write failed: {e}", path.display())))
}

/// Load an RGB PNG of the given side into a float image in [0, 1].
pub fn load_image_png(path: &Path, side: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: png read failed: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != side || img.height() as usize != side {
        return Err(Error::Data(format!(
            "{}: image is {}x{}, expected {side}x{side}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut pixels = Array3::zeros((3, side, side));
    for row in 0..side {
        for col in 0..side {
            let px = img.get_pixel(col as u32, row as u32);
            for ch in 0..3 {
                pixels[[ch, row, col]] = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(Image { pixels })
}

fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let side = mask.side();
    let raw: Vec<u8> = mask.pixels.iter().map(|&v| if v == 1.0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(side as u32, side as u32, raw)
        .expect("buffer sized to mask dimensions");
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: png write failed: {e}", path.display())))
}

/// Load a binary mask PNG of the given side; pixels must be 0 or 255.
pub fn load_mask_png(path: &Path, side: usize) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: png read failed: {e}", path.display())))?
        .to_luma8();
    if img.width() as usize != side || img.height() as usize != side {
        return Err(Error::Data(format!(
            "{}: mask is {}x{}, expected {side}x{side}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut pixels = Array2::zeros((side, side));
    for row in 0..side {
        for col in 0..side {
            pixels[[row, col]] = match img.get_pixel(col as u32, row as u32).0[0] {
                0 => 0.0,
                255 => 1.0,
                other => {
                    return Err(Error::Data(format!(
                        "{}: mask pixel ({row},{col}) has non-binary value {other}",
                        path.display()
                    )))
                }
            };
        }
    }
    Ok(Mask { pixels })
}

fn save_envmap_f32(path: &Path, map: &EnvMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.radiance.len() * 4);
    for &v in map.radiance.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_envmap_f32(path: &Path, shape: (usize, usize)) -> Result<EnvMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (h, w) = shape;
    let expected = 3 * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: env map holds {} bytes, expected {expected} for shape (3, {h}, {w})",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let radiance = Array3::from_shape_vec((3, h, w), values)
        .expect("length checked against shape");
    Ok(EnvMap { radiance })
}

/// Persist one six-tuple under `<root>/<sample_id>/`. LDR images are
/// quantized to 8 bits here, exactly once.
pub fn write_sample(root: &Path, tuple: &SixTuple) -> Result<()> {
    let dir = sample_dir(root, &tuple.sample_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let side = tuple.composite.side();
    let (h, w) = (tuple.object_illum.height(), tuple.object_illum.width());

    save_image_png(&dir.join("composite.png"), &tuple.composite)?;
    save_mask_png(&dir.join("object_mask.png"), &tuple.object_mask)?;
    save_mask_png(&dir.join("background_mask.png"), &tuple.background_mask)?;
    save_image_png(&dir.join("gt.png"), &tuple.gt_harmonized)?;
    save_envmap_f32(&dir.join("obj_illum.f32"), &tuple.object_illum)?;
    save_envmap_f32(&dir.join("bg_illum.f32"), &tuple.background_illum)?;

    let meta = SampleMeta {
        sample_id: tuple.sample_id.clone(),
        image_side: side,
        envmap_shape: (h, w),
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Data(format!("{}: serialize failed: {e}", meta_path.display())))?;
    fs::write(&meta_path, body).map_err(|e| Error::io(&meta_path, e))
}

/// Load one six-tuple written by [`write_sample`].
pub fn read_sample(root: &Path, id: &str) -> Result<SixTuple> {
    let dir = sample_dir(root, id);
    let meta_path = dir.join("meta.json");
    let body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&body)
        .map_err(|e| Error::Data(format!("{}: malformed sidecar: {e}", meta_path.display())))?;
    if meta.sample_id != id {
        return Err(Error::Data(format!(
            "{}: sidecar names sample {}, expected {id}",
            meta_path.display(),
            meta.sample_id
        )));
    }
    let side = meta.image_side;
    Ok(SixTuple {
        sample_id: meta.sample_id,
        composite: load_image_png(&dir.join("composite.png"), side)?,
        object_mask: load_mask_png(&dir.join("object_mask.png"), side)?,
        background_mask: load_mask_png(&dir.join("background_mask.png"), side)?,
        object_illum: load_envmap_f32(&dir.join("obj_illum.f32"), meta.envmap_shape)?,
        background_illum: load_envmap_f32(&dir.join("bg_illum.f32"), meta.envmap_shape)?,
        gt_harmonized: load_image_png(&dir.join("gt.png"), side)?,
    })
}

/// Load every sample named by the manifest, in manifest order.
pub fn load_all(root: &Path, manifest: &DatasetManifest) -> Result<Vec<SixTuple>> {
    manifest.sample_ids.iter().map(|id| read_sample(root, id)).collect()
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Deterministic train/test split. Paired samples always land on the same
/// side; the unit of shuffling is the pair (or the singleton).
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    manifest.validate()?;

    let empty = BTreeMap::new();
    let pairs = manifest.pair_map.as_ref().unwrap_or(&empty);
    let mut seen: HashSet<&str> = HashSet::new();
    let mut units: Vec<Vec<String>> = Vec::new();
    for id in &manifest.sample_ids {
        if seen.contains(id.as_str()) {
            continue;
        }
        seen.insert(id);
        match pairs.get(id) {
            Some(partner) => {
                seen.insert(partner);
                units.push(vec![id.clone(), partner.clone()]);
            }
            None => units.push(vec![id.clone()]),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let n_train_units = (train_fraction * units.len() as f64).round() as usize;
    let n_train_units = n_train_units.min(units.len());
    let (train_units, test_units) = units.split_at(n_train_units);
    let flatten = |us: &[Vec<String>]| us.iter().flatten().cloned().collect::<Vec<_>>();
    Ok((flatten(train_units), flatten(test_units)))
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Ascending bin edges, one more than `counts`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Corpus statistics: area-ratio histograms and a map of how often each pixel
/// belongs to the brightest decile of its ground-truth image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub object_ratio_histogram: Histogram,
    pub shadow_ratio_histogram: Histogram,
    pub illum_probability_map: Array2<f32>,
}

/// 20 uniform bins over `[0, 1]`.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

fn histogram(values: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("histogram edges must be ascending, got {edges:?}")));
    }
    let mut counts = vec![0u64; edges.len() - 1];
    for &v in values {
        // `partition_point` finds the first edge > v; clamp keeps every value
        // counted even if it falls outside the edge range.
        let bin = edges.partition_point(|&e| e <= v).saturating_sub(1).min(counts.len() - 1);
        counts[bin] += 1;
    }
    Ok(Histogram { edges: edges.to_vec(), counts })
}

/// Shadow support: pixels outside the object mask where composite and ground
/// truth disagree. Exact because the generator shares the background buffer.
fn shadow_ratio(tuple: &SixTuple) -> f64 {
    let side = tuple.composite.side();
    let mut count = 0usize;
    for row in 0..side {
        for col in 0..side {
            if tuple.object_mask.pixels[[row, col]] == 0.0 {
                let differs = (0..3).any(|ch| {
                    tuple.composite.pixels[[ch, row, col]]
                        != tuple.gt_harmonized.pixels[[ch, row, col]]
                });
                if differs {
                    count += 1;
                }
            }
        }
    }
    count as f64 / (side * side) as f64
}

/// Binary map of the brightest tenth of `image` (per-pixel channel mean,
/// ties included at the threshold).
fn brightest_decile(image: &Image) -> Array2<f32> {
    let side = image.side();
    let mut lum = Array2::<f64>::zeros((side, side));
    for row in 0..side {
        for col in 0..side {
            let s: f32 = (0..3).map(|ch| image.pixels[[ch, row, col]]).sum();
            lum[[row, col]] = s as f64 / 3.0;
        }
    }
    let mut sorted: Vec<f64> = lum.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("luminance is finite"));
    let k = (side * side / 10).max(1);
    let threshold = sorted[k - 1];
    lum.mapv(|v| if v >= threshold { 1.0f32 } else { 0.0 })
}

/// Aggregate statistics over a corpus. All samples must share one image side.
pub fn compute_stats<'a, I>(samples: I, edges: &[f64]) -> Result<DatasetStats>
where
    I: IntoIterator<Item = &'a SixTuple>,
{
    let mut object_ratios = Vec::new();
    let mut shadow_ratios = Vec::new();
    let mut prob: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for tuple in samples {
        let side = tuple.composite.side();
        let accum = prob.get_or_insert_with(|| Array2::zeros((side, side)));
        if accum.dim() != (side, side) {
            return Err(Error::Data(format!(
                "sample {} has side {side}, expected {}",
                tuple.sample_id,
                accum.dim().0
            )));
        }
        object_ratios.push(tuple.object_mask.area_ratio());
        shadow_ratios.push(shadow_ratio(tuple));
        accum.zip_mut_with(&brightest_decile(&tuple.gt_harmonized), |a, &b| *a += b as f64);
        count += 1;
    }
    let prob = prob.ok_or_else(|| Error::Data("compute_stats needs at least one sample".into()))?;
    Ok(DatasetStats {
        object_ratio_histogram: histogram(&object_ratios, edges)?,
        shadow_ratio_histogram: histogram(&shadow_ratios, edges)?,
        illum_probability_map: prob.mapv(|v| (v / count as f64) as f32),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_six_tuple, sample_paired_specs, sample_spec};
    use tempfile::TempDir;

    fn tuple_for(seed: u64) -> SixTuple {
        render_six_tuple(&sample_spec(seed, 64).unwrap()).unwrap()
    }

    fn manifest_for(ids: Vec<String>, pair_map: Option<BTreeMap<String, String>>) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION.into(),
            sample_ids: ids,
            image_side: 64,
            envmap_shape: (16, 32),
            generator_config_digest: "0".repeat(16),
            pair_map,
        }
    }

    #[test]
    fn sample_round_trip_is_exact_after_one_quantization() {
        let dir = TempDir::new().unwrap();
        for seed in 0..5 {
            let tuple = tuple_for(seed);
            write_sample(dir.path(), &tuple).unwrap();
            let loaded = read_sample(dir.path(), &tuple.sample_id).unwrap();
            assert_eq!(loaded.composite.pixels, tuple.composite.quantized().pixels);
            assert_eq!(loaded.gt_harmonized.pixels, tuple.gt_harmonized.quantized().pixels);
            assert_eq!(loaded.object_mask.pixels, tuple.object_mask.pixels);
            assert_eq!(loaded.background_mask.pixels, tuple.background_mask.pixels);
            assert_eq!(loaded.object_illum.radiance, tuple.object_illum.radiance);
            assert_eq!(loaded.background_illum.radiance, tuple.background_illum.radiance);
            // A second round trip changes nothing: quantization is idempotent.
            write_sample(dir.path(), &loaded).unwrap();
            let again = read_sample(dir.path(), &tuple.sample_id).unwrap();
            assert_eq!(again.composite.pixels, loaded.composite.pixels);
        }
    }

    #[test]
    fn truncated_envmap_errors_with_path() {
        let dir = TempDir::new().unwrap();
        let tuple = tuple_for(1);
        write_sample(dir.path(), &tuple).unwrap();
        let victim = dir.path().join(&tuple.sample_id).join("obj_illum.f32");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
        let err = read_sample(dir.path(), &tuple.sample_id).unwrap_err();
        assert!(err.to_string().contains("obj_illum.f32"), "error must name the file: {err}");
    }

    #[test]
    fn malformed_sidecar_errors_with_path() {
        let dir = TempDir::new().unwrap();
        let tuple = tuple_for(2);
        write_sample(dir.path(), &tuple).unwrap();
        let victim = dir.path().join(&tuple.sample_id).join("meta.json");
        std::fs::write(&victim, "{not json").unwrap();
        let err = read_sample(dir.path(), &tuple.sample_id).unwrap_err();
        assert!(err.to_string().contains("meta.json"), "error must name the sidecar: {err}");
    }

    #[test]
    fn loader_follows_manifest_order() {
        let dir = TempDir::new().unwrap();
        let tuples: Vec<SixTuple> = (0..10).map(tuple_for).collect();
        for t in &tuples {
            write_sample(dir.path(), t).unwrap();
        }
        // Deliberately scrambled order relative to generation.
        let mut ids: Vec<String> = tuples.iter().map(|t| t.sample_id.clone()).collect();
        ids.reverse();
        let manifest = manifest_for(ids.clone(), None);
        write_manifest(dir.path(), &manifest).unwrap();
        let loaded = load_all(dir.path(), &read_manifest(dir.path()).unwrap()).unwrap();
        assert_eq!(loaded.len(), 10);
        for (tuple, id) in loaded.iter().zip(&ids) {
            assert_eq!(&tuple.sample_id, id);
        }
    }

    #[test]
    fn manifest_rejects_broken_pair_maps() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        // Fixed point.
        let mut fixed = BTreeMap::new();
        fixed.insert("s0".to_string(), "s0".to_string());
        assert!(manifest_for(ids.clone(), Some(fixed)).validate().is_err());
        // Asymmetric.
        let mut asym = BTreeMap::new();
        asym.insert("s0".to_string(), "s1".to_string());
        assert!(manifest_for(ids.clone(), Some(asym)).validate().is_err());
        // Unknown id.
        let mut unknown = BTreeMap::new();
        unknown.insert("s0".to_string(), "zz".to_string());
        unknown.insert("zz".to_string(), "s0".to_string());
        assert!(manifest_for(ids.clone(), Some(unknown)).validate().is_err());
        // Healthy involution.
        let mut good = BTreeMap::new();
        good.insert("s0".to_string(), "s1".to_string());
        good.insert("s1".to_string(), "s0".to_string());
        good.insert("s2".to_string(), "s3".to_string());
        good.insert("s3".to_string(), "s2".to_string());
        assert!(manifest_for(ids, Some(good)).validate().is_ok());
    }

    #[test]
    fn split_100_unpaired_at_80_percent() {
        let ids: Vec<String> = (0..100).map(|i| format!("s{i:03}")).collect();
        let manifest = manifest_for(ids.clone(), None);
        let (train, test) = split(&manifest, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let train_set: HashSet<_> = train.iter().collect();
        let test_set: HashSet<_> = test.iter().collect();
        assert!(train_set.is_disjoint(&test_set));
        assert_eq!(train_set.len() + test_set.len(), 100);
        // Same seed, same split; different seed, (almost surely) different.
        let (train2, test2) = split(&manifest, 0.8, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = split(&manifest, 0.8, 8).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn split_keeps_pairs_together() {
        let ids: Vec<String> = (0..100).map(|i| format!("p{i:03}")).collect();
        let mut pairs = BTreeMap::new();
        for i in (0..100).step_by(2) {
            pairs.insert(format!("p{i:03}"), format!("p{:03}", i + 1));
            pairs.insert(format!("p{:03}", i + 1), format!("p{i:03}"));
        }
        let manifest = manifest_for(ids, Some(pairs.clone()));
        let (train, test) = split(&manifest, 0.8, 3).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let train_set: HashSet<_> = train.iter().cloned().collect();
        for (a, b) in &pairs {
            assert_eq!(
                train_set.contains(a),
                train_set.contains(b),
                "pair {a} <-> {b} must stay on one side"
            );
        }
    }

    #[test]
    fn split_properties_hold_across_sizes_and_seeds() {
        for n in [3usize, 10, 37] {
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let manifest = manifest_for(ids, None);
            for fraction in [0.2, 0.5, 0.8] {
                for seed in 0..3u64 {
                    let (train, test) = split(&manifest, fraction, seed).unwrap();
                    assert_eq!(train.len() + test.len(), n);
                    let t: HashSet<_> = train.iter().collect();
                    let s: HashSet<_> = test.iter().collect();
                    assert!(t.is_disjoint(&s));
                    let (train2, test2) = split(&manifest, fraction, seed).unwrap();
                    assert_eq!(train, train2);
                    assert_eq!(test, test2);
                }
            }
        }
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let manifest = manifest_for(vec!["a".into(), "b".into()], None);
        assert!(split(&manifest, 0.0, 0).is_err());
        assert!(split(&manifest, 1.0, 0).is_err());
        assert!(split(&manifest, -0.1, 0).is_err());
    }

    /// Synthetic tuple with an exact-ratio square object and a square shadow.
    fn synthetic_tuple(id: &str, side: usize, object_px: usize, shadow_px: usize) -> SixTuple {
        let mut object_mask = Mask::zeros(side);
        let mut taken = 0;
        'outer: for row in 0..side {
            for col in 0..side {
                if taken == object_px {
                    break 'outer;
                }
                object_mask.pixels[[row, col]] = 1.0;
                taken += 1;
            }
        }
        let composite = Image::constant(side, 0.5);
        let mut gt = composite.clone();
        // Shadow: darken pixels starting from the bottom-right corner,
        // far away from the object rows.
        let mut placed = 0;
        'outer2: for row in (0..side).rev() {
            for col in (0..side).rev() {
                if placed == shadow_px {
                    break 'outer2;
                }
                if object_mask.pixels[[row, col]] == 0.0 {
                    for ch in 0..3 {
                        gt.pixels[[ch, row, col]] = 0.25;
                    }
                    placed += 1;
                }
            }
        }
        SixTuple {
            sample_id: id.into(),
            background_mask: object_mask.complement(),
            object_mask,
            object_illum: EnvMap::zeros(4, 8),
            background_illum: EnvMap::zeros(4, 8),
            composite,
            gt_harmonized: gt,
        }
    }

    #[test]
    fn exact_ratio_objects_land_in_one_bin() {
        // 10% of a 20x20 image is 40 pixels.
        let tuples: Vec<SixTuple> =
            (0..8).map(|i| synthetic_tuple(&format!("t{i}"), 20, 40, 20)).collect();
        let stats = compute_stats(tuples.iter(), &default_bin_edges()).unwrap();
        let hist = &stats.object_ratio_histogram;
        assert_eq!(hist.counts.iter().sum::<u64>(), 8);
        // 0.10 falls in bin [0.10, 0.15) — bin index 2 of the 20-bin layout.
        assert_eq!(hist.counts[2], 8, "all mass in the bin containing 0.10: {:?}", hist.counts);
        // Shadow ratio 20/400 = 0.05 → bin [0.05, 0.10).
        assert_eq!(stats.shadow_ratio_histogram.counts[1], 8);
    }

    #[test]
    fn single_sample_probability_map_is_binary() {
        let tuple = tuple_for(4);
        let stats = compute_stats(std::iter::once(&tuple), &default_bin_edges()).unwrap();
        let map = &stats.illum_probability_map;
        assert!(map.iter().all(|&v| v == 0.0 || v == 1.0));
        let bright = map.iter().filter(|&&v| v == 1.0).count();
        // The decile region holds at least a tenth of the pixels (ties may
        // push it slightly over).
        assert!(bright >= 64 * 64 / 10, "{bright} bright pixels");
    }

    #[test]
    fn probability_map_stays_in_unit_range_and_counts_sum() {
        let tuples: Vec<SixTuple> = (0..6).map(tuple_for).collect();
        let stats = compute_stats(tuples.iter(), &default_bin_edges()).unwrap();
        assert!(stats.illum_probability_map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(stats.object_ratio_histogram.counts.iter().sum::<u64>(), 6);
        assert_eq!(stats.shadow_ratio_histogram.counts.iter().sum::<u64>(), 6);
        // Generator contract: object ratios inside [0.05, 0.3] — bins below
        // 0.05 and above 0.3 stay empty.
        let hist = &stats.object_ratio_histogram;
        assert_eq!(hist.counts[0], 0);
        for bin in 6..20 {
            assert_eq!(hist.counts[bin], 0, "bin {bin} should be empty: {:?}", hist.counts);
        }
    }

    #[test]
    fn compute_stats_rejects_empty_input() {
        assert!(compute_stats(std::iter::empty::<&SixTuple>(), &default_bin_edges()).is_err());
    }

    #[test]
    fn paired_generation_round_trips_with_manifest() {
        let dir = TempDir::new().unwrap();
        let (a, b) = sample_paired_specs(5, 64).unwrap();
        let ta = render_six_tuple(&a).unwrap();
        let tb = render_six_tuple(&b).unwrap();
        write_sample(dir.path(), &ta).unwrap();
        write_sample(dir.path(), &tb).unwrap();
        let mut pair_map = BTreeMap::new();
        pair_map.insert(ta.sample_id.clone(), tb.sample_id.clone());
        pair_map.insert(tb.sample_id.clone(), ta.sample_id.clone());
        let manifest =
            manifest_for(vec![ta.sample_id.clone(), tb.sample_id.clone()], Some(pair_map));
        write_manifest(dir.path(), &manifest).unwrap();
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(read, manifest);
        let loaded = load_all(dir.path(), &read).unwrap();
        assert_eq!(loaded.len(), 2);
    }
}
