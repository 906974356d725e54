//! Core sample types and configuration shared by every stage of the pipeline.
//!
//! A training sample is a *six-tuple*: a composite image whose object was
//! pasted under the wrong light (and casts no shadow), the object / background
//! masks, the two ground-truth illumination environment maps, and the
//! harmonized target image. Invariants that every well-formed tuple obeys are
//! checked by [`validate_six_tuple`]; violations are returned as data rather
//! than as errors so callers can log or count them.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Square RGB image, channel-first layout `[3, side, side]`, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
}

impl Image {
    /// All-zero image with the given side length.
    pub fn zeros(side: usize) -> Self {
        Image { pixels: Array3::zeros((3, side, side)) }
    }

    /// Constant-valued image (used heavily by metric tests).
    pub fn constant(side: usize, value: f32) -> Self {
        Image { pixels: Array3::from_elem((3, side, side), value) }
    }

    pub fn from_pixels(pixels: Array3<f32>) -> Result<Self> {
        let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
        if c != 3 || h != w {
            return Err(Error::Data(format!(
                "image must be square with 3 channels, got [{c}, {h}, {w}]"
            )));
        }
        Ok(Image { pixels })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Snap every channel to the nearest 8-bit level. Storage is 8-bit PNG,
    /// so this is exactly the value a write/read round trip returns.
    pub fn quantized(&self) -> Image {
        Image { pixels: self.pixels.mapv(|v| quantize_unit(v)) }
    }
}

/// Quantize a `[0,1]` value to the nearest 8-bit level, expressed back in
/// `[0,1]`. Uses the identical arithmetic as the PNG reader so that
/// `read(write(x)) == x.quantized()` holds bit-exactly.
pub fn quantize_unit(v: f32) -> f32 {
    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    byte as f32 / 255.0
}

/// Binary mask over a square image: same side as the image, values in `{0,1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub pixels: Array2<f32>,
}

impl Mask {
    pub fn zeros(side: usize) -> Self {
        Mask { pixels: Array2::zeros((side, side)) }
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[0]
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1.0).count()
    }

    /// Foreground fraction of the whole frame.
    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / (self.side() * self.side()) as f64
    }

    /// Complement mask (1 where this mask is 0).
    pub fn complement(&self) -> Mask {
        Mask { pixels: self.pixels.mapv(|v| 1.0 - v) }
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Equirectangular radiance map, `[3, height, width]` with `width == 2*height`.
///
/// Row `r` covers elevation from +90 deg (top row) down to -90 deg; column `c`
/// covers azimuth `2*pi*(c + 0.5)/width`. Values are linear radiance, >= 0 and
/// unbounded above.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    pub radiance: Array3<f32>,
}

impl EnvMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        EnvMap { radiance: Array3::zeros((3, height, width)) }
    }

    pub fn from_radiance(radiance: Array3<f32>) -> Result<Self> {
        let (c, h, w) = (radiance.shape()[0], radiance.shape()[1], radiance.shape()[2]);
        if c != 3 || w != 2 * h {
            return Err(Error::Data(format!(
                "env map must be [3, h, 2*h], got [{c}, {h}, {w}]"
            )));
        }
        Ok(EnvMap { radiance })
    }

    pub fn height(&self) -> usize {
        self.radiance.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.radiance.shape()[2]
    }

    /// Direction of the equirectangular cell center `(row, col)` as a unit
    /// vector. Shared by the scene generator and its tests.
    pub fn cell_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let elevation =
            std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * (row as f64 + 0.5) / self.height() as f64;
        let azimuth = 2.0 * std::f64::consts::PI * (col as f64 + 0.5) / self.width() as f64;
        direction_from_angles(azimuth, elevation)
    }
}

/// Unit direction for an (azimuth, elevation) pair, y-up world frame.
pub fn direction_from_angles(azimuth: f64, elevation: f64) -> [f64; 3] {
    [
        elevation.cos() * azimuth.cos(),
        elevation.sin(),
        elevation.cos() * azimuth.sin(),
    ]
}

/// One training/evaluation sample.
#[derive(Debug, Clone)]
pub struct SixTuple {
    pub sample_id: String,
    /// Object pasted over the background under its own (wrong) light; no shadow.
    pub composite: Image,
    pub object_mask: Mask,
    pub background_mask: Mask,
    /// Illumination the object was pasted with.
    pub object_illum: EnvMap,
    /// Illumination of the background scene (the harmonization target light).
    pub background_illum: EnvMap,
    /// Object re-shaded under the background light, with its cast shadow.
    pub gt_harmonized: Image,
}

/// A single failed six-tuple invariant: which field broke which rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.detail)
    }
}

/// Check every structural invariant of a six-tuple and return the list of
/// violations (empty means well formed). Violations are data, not errors:
/// callers decide whether a broken tuple is fatal.
///
/// Checked rules:
/// * images are square, equally sized, finite, in `[0,1]`;
/// * masks are binary, sized like the images, and complementary
///   (`background_mask == 1 - object_mask`);
/// * env maps share one `[3, h, 2*h]` shape and are finite and non-negative;
/// * outside the object mask, `gt` may differ from `composite` only where the
///   cast shadow darkens the ground, i.e. any disagreement must darken `gt`
///   (shadowing never brightens a Lambertian ground plane).
pub fn validate_six_tuple(t: &SixTuple) -> Vec<Violation> {
    let mut out = Vec::new();
    let side = t.composite.side();

    for (field, img) in [("composite", &t.composite), ("gt_harmonized", &t.gt_harmonized)] {
        if img.pixels.shape() != [3, side, side] {
            out.push(Violation {
                field,
                rule: "image shape",
                detail: format!("expected [3, {side}, {side}], got {:?}", img.pixels.shape()),
            });
        }
        if !img.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            out.push(Violation {
                field,
                rule: "pixel range",
                detail: "values must be finite and within [0, 1]".into(),
            });
        }
    }

    for (field, mask) in [("object_mask", &t.object_mask), ("background_mask", &t.background_mask)] {
        if mask.pixels.shape() != [side, side] {
            out.push(Violation {
                field,
                rule: "mask shape",
                detail: format!("expected [{side}, {side}], got {:?}", mask.pixels.shape()),
            });
        }
        if !mask.is_binary() {
            out.push(Violation {
                field,
                rule: "mask binarity",
                detail: "mask values must be exactly 0 or 1".into(),
            });
        }
    }

    if t.object_mask.pixels.shape() == t.background_mask.pixels.shape() {
        let complementary = t
            .object_mask
            .pixels
            .iter()
            .zip(t.background_mask.pixels.iter())
            .all(|(o, b)| o + b == 1.0);
        if !complementary {
            out.push(Violation {
                field: "background_mask",
                rule: "mask complementarity",
                detail: "background_mask must equal 1 - object_mask everywhere".into(),
            });
        }
    }

    let env_shape = t.object_illum.radiance.shape().to_vec();
    for (field, env) in [("object_illum", &t.object_illum), ("background_illum", &t.background_illum)] {
        let sh = env.radiance.shape();
        if sh[0] != 3 || sh[2] != 2 * sh[1] {
            out.push(Violation {
                field,
                rule: "env map shape",
                detail: format!("expected [3, h, 2*h], got {sh:?}"),
            });
        }
        if sh != env_shape.as_slice() {
            out.push(Violation {
                field,
                rule: "env map shape",
                detail: "object and background env maps must share one shape".into(),
            });
        }
        if !env.radiance.iter().all(|v| v.is_finite() && *v >= 0.0) {
            out.push(Violation {
                field,
                rule: "env map range",
                detail: "radiance must be finite and >= 0".into(),
            });
        }
    }

    // Outside the object mask the composite and gt share the same rendered
    // background; gt may additionally darken pixels inside the cast shadow.
    // A pixel that *brightens* (in any channel) therefore cannot be shadow and
    // breaks the outside-region agreement.
    if t.composite.pixels.shape() == t.gt_harmonized.pixels.shape()
        && t.object_mask.pixels.shape() == [side, side]
    {
        let mut brightened = 0usize;
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    if t.object_mask.pixels[[y, x]] == 0.0 {
                        let c = t.composite.pixels[[ch, y, x]];
                        let g = t.gt_harmonized.pixels[[ch, y, x]];
                        if g > c {
                            brightened += 1;
                        }
                    }
                }
            }
        }
        if brightened > 0 {
            out.push(Violation {
                field: "gt_harmonized",
                rule: "outside-region agreement",
                detail: format!(
                    "{brightened} channel values outside the object mask brighten vs composite; \
                     outside the mask gt may only match the composite or darken it (cast shadow)"
                ),
            });
        }
    }

    out
}

/// Weights of the four training terms, in the order they enter the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Illumination prediction term.
    pub beta_illu: f64,
    /// Illumination-invariant feature consistency term.
    pub beta_nonillu: f64,
    /// Perceptual feature term.
    pub beta_per: f64,
    /// Adversarial (generator) term.
    pub beta_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta_illu: 25.0, beta_nonillu: 6.0, beta_per: 0.04, beta_adv: 0.5 }
    }
}

/// Component toggles used by the ablation study. All-false is the bare
/// supervised baseline ("basic"); all-true is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_msa: bool,
    pub use_iem: bool,
    pub use_l_per: bool,
    pub use_l_nonillu: bool,
    pub use_l_adv: bool,
}

impl AblationFlags {
    pub fn all_on() -> Self {
        AblationFlags { use_msa: true, use_iem: true, use_l_per: true, use_l_nonillu: true, use_l_adv: true }
    }

    pub fn all_off() -> Self {
        AblationFlags {
            use_msa: false,
            use_iem: false,
            use_l_per: false,
            use_l_nonillu: false,
            use_l_adv: false,
        }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::all_on()
    }
}

/// Architecture hyperparameters of the generator/discriminator pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input/output image side; five pooling stages require divisibility by 32.
    pub image_side: usize,
    /// Channel width of the first encoder stage; doubles per stage, capped at 512.
    pub base_channels: usize,
    /// Environment map shape as (height, width) with `width == 2*height`.
    pub envmap_shape: (usize, usize),
    /// Fraction of bottleneck channels treated as illumination channels.
    pub illu_channel_fraction: f64,
    /// Whether the illumination branch sees the background mask as a 4th channel.
    pub inet_mask_input: bool,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 256,
            base_channels: 32,
            envmap_shape: (16, 32),
            illu_channel_fraction: 0.5,
            inet_mask_input: true,
            ablation: AblationFlags::default(),
        }
    }
}

/// Maximum channel width of any encoder stage.
pub const CHANNEL_CAP: usize = 512;
/// Number of down-sampling stages in each encoder (and up-sampling stages in
/// the decoder).
pub const NUM_STAGES: usize = 5;

impl ModelConfig {
    /// Per-stage output channel counts: `base * 2^i`, capped.
    pub fn stage_channels(&self) -> [usize; NUM_STAGES] {
        let mut out = [0; NUM_STAGES];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = (self.base_channels << i).min(CHANNEL_CAP);
        }
        out
    }

    /// Channel count of the encoder bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels()[NUM_STAGES - 1]
    }

    /// Spatial side of the bottleneck feature map.
    pub fn bottleneck_side(&self) -> usize {
        self.image_side >> NUM_STAGES
    }

    /// Channels carrying illumination information at the bottleneck.
    pub fn illu_channels(&self) -> usize {
        (self.bottleneck_channels() as f64 * self.illu_channel_fraction).floor() as usize
    }

    /// Bottleneck channels that are illumination-invariant.
    pub fn nonillu_channels(&self) -> usize {
        self.bottleneck_channels() - self.illu_channels()
    }

    /// Validate the whole configuration, returning a description of the first
    /// violated constraint.
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % (1 << NUM_STAGES) != 0 {
            return Err(Error::Config(format!(
                "image_side must be a positive multiple of {}, got {}",
                1 << NUM_STAGES,
                self.image_side
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be even and >= 2 (attention blocks halve channels), got {}",
                self.base_channels
            )));
        }
        let (h, w) = self.envmap_shape;
        if h == 0 || w != 2 * h {
            return Err(Error::Config(format!(
                "envmap_shape must be (h, 2*h) with h > 0, got ({h}, {w})"
            )));
        }
        if !(0.0..1.0).contains(&self.illu_channel_fraction) || self.illu_channel_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "illu_channel_fraction must lie strictly inside (0, 1), got {}",
                self.illu_channel_fraction
            )));
        }
        if self.illu_channels() == 0 || self.nonillu_channels() == 0 {
            return Err(Error::Config(format!(
                "illu_channel_fraction {} leaves an empty channel group at a {}-channel bottleneck",
                self.illu_channel_fraction,
                self.bottleneck_channels()
            )));
        }
        if self.ablation.use_msa && self.bottleneck_side() % 2 != 0 {
            return Err(Error::Config(format!(
                "attention blocks need even spatial dims at every stage; image_side {} \
                 leaves a {}-pixel bottleneck (use a multiple of 64 or disable use_msa)",
                self.image_side,
                self.bottleneck_side()
            )));
        }
        Ok(())
    }

    /// Hex digest identifying this configuration; embedded in checkpoints and
    /// verified before evaluation/inference.
    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

/// SHA-256 hex digest of a serializable value's canonical JSON form.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization cannot fail");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
