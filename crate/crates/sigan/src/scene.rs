//! Procedural six-tuple generator.
//!
//! A sample scene is deliberately tiny: one primitive (sphere or box) resting
//! on an infinite ground plane, lit by a directional light plus a constant
//! ambient term, viewed through a tilted orthographic camera. Everything is
//! computed analytically in `f64` — ray intersections, Lambertian shading,
//! hard shadows — so renders are bit-reproducible and the ground truth for a
//! composite is exact: the harmonized image and the composite share one
//! background buffer and differ only inside the object mask and the cast
//! shadow.
//!
//! The "composite" half of a sample shows the object shaded under its *own*
//! light with no cast shadow (the classic cut-and-paste mismatch); the ground
//! truth shows the object re-shaded under the scene light together with its
//! shadow.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{direction_from_angles, EnvMap, Image, Mask, SixTuple};
use crate::{Error, Result};

/// Angular width (radians) of the Gaussian lobe an environment map uses to
/// encode a directional light.
pub const LOBE_SIGMA: f64 = 0.2;
/// Downward tilt of the orthographic camera.
const CAMERA_TILT: f64 = 35.0 * std::f64::consts::PI / 180.0;
/// Camera plane center height above the ground plane (world units; the image
/// side spans exactly one world unit).
const CAMERA_HEIGHT: f64 = 0.9;
/// Checker cell size on the ground plane, world units.
const CHECKER_CELL: f64 = 0.25;
/// Attempts [`sample_spec`] makes before giving up on the constraints.
const MAX_SAMPLE_ATTEMPTS: usize = 64;
/// Valid object-area range as a fraction of the frame.
pub const OBJECT_RATIO_RANGE: (f64, f64) = (0.05, 0.3);

// ---------------------------------------------------------------------------
// Small vector helper
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl Vec3 {
    fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Lights and scene description
// ---------------------------------------------------------------------------

/// Directional light with a constant ambient floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLight {
    /// Horizontal angle of the light direction, `[0, 2*pi)`.
    pub azimuth: f64,
    /// Angle above the horizon, `(0, pi/2]`.
    pub elevation: f64,
    /// Strength of the directional component, `>= 0`.
    pub intensity: f64,
    /// Constant ambient term, `[0, 1]`.
    pub ambient: f64,
    /// Light color, each channel in `[0, 1]`.
    pub color: [f64; 3],
}

impl DirectionalLight {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::TAU).contains(&self.azimuth) {
            return Err(Error::Config(format!("light azimuth {} outside [0, 2*pi)", self.azimuth)));
        }
        if !(self.elevation > 0.0 && self.elevation <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "light elevation {} outside (0, pi/2]",
                self.elevation
            )));
        }
        if self.intensity < 0.0 {
            return Err(Error::Config(format!("light intensity {} negative", self.intensity)));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(Error::Config(format!("light ambient {} outside [0, 1]", self.ambient)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!("light color {:?} outside [0, 1]", self.color)));
        }
        Ok(())
    }

    /// Unit vector pointing toward the light.
    fn direction(&self) -> Vec3 {
        let d = direction_from_angles(self.azimuth, self.elevation);
        Vec3::new(d[0], d[1], d[2])
    }
}

/// Primitive kind sitting on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

/// Ground albedo: solid color or two-color checker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundAlbedo {
    pub base: [f64; 3],
    pub check: Option<[f64; 3]>,
}

/// Complete recipe for one sample; rendering is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub sample_id: String,
    pub seed: u64,
    /// Output image side in pixels.
    pub side: usize,
    pub primitive: PrimitiveKind,
    /// Center of the projected silhouette, image coordinates (x, y) in pixels.
    pub object_center: [f64; 2],
    /// Projected object diameter as a fraction of the image side.
    pub object_scale: f64,
    pub albedo_object: [f64; 3],
    pub albedo_ground: GroundAlbedo,
    /// Light of the background scene (harmonization target).
    pub scene_light: DirectionalLight,
    /// Light the composited object was originally shaded with.
    pub object_light: DirectionalLight,
}

// ---------------------------------------------------------------------------
// Shading and environment maps
// ---------------------------------------------------------------------------

/// Lambertian shading with an ambient floor:
/// `albedo * color * clamp(intensity * max(0, n.l) + ambient, 0, 1)`.
///
/// `normal` must be unit length.
pub fn lambert_shade(
    normal: [f64; 3],
    light: &DirectionalLight,
    albedo: [f64; 3],
) -> Result<[f64; 3]> {
    let n = Vec3::new(normal[0], normal[1], normal[2]);
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Runtime(format!(
            "lambert_shade requires a unit normal, got length {}",
            n.norm()
        )));
    }
    let ndotl = n.dot(light.direction()).max(0.0);
    let shade = (light.intensity * ndotl + light.ambient).clamp(0.0, 1.0);
    Ok([
        albedo[0] * light.color[0] * shade,
        albedo[1] * light.color[1] * shade,
        albedo[2] * light.color[2] * shade,
    ])
}

/// Encode a directional light as an equirectangular radiance map: a constant
/// ambient floor plus a Gaussian lobe (angular sigma [`LOBE_SIGMA`]) peaking
/// at `intensity * color` in the light direction.
pub fn envmap_from_light(light: &DirectionalLight, shape: (usize, usize)) -> Result<EnvMap> {
    light.validate()?;
    let (h, w) = shape;
    if h == 0 || w != 2 * h {
        return Err(Error::Config(format!("env map shape must be (h, 2*h), got ({h}, {w})")));
    }
    let mut map = EnvMap::zeros(h, w);
    let ldir = light.direction();
    for row in 0..h {
        for col in 0..w {
            let cd = map.cell_direction(row, col);
            let cell = Vec3::new(cd[0], cd[1], cd[2]);
            let angle = ldir.dot(cell).clamp(-1.0, 1.0).acos();
            let lobe = light.intensity * (-angle * angle / (2.0 * LOBE_SIGMA * LOBE_SIGMA)).exp();
            for ch in 0..3 {
                map.radiance[[ch, row, col]] =
                    ((light.ambient + lobe) * light.color[ch]) as f32;
            }
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

struct Camera {
    side: usize,
    right: Vec3,
    up: Vec3,
    dir: Vec3,
    center: Vec3,
}

impl Camera {
    fn new(side: usize) -> Self {
        let (s, c) = CAMERA_TILT.sin_cos();
        Camera {
            side,
            right: Vec3::new(1.0, 0.0, 0.0),
            up: Vec3::new(0.0, c, -s),
            dir: Vec3::new(0.0, -s, -c),
            center: Vec3::new(0.0, CAMERA_HEIGHT, 0.0),
        }
    }

    /// Orthographic ray through pixel center `(row, col)`.
    fn ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let u = (col as f64 + 0.5) / self.side as f64 - 0.5;
        let v = 0.5 - (row as f64 + 0.5) / self.side as f64;
        let origin = self.center.add(self.right.scale(u)).add(self.up.scale(v));
        (origin, self.dir)
    }
}

enum Solid {
    Sphere { center: Vec3, radius: f64 },
    Aabb { min: Vec3, max: Vec3 },
}

impl Solid {
    /// Place the primitive so its silhouette center projects to the requested
    /// image point with the requested projected diameter.
    fn place(spec: &SceneSpec) -> Solid {
        let u0 = spec.object_center[0] / spec.side as f64 - 0.5;
        let v0 = 0.5 - spec.object_center[1] / spec.side as f64;
        let (sin_t, cos_t) = CAMERA_TILT.sin_cos();
        let half = spec.object_scale / 2.0;
        // Solve `v0 = dot(P - C, up)` for the depth Z of a center at height
        // `half` (both primitives rest on the ground plane).
        let z = (-v0 + (half - CAMERA_HEIGHT) * cos_t) / sin_t;
        let center = Vec3::new(u0, half, z);
        match spec.primitive {
            PrimitiveKind::Sphere => Solid::Sphere { center, radius: half },
            PrimitiveKind::Box => Solid::Aabb {
                min: Vec3::new(center.x - half, 0.0, center.z - half),
                max: Vec3::new(center.x + half, 2.0 * half, center.z + half),
            },
        }
    }

    /// Nearest intersection along `o + t*d`, returning `(t, unit normal)`.
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
        match self {
            Solid::Sphere { center, radius } => {
                let oc = o.sub(*center);
                let b = oc.dot(d);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= 1e-9 {
                    return None;
                }
                let hit = o.add(d.scale(t));
                Some((t, hit.sub(*center).scale(1.0 / *radius)))
            }
            Solid::Aabb { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for (i, (o_i, d_i, min_i, max_i)) in [
                    (o.x, d.x, min.x, max.x),
                    (o.y, d.y, min.y, max.y),
                    (o.z, d.z, min.z, max.z),
                ]
                .iter()
                .enumerate()
                {
                    if d_i.abs() < 1e-12 {
                        if o_i < min_i || o_i > max_i {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min_i - o_i) / d_i;
                    let mut t1 = (max_i - o_i) / d_i;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = i;
                    }
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near <= 1e-9 {
                    return None;
                }
                let hit = o.add(d.scale(t_near));
                let normal = match axis {
                    0 => Vec3::new(if hit.x > (min.x + max.x) / 2.0 { 1.0 } else { -1.0 }, 0.0, 0.0),
                    1 => Vec3::new(0.0, if hit.y > (min.y + max.y) / 2.0 { 1.0 } else { -1.0 }, 0.0),
                    _ => Vec3::new(0.0, 0.0, if hit.z > (min.z + max.z) / 2.0 { 1.0 } else { -1.0 }),
                };
                Some((t_near, normal))
            }
        }
    }

    fn occludes(&self, o: Vec3, d: Vec3) -> bool {
        self.intersect(o, d).is_some()
    }
}

fn ground_albedo(spec: &SceneSpec, x: f64, z: f64) -> [f64; 3] {
    match spec.albedo_ground.check {
        None => spec.albedo_ground.base,
        Some(check) => {
            let cell = (x / CHECKER_CELL).floor() as i64 + (z / CHECKER_CELL).floor() as i64;
            if cell.rem_euclid(2) == 0 {
                spec.albedo_ground.base
            } else {
                check
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Ray-traced layers every output is assembled from.
struct Layers {
    object_mask: Mask,
    shadow_mask: Mask,
    /// Ground shading under the scene light (no object, no shadow).
    background: Array3<f32>,
    /// Ground shading with the directional term removed (shadow color).
    background_shadowed: Array3<f32>,
    /// Object shaded under the scene light.
    object_scene_lit: Array3<f32>,
    /// Object shaded under the object light.
    object_object_lit: Array3<f32>,
}

fn trace(spec: &SceneSpec) -> Layers {
    let side = spec.side;
    let camera = Camera::new(side);
    let solid = Solid::place(spec);
    let (sin_t, _) = CAMERA_TILT.sin_cos();
    let scene_dir = spec.scene_light.direction();
    let ambient_only = DirectionalLight { intensity: 0.0, ..spec.scene_light };

    let mut layers = Layers {
        object_mask: Mask::zeros(side),
        shadow_mask: Mask::zeros(side),
        background: Array3::zeros((3, side, side)),
        background_shadowed: Array3::zeros((3, side, side)),
        object_scene_lit: Array3::zeros((3, side, side)),
        object_object_lit: Array3::zeros((3, side, side)),
    };

    for row in 0..side {
        for col in 0..side {
            let (o, d) = camera.ray(row, col);
            // The camera always looks down, so every ray reaches the ground.
            let t_ground = o.y / sin_t;
            let obj_hit = solid.intersect(o, d).filter(|(t, _)| *t < t_ground);
            if let Some((_, normal)) = obj_hit {
                layers.object_mask.pixels[[row, col]] = 1.0;
                let n = [normal.x, normal.y, normal.z];
                let lit = lambert_shade(n, &spec.scene_light, spec.albedo_object)
                    .expect("intersection normals are unit length");
                let pasted = lambert_shade(n, &spec.object_light, spec.albedo_object)
                    .expect("intersection normals are unit length");
                for ch in 0..3 {
                    layers.object_scene_lit[[ch, row, col]] = lit[ch] as f32;
                    layers.object_object_lit[[ch, row, col]] = pasted[ch] as f32;
                }
            } else {
                let hit = o.add(d.scale(t_ground));
                let albedo = ground_albedo(spec, hit.x, hit.z);
                let lit = lambert_shade([0.0, 1.0, 0.0], &spec.scene_light, albedo)
                    .expect("ground normal is unit length");
                let dark = lambert_shade([0.0, 1.0, 0.0], &ambient_only, albedo)
                    .expect("ground normal is unit length");
                for ch in 0..3 {
                    layers.background[[ch, row, col]] = lit[ch] as f32;
                    layers.background_shadowed[[ch, row, col]] = dark[ch] as f32;
                }
                let shadow_origin = Vec3::new(hit.x, 1e-7, hit.z);
                if solid.occludes(shadow_origin, scene_dir) {
                    layers.shadow_mask.pixels[[row, col]] = 1.0;
                }
            }
        }
    }
    layers
}

/// Binary mask of ground pixels the primitive occludes from the scene light.
/// Disjoint from the object mask by construction (only ground pixels can be
/// in shadow).
pub fn cast_shadow_mask(spec: &SceneSpec) -> Mask {
    trace(spec).shadow_mask
}

/// Rasterize only the object silhouette (used while sampling specs).
fn object_mask_of(spec: &SceneSpec) -> Mask {
    trace(spec).object_mask
}

/// Render the full six-tuple for a spec. Pure: repeated calls return
/// bit-identical tuples.
///
/// * `gt_harmonized`: object under the scene light, cast shadow, over the
///   shared background.
/// * `composite`: object under its own light, *no* shadow, over the same
///   background buffer — so outside `object_mask ∪ shadow_mask` the two
///   images are equal bit-for-bit.
pub fn render_six_tuple(spec: &SceneSpec) -> Result<SixTuple> {
    spec.scene_light.validate()?;
    spec.object_light.validate()?;
    if spec.side == 0 {
        return Err(Error::Config("image side must be positive".into()));
    }
    let layers = trace(spec);
    let side = spec.side;

    let mut gt = layers.background.clone();
    let mut composite = layers.background;
    for row in 0..side {
        for col in 0..side {
            if layers.shadow_mask.pixels[[row, col]] == 1.0 {
                for ch in 0..3 {
                    gt[[ch, row, col]] = layers.background_shadowed[[ch, row, col]];
                }
            }
            if layers.object_mask.pixels[[row, col]] == 1.0 {
                for ch in 0..3 {
                    gt[[ch, row, col]] = layers.object_scene_lit[[ch, row, col]];
                    composite[[ch, row, col]] = layers.object_object_lit[[ch, row, col]];
                }
            }
        }
    }

    let envmap_shape = (16, 32);
    Ok(SixTuple {
        sample_id: spec.sample_id.clone(),
        composite: Image { pixels: composite },
        background_mask: layers.object_mask.complement(),
        object_mask: layers.object_mask,
        object_illum: envmap_from_light(&spec.object_light, envmap_shape)?,
        background_illum: envmap_from_light(&spec.scene_light, envmap_shape)?,
        gt_harmonized: Image { pixels: gt },
    })
}

// ---------------------------------------------------------------------------
// Spec sampling
// ---------------------------------------------------------------------------

fn draw_light(rng: &mut ChaCha8Rng) -> DirectionalLight {
    DirectionalLight {
        azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
        elevation: rng.gen_range(25.0_f64.to_radians()..80.0_f64.to_radians()),
        intensity: rng.gen_range(0.55..0.95),
        ambient: rng.gen_range(0.15..0.35),
        color: [
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.8..1.0),
        ],
    }
}

fn draw_spec(rng: &mut ChaCha8Rng, seed: u64, side: usize) -> SceneSpec {
    let primitive = if rng.gen_bool(0.5) { PrimitiveKind::Sphere } else { PrimitiveKind::Box };
    let scale: f64 = rng.gen_range(0.26..0.5);
    let margin = scale / 2.0 + 0.05;
    let u0 = rng.gen_range(margin..1.0 - margin);
    let v_lo = margin.max(0.3);
    let v_hi = (1.0 - margin).min(0.72).max(v_lo + 1e-3);
    let v0 = rng.gen_range(v_lo..v_hi);
    let albedo_object = [
        rng.gen_range(0.2..0.95),
        rng.gen_range(0.2..0.95),
        rng.gen_range(0.2..0.95),
    ];
    let base = [
        rng.gen_range(0.25..0.8),
        rng.gen_range(0.25..0.8),
        rng.gen_range(0.25..0.8),
    ];
    let check = rng.gen_bool(0.5).then(|| {
        [
            rng.gen_range(0.15..0.7),
            rng.gen_range(0.15..0.7),
            rng.gen_range(0.15..0.7),
        ]
    });
    SceneSpec {
        sample_id: format!("s{seed:08x}"),
        seed,
        side,
        primitive,
        object_center: [u0 * side as f64, v0 * side as f64],
        object_scale: scale,
        albedo_object,
        albedo_ground: GroundAlbedo { base, check },
        scene_light: draw_light(rng),
        object_light: draw_light(rng),
    }
}

/// True when the rasterized object respects the area budget and stays clear
/// of the image border.
fn spec_is_admissible(spec: &SceneSpec) -> bool {
    let mask = object_mask_of(spec);
    let ratio = mask.area_ratio();
    if !(OBJECT_RATIO_RANGE.0..=OBJECT_RATIO_RANGE.1).contains(&ratio) {
        return false;
    }
    let side = spec.side;
    let border_touch = (0..side).any(|i| {
        mask.pixels[[0, i]] == 1.0
            || mask.pixels[[side - 1, i]] == 1.0
            || mask.pixels[[i, 0]] == 1.0
            || mask.pixels[[i, side - 1]] == 1.0
    });
    !border_touch
}

/// Draw a scene spec for `seed`, retrying a bounded number of times until the
/// object-area and border constraints hold.
pub fn sample_spec(seed: u64, side: usize) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let spec = draw_spec(&mut rng, seed, side);
        if spec_is_admissible(&spec) {
            return Ok(spec);
        }
    }
    Err(Error::Runtime(format!(
        "sample_spec(seed {seed}): no draw satisfied the object-area ratio \
         [{}, {}] and border-clearance constraints in {MAX_SAMPLE_ATTEMPTS} attempts",
        OBJECT_RATIO_RANGE.0, OBJECT_RATIO_RANGE.1
    )))
}

/// Draw an illumination pair: two specs sharing the primitive, placement and
/// albedos but lit by different object lights. Sample ids get `a`/`b`
/// suffixes.
pub fn sample_paired_specs(seed: u64, side: usize) -> Result<(SceneSpec, SceneSpec)> {
    let mut first = sample_spec(seed, side)?;
    let mut partner = first.clone();
    // Fresh stream for the partner light so the pair stays deterministic in
    // `seed` without rewinding the base draw.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    partner.object_light = draw_light(&mut rng);
    while partner.object_light == first.object_light {
        partner.object_light = draw_light(&mut rng);
    }
    first.sample_id = format!("s{seed:08x}a");
    partner.sample_id = format!("s{seed:08x}b");
    Ok((first, partner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_six_tuple;
    use std::collections::HashSet;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn white_light(intensity: f64, ambient: f64, azimuth: f64, elevation: f64) -> DirectionalLight {
        DirectionalLight { azimuth, elevation, intensity, ambient, color: [1.0, 1.0, 1.0] }
    }

    #[test]
    fn lambert_head_on_saturates_to_one() {
        // n == l, intensity 0.8, ambient 0.2: 0.8*1 + 0.2 == 1.
        let light = white_light(0.8, 0.2, 0.0, FRAC_PI_2);
        let shade = lambert_shade([0.0, 1.0, 0.0], &light, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(shade, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn lambert_perpendicular_leaves_ambient() {
        // Light (almost exactly) along +x, normal along +z.
        let light = white_light(1.0, 0.2, 0.0, 1e-12);
        let shade = lambert_shade([0.0, 0.0, 1.0], &light, [1.0, 1.0, 1.0]).unwrap();
        for c in shade {
            assert!((c - 0.2).abs() < 1e-9, "{shade:?}");
        }
    }

    #[test]
    fn lambert_at_45_degrees_gives_cosine() {
        let light = white_light(1.0, 0.0, 0.0, FRAC_PI_4);
        // Normal pointing straight up: n.l = sin(elevation) = sqrt(2)/2.
        let shade = lambert_shade([0.0, 1.0, 0.0], &light, [1.0, 1.0, 1.0]).unwrap();
        for c in shade {
            assert!((c - 0.7071).abs() < 1e-4, "{shade:?}");
        }
    }

    #[test]
    fn lambert_rejects_non_unit_normals() {
        let light = white_light(1.0, 0.0, 0.0, FRAC_PI_4);
        assert!(lambert_shade([0.0, 2.0, 0.0], &light, [1.0; 3]).is_err());
    }

    #[test]
    fn envmap_zenith_peaks_in_top_row() {
        let light = white_light(1.0, 0.1, 1.0, FRAC_PI_2);
        let map = envmap_from_light(&light, (16, 32)).unwrap();
        let mut best = (0, 0, f32::MIN);
        for r in 0..16 {
            for c in 0..32 {
                let v = map.radiance[[0, r, c]];
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        assert_eq!(best.0, 0, "zenith light must peak in the top row");
    }

    #[test]
    fn envmap_azimuth_pi_peaks_at_center_columns() {
        let light = white_light(1.0, 0.1, PI, FRAC_PI_4);
        let map = envmap_from_light(&light, (16, 32)).unwrap();
        let mut best = (0usize, 0usize, f32::MIN);
        for r in 0..16 {
            for c in 0..32 {
                let v = map.radiance[[1, r, c]];
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        assert!(best.1 == 15 || best.1 == 16, "azimuth pi peaks at column 15/16, got {}", best.1);
        assert!(best.0 == 3 || best.0 == 4, "elevation pi/4 peaks at row 3/4, got {}", best.0);
    }

    #[test]
    fn envmap_without_directional_term_is_constant_ambient() {
        let light = white_light(0.0, 0.3, 2.0, FRAC_PI_4);
        let map = envmap_from_light(&light, (16, 32)).unwrap();
        assert!(map.radiance.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn envmap_radiance_grows_strictly_with_intensity() {
        let shapes = [(8, 16), (16, 32)];
        for shape in shapes {
            let mut prev = f64::MIN;
            for intensity in [0.2, 0.6, 1.1] {
                let light = white_light(intensity, 0.25, 1.3, 0.9);
                let total: f64 = envmap_from_light(&light, shape)
                    .unwrap()
                    .radiance
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                assert!(total > prev, "total radiance must increase with intensity");
                prev = total;
            }
        }
    }

    #[test]
    fn envmap_rejects_bad_shapes() {
        let light = white_light(1.0, 0.1, 0.0, FRAC_PI_4);
        assert!(envmap_from_light(&light, (16, 31)).is_err());
        assert!(envmap_from_light(&light, (0, 0)).is_err());
    }

    fn test_spec(seed: u64) -> SceneSpec {
        sample_spec(seed, 64).unwrap()
    }

    #[test]
    fn overhead_shadow_stays_within_object_columns() {
        let mut spec = test_spec(3);
        spec.scene_light.elevation = FRAC_PI_2;
        let shadow = cast_shadow_mask(&spec);
        let object = object_mask_of(&spec);
        let cols_with = |m: &Mask| -> HashSet<usize> {
            let mut cols = HashSet::new();
            for r in 0..64 {
                for c in 0..64 {
                    if m.pixels[[r, c]] == 1.0 {
                        cols.insert(c);
                    }
                }
            }
            cols
        };
        let shadow_cols = cols_with(&shadow);
        let object_cols = cols_with(&object);
        assert!(!object_cols.is_empty());
        assert!(
            shadow_cols.is_subset(&object_cols),
            "overhead shadow must stay within the object's column span"
        );
    }

    #[test]
    fn lower_elevation_casts_strictly_larger_shadows() {
        for seed in [1, 5, 9] {
            let mut low = test_spec(seed);
            low.scene_light.elevation = 30.0_f64.to_radians();
            let mut high = low.clone();
            high.scene_light.elevation = 60.0_f64.to_radians();
            let low_count = cast_shadow_mask(&low).count();
            let high_count = cast_shadow_mask(&high).count();
            assert!(
                low_count > high_count,
                "seed {seed}: 30deg shadow ({low_count} px) must exceed 60deg ({high_count} px)"
            );
        }
    }

    #[test]
    fn shadow_and_object_masks_are_disjoint() {
        for seed in 0..20 {
            let spec = test_spec(seed);
            let shadow = cast_shadow_mask(&spec);
            let object = object_mask_of(&spec);
            let overlap: f32 = (&shadow.pixels * &object.pixels).sum();
            assert_eq!(overlap, 0.0, "seed {seed}");
        }
    }

    #[test]
    fn rendered_tuples_validate_cleanly() {
        for seed in 0..10 {
            let tuple = render_six_tuple(&test_spec(seed)).unwrap();
            assert_eq!(validate_six_tuple(&tuple), vec![], "seed {seed}");
            let ratio = tuple.object_mask.area_ratio();
            assert!(
                (OBJECT_RATIO_RANGE.0..=OBJECT_RATIO_RANGE.1).contains(&ratio),
                "seed {seed}: ratio {ratio}"
            );
        }
    }

    #[test]
    fn composite_equals_gt_outside_mask_and_shadow() {
        for seed in 0..20 {
            let spec = test_spec(seed);
            let tuple = render_six_tuple(&spec).unwrap();
            let shadow = cast_shadow_mask(&spec);
            for r in 0..spec.side {
                for c in 0..spec.side {
                    if tuple.object_mask.pixels[[r, c]] == 0.0 && shadow.pixels[[r, c]] == 0.0 {
                        for ch in 0..3 {
                            assert_eq!(
                                tuple.composite.pixels[[ch, r, c]].to_bits(),
                                tuple.gt_harmonized.pixels[[ch, r, c]].to_bits(),
                                "seed {seed} pixel ({r},{c}) channel {ch}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matching_lights_confine_differences_to_shadow() {
        let mut spec = test_spec(7);
        spec.object_light = spec.scene_light;
        let tuple = render_six_tuple(&spec).unwrap();
        let shadow = cast_shadow_mask(&spec);
        for r in 0..spec.side {
            for c in 0..spec.side {
                if shadow.pixels[[r, c]] == 0.0 {
                    for ch in 0..3 {
                        assert_eq!(
                            tuple.composite.pixels[[ch, r, c]].to_bits(),
                            tuple.gt_harmonized.pixels[[ch, r, c]].to_bits()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = test_spec(11);
        let a = render_six_tuple(&spec).unwrap();
        let b = render_six_tuple(&spec).unwrap();
        assert_eq!(a.composite.pixels, b.composite.pixels);
        assert_eq!(a.gt_harmonized.pixels, b.gt_harmonized.pixels);
        assert_eq!(a.object_illum.radiance, b.object_illum.radiance);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_constraints() {
        for seed in [0, 17, 99] {
            assert_eq!(sample_spec(seed, 64).unwrap(), sample_spec(seed, 64).unwrap());
        }
        let mut light_pairs = HashSet::new();
        for seed in 0..100 {
            let spec = test_spec(seed);
            let ratio = object_mask_of(&spec).area_ratio();
            assert!(
                (OBJECT_RATIO_RANGE.0..=OBJECT_RATIO_RANGE.1).contains(&ratio),
                "seed {seed}: ratio {ratio}"
            );
            light_pairs.insert(format!(
                "{:.12}:{:.12}:{:.12}:{:.12}",
                spec.scene_light.azimuth,
                spec.scene_light.elevation,
                spec.object_light.azimuth,
                spec.object_light.elevation
            ));
        }
        assert!(light_pairs.len() >= 95, "only {} distinct light pairs", light_pairs.len());
    }

    #[test]
    fn paired_specs_share_geometry_but_not_object_light() {
        let (a, b) = sample_paired_specs(21, 64).unwrap();
        assert_eq!(a.primitive, b.primitive);
        assert_eq!(a.object_center, b.object_center);
        assert_eq!(a.object_scale, b.object_scale);
        assert_eq!(a.albedo_object, b.albedo_object);
        assert_eq!(a.scene_light, b.scene_light);
        assert_ne!(a.object_light, b.object_light);
        assert_ne!(a.sample_id, b.sample_id);
        // Identical geometry means identical masks.
        let ta = render_six_tuple(&a).unwrap();
        let tb = render_six_tuple(&b).unwrap();
        assert_eq!(ta.object_mask.pixels, tb.object_mask.pixels);
        assert_eq!(validate_six_tuple(&ta), vec![]);
        assert_eq!(validate_six_tuple(&tb), vec![]);
    }
}
