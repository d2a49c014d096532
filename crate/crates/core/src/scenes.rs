//! Deterministic synthetic multi-view scenes with analytic ground-truth
//! depth.
//!
//! Each scene is a textured surface (fronto-parallel plane, slanted plane,
//! or axis-aligned steps) observed by calibrated cameras on an arc. Images
//! are rendered by exact ray casting against the analytic surface — no
//! rasterization — so the reference depth map is exact and photo-consistency
//! across views holds up to bilinear interpolation error. Textures are
//! smooth value noise over world coordinates, giving matchable structure
//! everywhere; shading is Lambertian and view-independent.
//!
//! All randomness flows from a single per-scene seed; regenerating a scene
//! from the same seed and configuration is bit-identical.

use crate::error::{Error, Result};
use crate::geometry::{look_at_camera, Camera, Vec3};
use crate::io::{load_pfm, save_pfm_color, save_pfm_gray};
use crate::pipeline::backbone::FEATURE_CHANNELS;
use crate::tensor::{seeded_rng, Real, Tensor};
use rand::Rng;
use std::path::Path;

/// Surface family to sample for a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryKind {
    /// Fronto-parallel plane at a random depth.
    Plane,
    /// Plane with random in-plane depth gradients.
    Slanted,
    /// Fronto-parallel bands at different depths with vertical risers.
    Steps,
    /// One of the above, chosen per seed.
    Mixed,
}

/// Scene generation settings.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Number of views; view 0 is the reference at the center of the arc.
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub geometry: GeometryKind,
    /// Base texture wavelength in millimeters on the surface.
    pub texture_cell_mm: f64,
    /// Noise octaves (each halves the wavelength and the amplitude).
    pub octaves: usize,
    /// Total angular span of the camera arc in degrees.
    pub arc_degrees: f64,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Scene depth range in millimeters.
    pub d_near: f64,
    pub d_far: f64,
    /// Crushes texture contrast for stress tests.
    pub low_texture: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            views: 3,
            height: 64,
            width: 96,
            geometry: GeometryKind::Mixed,
            texture_cell_mm: 24.0,
            octaves: 2,
            arc_degrees: 30.0,
            focal_factor: 5.0,
            d_near: 400.0,
            d_far: 1000.0,
            low_texture: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::invalid(
                "scene_config",
                format!("need >= 2 views, got {}", self.views),
            ));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene_config", "empty image"));
        }
        if !(self.arc_degrees > 0.0 && self.arc_degrees < 180.0) {
            return Err(Error::invalid(
                "scene_config",
                format!("camera arc of {} degrees is degenerate (zero baseline)", self.arc_degrees),
            ));
        }
        if !(self.d_near > 0.0 && self.d_near < self.d_far && self.d_far.is_finite()) {
            return Err(Error::invalid(
                "scene_config",
                format!("bad depth range [{}, {}]", self.d_near, self.d_far),
            ));
        }
        if !(self.focal_factor > 0.0) || !(self.texture_cell_mm > 0.0) || self.octaves == 0 {
            return Err(Error::invalid("scene_config", "focal, texture cell, and octaves must be positive"));
        }
        Ok(())
    }

    /// Fractional margins keeping surfaces strictly inside the depth range,
    /// wide enough that the nearest hypothesis bin of a 16-step
    /// inverse-depth sweep is always interior.
    fn surface_depth_bounds(&self) -> (f64, f64) {
        let span = self.d_far - self.d_near;
        (self.d_near + 0.075 * span, self.d_far - 0.21 * span)
    }
}

/// One rendered multi-view sample.
#[derive(Debug, Clone)]
pub struct SceneSample<T: Real> {
    /// Per-view images `[3, H, W]`, values in `[0, 1]`.
    pub images: Vec<Tensor<T>>,
    /// Per-view cameras; index 0 is the reference.
    pub cameras: Vec<Camera>,
    /// Exact reference-view depth `[H, W]` in millimeters.
    pub gt_depth: Tensor<f64>,
    pub seed: u64,
}

impl<T: Real> SceneSample<T> {
    /// Structural invariants: matching shapes, one shared depth range, and
    /// ground truth strictly inside it.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.cameras.len() || self.images.len() < 2 {
            return Err(Error::invalid("scene_sample", "need >= 2 views with one camera each"));
        }
        let shape = self.images[0].shape().to_vec();
        for img in &self.images {
            if img.shape() != shape || img.rank() != 3 || shape[0] != 3 {
                return Err(Error::shape("scene_sample", "all views must be [3,H,W]"));
            }
            img.ensure_finite("scene_image")?;
        }
        let (dn, df) = (self.cameras[0].d_near, self.cameras[0].d_far);
        for cam in &self.cameras {
            if cam.d_near != dn || cam.d_far != df {
                return Err(Error::invalid("scene_sample", "views disagree on the depth range"));
            }
        }
        if self.gt_depth.shape() != [shape[1], shape[2]] {
            return Err(Error::shape("scene_sample", "depth raster must match the image grid"));
        }
        for &d in self.gt_depth.data() {
            if !(d > dn && d < df) {
                return Err(Error::invalid(
                    "scene_sample",
                    format!("ground-truth depth {d} outside ({dn}, {df})"),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Value noise
// ---------------------------------------------------------------------------

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Lattice hash in `[0, 1)`.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(
        seed ^ (ix as u64).wrapping_mul(0xC2B2AE3D27D4EB4F)
            ^ (iy as u64).wrapping_mul(0x165667B19E3779F9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(u: f64) -> f64 {
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

/// Smooth value noise in `[0, 1]` with unit cell size.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (ux, uy) = (quintic(x - fx), quintic(y - fy));
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * ux;
    let b = v01 + (v11 - v01) * ux;
    a + (b - a) * uy
}

/// Octave sum, renormalized to `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, octaves: usize) -> f64 {
    let mut total = 0.0;
    let mut amp = 1.0;
    let mut norm = 0.0;
    let mut freq = 1.0;
    for k in 0..octaves {
        total += amp * value_noise(seed.wrapping_add(k as u64), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

// ---------------------------------------------------------------------------
// Surfaces
// ---------------------------------------------------------------------------

/// A concrete surface, analytically intersectable along camera rays.
#[derive(Debug, Clone)]
enum Surface {
    /// `z = depth`.
    Plane { depth: f64 },
    /// `z = base + gx·x + gy·y`.
    Slanted { base: f64, gx: f64, gy: f64 },
    /// Fronto-parallel bands over x-intervals split at `edges` (ascending);
    /// `depths` has one entry more than `edges`. Vertical risers connect
    /// adjacent bands.
    Steps { edges: Vec<f64>, depths: Vec<f64> },
}

impl Surface {
    /// Smallest positive ray depth `d` with `a·d + b` on the surface. `a` is
    /// the world direction scaled so `d` is the camera-frame depth.
    fn intersect(&self, a: Vec3, b: Vec3) -> Option<f64> {
        match self {
            Surface::Plane { depth } => {
                let d = (depth - b[2]) / a[2];
                (d > 0.0).then_some(d)
            }
            Surface::Slanted { base, gx, gy } => {
                let denom = a[2] - gx * a[0] - gy * a[1];
                if denom.abs() < 1e-12 {
                    return None;
                }
                let d = (base + gx * b[0] + gy * b[1] - b[2]) / denom;
                (d > 0.0).then_some(d)
            }
            Surface::Steps { edges, depths } => {
                let mut best: Option<f64> = None;
                let mut push = |d: f64| {
                    if d > 0.0 && best.is_none_or(|cur| d < cur) {
                        best = Some(d);
                    }
                };
                for (i, &z) in depths.iter().enumerate() {
                    let d = (z - b[2]) / a[2];
                    let x = a[0] * d + b[0];
                    let lo = if i == 0 { f64::NEG_INFINITY } else { edges[i - 1] };
                    let hi = if i == depths.len() - 1 { f64::INFINITY } else { edges[i] };
                    if x >= lo && x < hi {
                        push(d);
                    }
                }
                // Vertical risers at each band edge.
                for (i, &e) in edges.iter().enumerate() {
                    if a[0].abs() < 1e-12 {
                        continue;
                    }
                    let d = (e - b[0]) / a[0];
                    let z = a[2] * d + b[2];
                    let (zl, zr) = (depths[i], depths[i + 1]);
                    if z >= zl.min(zr) && z <= zl.max(zr) {
                        push(d);
                    }
                }
                best
            }
        }
    }

    /// Outward (toward the cameras) unit normal at a surface point.
    fn normal(&self, x: f64, _y: f64) -> Vec3 {
        match self {
            Surface::Plane { .. } => [0.0, 0.0, -1.0],
            Surface::Slanted { gx, gy, .. } => {
                let n = [*gx, *gy, -1.0];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                [n[0] / len, n[1] / len, n[2] / len]
            }
            Surface::Steps { edges, depths } => {
                // Attribute points near an edge to the riser.
                for (i, &e) in edges.iter().enumerate() {
                    if (x - e).abs() < 1e-9 {
                        return [if depths[i] < depths[i + 1] { 1.0 } else { -1.0 }, 0.0, 0.0];
                    }
                }
                [0.0, 0.0, -1.0]
            }
        }
    }
}

fn sample_surface(rng: &mut rand_chacha::ChaCha8Rng, cfg: &SceneConfig) -> Surface {
    let (lo, hi) = cfg.surface_depth_bounds();
    let kind = match cfg.geometry {
        // Step scenes carry real occlusion, so they are the rarest draw.
        GeometryKind::Mixed => match rng.gen_range(0..5u8) {
            0 | 1 => GeometryKind::Plane,
            2 | 3 => GeometryKind::Slanted,
            _ => GeometryKind::Steps,
        },
        k => k,
    };
    match kind {
        GeometryKind::Plane => Surface::Plane { depth: rng.gen_range(lo + 40.0..hi - 40.0) },
        GeometryKind::Slanted => {
            // Gradients bounded so the surface stays inside [lo, hi] over
            // the ±300 mm patch the frustums can see.
            let base = rng.gen_range(lo + 80.0..hi - 80.0);
            let cap_x = ((hi - base).min(base - lo) - 10.0) / 300.0;
            let cap = cap_x.min(0.25);
            let gx = rng.gen_range(-cap..cap);
            let gy = rng.gen_range(-cap..cap);
            Surface::Slanted { base, gx, gy }
        }
        GeometryKind::Steps => {
            let bands = rng.gen_range(3..=4usize);
            let mut edges = Vec::with_capacity(bands - 1);
            let mut x = rng.gen_range(-90.0..-50.0);
            for _ in 0..bands - 1 {
                edges.push(x);
                x += rng.gen_range(50.0..110.0);
            }
            // A bounded random walk keeps adjacent jumps in [25, 55] mm, so
            // occlusion shadows stay a pixel or two wide in the source
            // views while the risers remain clearly resolved.
            let mut depths = Vec::with_capacity(bands);
            let mut z = rng.gen_range(lo + 60.0..hi - 60.0);
            depths.push(z);
            for _ in 1..bands {
                let mut delta = rng.gen_range(25.0..55.0) * if rng.gen_range(0..2u8) == 0 { -1.0 } else { 1.0 };
                if z + delta < lo + 5.0 || z + delta > hi - 5.0 {
                    delta = -delta;
                }
                z += delta;
                depths.push(z);
            }
            Surface::Steps { edges, depths }
        }
        GeometryKind::Mixed => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Cameras and rendering
// ---------------------------------------------------------------------------

/// Cameras on an arc around the scene center. View 0 sits at the arc center
/// with an exactly identity orientation; sources spread symmetrically over
/// `arc_degrees`.
pub fn arc_cameras(cfg: &SceneConfig) -> Result<Vec<Camera>> {
    cfg.validate()?;
    let radius = 0.5 * (cfg.d_near + cfg.d_far);
    let target = [0.0, 0.0, radius];
    let fx = cfg.focal_factor * cfg.width as f64;
    let (cx, cy) = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    let half = cfg.arc_degrees.to_radians() / 2.0;
    let pairs = cfg.views - 1;
    let mut cams = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let angle = if v == 0 {
            0.0
        } else {
            let m = v.div_ceil(2) as f64 / pairs.div_ceil(2) as f64;
            let sign = if v % 2 == 1 { 1.0 } else { -1.0 };
            sign * half * m
        };
        let pos = [radius * angle.sin(), 0.0, radius - radius * angle.cos()];
        cams.push(look_at_camera(
            pos,
            target,
            [0.0, 1.0, 0.0],
            fx,
            fx,
            cx,
            cy,
            cfg.d_near,
            cfg.d_far,
        )?);
    }
    Ok(cams)
}

/// World-space ray of pixel `(x, y)` in `cam`, returned as `(a, b)` with
/// points `w(d) = a·d + b`, parameterized by camera-frame depth `d`.
fn pixel_ray(cam: &Camera, x: f64, y: f64) -> (Vec3, Vec3) {
    let dir_cam = [
        (x - cam.k[0][2]) / cam.k[0][0],
        (y - cam.k[1][2]) / cam.k[1][1],
        1.0,
    ];
    let r = &cam.r;
    let a = [
        r[0][0] * dir_cam[0] + r[1][0] * dir_cam[1] + r[2][0] * dir_cam[2],
        r[0][1] * dir_cam[0] + r[1][1] * dir_cam[1] + r[2][1] * dir_cam[2],
        r[0][2] * dir_cam[0] + r[1][2] * dir_cam[1] + r[2][2] * dir_cam[2],
    ];
    let t = &cam.t;
    let b = [
        -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
        -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
        -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
    ];
    (a, b)
}

/// Texture value of channel `ch` at a world surface point. Skewed world
/// coordinates keep the texture non-degenerate on vertical faces, and the
/// value depends only on the point — never on the viewing ray.
fn texture(seed: u64, cfg: &SceneConfig, ch: usize, w: &Vec3) -> f64 {
    let u = (w[0] + 0.37 * w[2]) / cfg.texture_cell_mm;
    let v = (w[1] + 0.19 * w[2]) / cfg.texture_cell_mm;
    let raw = fbm(seed.wrapping_add(0x100 * ch as u64 + 1), u, v, cfg.octaves);
    let contrast = if cfg.low_texture { 0.02 } else { 0.75 };
    0.5 + contrast * (raw - 0.5)
}

const LIGHT_DIR: Vec3 = [0.302, -0.302, -0.905];

/// The surface a seed renders, re-derivable without rendering.
fn scene_surface(seed: u64, cfg: &SceneConfig) -> Surface {
    sample_surface(&mut seeded_rng(seed ^ 0x5CE9E5), cfg)
}

/// Deterministically renders one scene.
pub fn generate_scene<T: Real>(seed: u64, cfg: &SceneConfig) -> Result<SceneSample<T>> {
    let cameras = arc_cameras(cfg)?;
    let surface = scene_surface(seed, cfg);
    let tex_seed = splitmix64(seed);
    let (h, w) = (cfg.height, cfg.width);

    let mut images = Vec::with_capacity(cfg.views);
    let mut gt = vec![0.0f64; h * w];
    for (v, cam) in cameras.iter().enumerate() {
        let mut img = vec![T::zero(); 3 * h * w];
        for i in 0..h {
            for j in 0..w {
                let (a, b) = pixel_ray(cam, j as f64, i as f64);
                let d = surface.intersect(a, b).ok_or_else(|| {
                    Error::invalid("generate_scene", "a camera ray missed the surface")
                })?;
                let p = [a[0] * d + b[0], a[1] * d + b[1], a[2] * d + b[2]];
                let n = surface.normal(p[0], p[1]);
                let lambert =
                    (-(n[0] * LIGHT_DIR[0] + n[1] * LIGHT_DIR[1] + n[2] * LIGHT_DIR[2])).max(0.0);
                let shade = 0.55 + 0.45 * lambert;
                for ch in 0..3 {
                    img[ch * h * w + i * w + j] = T::of(texture(tex_seed, cfg, ch, &p) * shade);
                }
                if v == 0 {
                    gt[i * w + j] = d;
                }
            }
        }
        images.push(Tensor::new(&[3, h, w], img)?);
    }
    let sample = SceneSample {
        images,
        cameras,
        gt_depth: Tensor::new(&[h, w], gt)?,
        seed,
    };
    sample.validate()?;
    Ok(sample)
}

/// Analytic depth map of any view of a scene, re-derived from the seed.
pub fn view_depth_map(seed: u64, cfg: &SceneConfig, view: usize) -> Result<Tensor<f64>> {
    let cameras = arc_cameras(cfg)?;
    let cam = cameras
        .get(view)
        .ok_or_else(|| Error::invalid("view_depth_map", format!("no view {view}")))?;
    let surface = scene_surface(seed, cfg);
    let (h, w) = (cfg.height, cfg.width);
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let (a, b) = pixel_ray(cam, j as f64, i as f64);
            out[i * w + j] = surface
                .intersect(a, b)
                .ok_or_else(|| Error::invalid("view_depth_map", "ray missed the surface"))?;
        }
    }
    Tensor::new(&[h, w], out)
}

/// Analytic visibility oracle: 1 where the reference pixel's surface point
/// is seen unoccluded by `view` AND every source pixel under its bilinear
/// footprint lies on the same surface patch (within `tol_mm`). Zero at
/// occlusions, out-of-frustum pixels, and depth-discontinuity footprints.
/// This is test/evaluation machinery — the pipeline itself only ever masks
/// by frustum bounds.
pub fn visibility_mask<T: Real>(
    sample: &SceneSample<T>,
    cfg: &SceneConfig,
    view: usize,
    tol_mm: f64,
) -> Result<Tensor<f64>> {
    use crate::geometry::project_point;
    if view == 0 || view >= sample.cameras.len() {
        return Err(Error::invalid("visibility_mask", format!("bad source view {view}")));
    }
    let src_depth = view_depth_map(sample.seed, cfg, view)?;
    let cam0 = &sample.cameras[0];
    let cam_v = &sample.cameras[view];
    let (h, w) = (cfg.height, cfg.width);
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let d = sample.gt_depth.data()[i * w + j];
            let (a, b) = pixel_ray(cam0, j as f64, i as f64);
            let p = [a[0] * d + b[0], a[1] * d + b[1], a[2] * d + b[2]];
            let ([x, y], d_v) = project_point(cam_v, &p)?;
            if d_v <= 0.0 || x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let same_patch = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(cx, cy)| (src_depth.data()[cy * w + cx] - d_v).abs() <= tol_mm);
            if same_patch {
                out[i * w + j] = 1.0;
            }
        }
    }
    Tensor::new(&[h, w], out)
}

// ---------------------------------------------------------------------------
// Ideal matching descriptors
// ---------------------------------------------------------------------------

/// Offset pattern shared by every view: one sub-pixel tap per channel,
/// centered on the feature cell.
fn descriptor_offsets(scale: usize) -> Vec<(f64, f64)> {
    let mut rng = seeded_rng(0xDE5C);
    let s = scale as f64;
    (0..FEATURE_CHANNELS)
        .map(|_| {
            (
                rng.gen_range(0.0..s) - s / 2.0,
                rng.gen_range(0.0..s) - s / 2.0,
            )
        })
        .collect()
}

/// Texture-derived matching features at `1/scale` resolution: each channel
/// bilinearly samples the image intensity at a fixed sub-pixel offset, then
/// each group of channels is mean-centered and L2-normalized per pixel.
/// These stand in for a perfectly trained feature extractor when testing
/// the plane-sweep machinery in isolation.
pub fn ideal_features<T: Real>(image: &Tensor<T>, scale: usize, groups: usize) -> Result<Tensor<T>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(
            "ideal_features",
            format!("expected [3,H,W], got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::invalid(
            "ideal_features",
            format!("{h}x{w} not divisible by the feature scale {scale}"),
        ));
    }
    let c = FEATURE_CHANNELS;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid("ideal_features", "groups must divide the channels"));
    }
    let (hf, wf) = (h / scale, w / scale);
    let data = image.data();
    let gray = |x: f64, y: f64| -> f64 {
        let xc = x.clamp(0.0, (w - 1) as f64);
        let yc = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (xc.floor(), yc.floor());
        let (i0, j0) = (y0 as usize, x0 as usize);
        let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
        let (fx, fy) = (xc - x0, yc - y0);
        let mut acc = 0.0;
        for ch in 0..3 {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let v00 = Real::to_f64(plane[i0 * w + j0]);
            let v10 = Real::to_f64(plane[i0 * w + j1]);
            let v01 = Real::to_f64(plane[i1 * w + j0]);
            let v11 = Real::to_f64(plane[i1 * w + j1]);
            acc += (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy;
        }
        acc / 3.0
    };

    let offsets = descriptor_offsets(scale);
    let gc = c / groups;
    let mut out = vec![T::zero(); c * hf * wf];
    let mut vals = vec![0.0f64; c];
    for i in 0..hf {
        for j in 0..wf {
            for (ch, &(ox, oy)) in offsets.iter().enumerate() {
                vals[ch] = gray((scale * j) as f64 + ox, (scale * i) as f64 + oy);
            }
            for g in 0..groups {
                let slot = &mut vals[g * gc..(g + 1) * gc];
                let mean = slot.iter().sum::<f64>() / gc as f64;
                for v in slot.iter_mut() {
                    *v -= mean;
                }
                let norm = slot.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
                for (k, v) in slot.iter().enumerate() {
                    out[(g * gc + k) * hf * wf + i * wf + j] = T::of(v / norm);
                }
            }
        }
    }
    Tensor::new(&[c, hf, wf], out)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneRecord {
    pub name: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Disjoint per-scene seeds derived from one dataset seed.
pub fn scene_seeds(dataset_seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| splitmix64(dataset_seed.wrapping_add(i))).collect()
}

/// Fixed train/val split: the first `ceil(count·train_fraction)` scenes
/// train, the rest validate.
pub fn split_records(dataset_seed: u64, count: usize, train_fraction: f64) -> Result<Vec<SceneRecord>> {
    if count < 2 {
        return Err(Error::invalid("generate_dataset", format!("need >= 2 scenes, got {count}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::invalid("generate_dataset", "train fraction outside [0, 1]"));
    }
    let n_train = ((count as f64) * train_fraction).ceil() as usize;
    Ok(scene_seeds(dataset_seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, seed)| SceneRecord {
            name: format!("scene_{i:04}"),
            seed,
            split: if i < n_train { Split::Train } else { Split::Val },
        })
        .collect())
}

/// Renders `count` scenes to `out_dir` and writes a line-oriented JSON
/// manifest. Returns the records in manifest order.
pub fn generate_dataset(
    dataset_seed: u64,
    count: usize,
    train_fraction: f64,
    cfg: &SceneConfig,
    out_dir: &Path,
) -> Result<Vec<SceneRecord>> {
    let records = split_records(dataset_seed, count, train_fraction)?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    for rec in &records {
        let sample: SceneSample<f32> = generate_scene(rec.seed, cfg)?;
        write_scene(&sample, &out_dir.join(&rec.name))?;
        manifest.push_str(&format!(
            "{{\"scene\":\"{}\",\"split\":\"{}\",\"seed\":{},\"views\":{},\"height\":{},\"width\":{}}}\n",
            rec.name,
            rec.split.as_str(),
            rec.seed,
            cfg.views,
            cfg.height,
            cfg.width
        ));
    }
    std::fs::write(out_dir.join("manifest.jsonl"), manifest)?;
    Ok(records)
}

/// Writes one scene: `view_{v}.pfm` (3-channel float raster), `cam_{v}.txt`,
/// and `depth.pfm` for the reference view.
pub fn write_scene<T: Real>(sample: &SceneSample<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (v, (img, cam)) in sample.images.iter().zip(sample.cameras.iter()).enumerate() {
        save_pfm_color(&dir.join(format!("view_{v}.pfm")), img)?;
        write_camera(&dir.join(format!("cam_{v}.txt")), cam)?;
    }
    save_pfm_gray(&dir.join("depth.pfm"), &sample.gt_depth)
}

/// Reads a scene directory written by [`write_scene`].
pub fn load_scene<T: Real>(dir: &Path, seed: u64) -> Result<SceneSample<T>> {
    let mut images = Vec::new();
    let mut cameras = Vec::new();
    for v in 0.. {
        let img_path = dir.join(format!("view_{v}.pfm"));
        if !img_path.exists() {
            break;
        }
        images.push(load_pfm::<T>(&img_path)?);
        cameras.push(read_camera(&dir.join(format!("cam_{v}.txt")))?);
    }
    if images.is_empty() {
        return Err(Error::invalid("load_scene", format!("no views under {}", dir.display())));
    }
    let gt_depth = load_pfm::<f64>(&dir.join("depth.pfm"))?;
    let sample = SceneSample { images, cameras, gt_depth, seed };
    sample.validate()?;
    Ok(sample)
}

fn write_camera(path: &Path, cam: &Camera) -> Result<()> {
    let mut s = String::from("K\n");
    for row in &cam.k {
        s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", row[0], row[1], row[2]));
    }
    s.push_str("R\n");
    for row in &cam.r {
        s.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", row[0], row[1], row[2]));
    }
    s.push_str(&format!(
        "t\n{:.17e} {:.17e} {:.17e}\nrange\n{:.17e} {:.17e}\n",
        cam.t[0], cam.t[1], cam.t[2], cam.d_near, cam.d_far
    ));
    Ok(std::fs::write(path, s)?)
}

fn read_camera(path: &Path) -> Result<Camera> {
    let text = std::fs::read_to_string(path)?;
    let nums: Vec<f64> = text
        .split_whitespace()
        .filter_map(|tok| tok.parse().ok())
        .collect();
    if nums.len() != 23 {
        return Err(Error::parse("read_camera: expected 23 numbers"));
    }
    let grab = |o: usize| [[nums[o], nums[o + 1], nums[o + 2]],
        [nums[o + 3], nums[o + 4], nums[o + 5]],
        [nums[o + 6], nums[o + 7], nums[o + 8]]];
    Camera::new(
        grab(0),
        grab(9),
        [nums[18], nums[19], nums[20]],
        nums[21],
        nums[22],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::depthmap_warp_plain;

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = SceneConfig::default();
        let a: SceneSample<f32> = generate_scene(42, &cfg).unwrap();
        let b: SceneSample<f32> = generate_scene(42, &cfg).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.gt_depth.data(), b.gt_depth.data());
        let c: SceneSample<f32> = generate_scene(43, &cfg).unwrap();
        assert!(a.images[0].max_abs_diff(&c.images[0]).unwrap() > 0.0);
    }

    #[test]
    fn fronto_parallel_plane_has_exactly_constant_reference_depth() {
        let mut cfg = SceneConfig { geometry: GeometryKind::Plane, ..SceneConfig::default() };
        cfg.height = 16;
        cfg.width = 24;
        // Find a seed whose plane depth we then assert exactly.
        let s: SceneSample<f64> = generate_scene(7, &cfg).unwrap();
        let d0 = s.gt_depth.data()[0];
        assert!((450.0..=870.0).contains(&d0));
        for &d in s.gt_depth.data() {
            assert_eq!(d, d0, "reference camera is axis-aligned, so plane depth is constant");
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let cfg = SceneConfig { arc_degrees: 0.0, ..SceneConfig::default() };
        assert!(generate_scene::<f32>(1, &cfg).is_err(), "zero baseline");
        let cfg = SceneConfig { views: 1, ..SceneConfig::default() };
        assert!(generate_scene::<f32>(1, &cfg).is_err(), "single view");
    }

    #[test]
    fn ground_truth_stays_interior_with_margin() {
        let cfg = SceneConfig::default();
        for seed in 0..12u64 {
            let s: SceneSample<f32> = generate_scene(seed, &cfg).unwrap();
            s.validate().unwrap();
            let (lo, hi) = cfg.surface_depth_bounds();
            for &d in s.gt_depth.data() {
                assert!(d >= lo - 1e-9 && d <= hi + 1e-9, "seed {seed}: depth {d} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn photo_consistency_across_views() {
        // One seed per geometry family (checked below) so step occlusion is
        // exercised: masked pixels are excluded by the analytic visibility
        // oracle, everything else must match to interpolation error.
        for (kind, seed) in [
            (GeometryKind::Plane, 3u64),
            (GeometryKind::Slanted, 11),
            (GeometryKind::Steps, 19),
        ] {
            let cfg = SceneConfig { geometry: kind, ..SceneConfig::default() };
            let s: SceneSample<f64> = generate_scene(seed, &cfg).unwrap();
            for v in 1..s.images.len() {
                let (warped, mask) = depthmap_warp_plain(
                    &s.images[v],
                    &s.cameras[0],
                    &s.cameras[v],
                    s.gt_depth.data(),
                )
                .unwrap();
                let visible = visibility_mask(&s, &cfg, v, 10.0).unwrap();
                let (h, w) = (cfg.height, cfg.width);
                let mut worst = 0.0f64;
                let mut covered = 0usize;
                for i in 0..h {
                    for j in 0..w {
                        if mask.data()[i * w + j] < 0.5 || visible.data()[i * w + j] < 0.5 {
                            continue;
                        }
                        covered += 1;
                        for ch in 0..3 {
                            let a = s.images[0].data()[ch * h * w + i * w + j];
                            let b = warped.data()[ch * h * w + i * w + j];
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
                assert!(covered > h * w / 2, "seed {seed} view {v}: too little overlap");
                assert!(
                    worst <= 2.0 / 255.0,
                    "seed {seed} view {v}: photo-consistency residual {worst} exceeds 2/255"
                );
            }
        }
    }

    #[test]
    fn dataset_split_and_roundtrip() {
        let recs = split_records(5, 10, 0.8).unwrap();
        assert_eq!(recs.iter().filter(|r| r.split == Split::Train).count(), 8);
        assert_eq!(recs.iter().filter(|r| r.split == Split::Val).count(), 2);
        let seeds: std::collections::HashSet<u64> = recs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 10, "seeds must be disjoint");
        assert_eq!(split_records(5, 10, 0.8).unwrap(), recs, "split is deterministic");

        let dir = std::env::temp_dir().join(format!("scenes_rt_{}", std::process::id()));
        let cfg = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        let recs = generate_dataset(9, 2, 0.5, &cfg, &dir).unwrap();
        let manifest = std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 2);
        let original: SceneSample<f32> = generate_scene(recs[0].seed, &cfg).unwrap();
        let loaded: SceneSample<f32> = load_scene(&dir.join(&recs[0].name), recs[0].seed).unwrap();
        for (a, b) in original.images.iter().zip(loaded.images.iter()) {
            assert_eq!(a.data(), b.data(), "float rasters round-trip exactly at f32");
        }
        for (a, b) in original.cameras.iter().zip(loaded.cameras.iter()) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.r, b.r);
            assert_eq!(a.t, b.t);
        }
        assert!(original.gt_depth.max_abs_diff(&loaded.gt_depth).unwrap() < 1e-3);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ideal_features_are_normalized_and_view_dependent() {
        let cfg = SceneConfig::default();
        let s: SceneSample<f64> = generate_scene(21, &cfg).unwrap();
        let f0 = ideal_features(&s.images[0], 8, 8).unwrap();
        assert_eq!(f0.shape(), &[FEATURE_CHANNELS, 8, 12]);
        // Per-pixel group norms close to 1 (up to the epsilon).
        let (hf, wf) = (8, 12);
        for px in 0..hf * wf {
            for g in 0..8 {
                let mut sq = 0.0;
                for k in 0..4 {
                    let v = f0.data()[(g * 4 + k) * hf * wf + px];
                    sq += v * v;
                }
                assert!(sq <= 1.0 + 1e-9, "group norm {sq} above 1");
            }
        }
        let f1 = ideal_features(&s.images[1], 8, 8).unwrap();
        assert!(f0.max_abs_diff(&f1).unwrap() > 1e-3);
    }
}
