//! Calibrated pinhole cameras, inverse-depth hypothesis sampling,
//! plane-sweep homography warping, and frustum-cube normalization.
//!
//! All camera algebra runs in `f64` regardless of the feature dtype; only the
//! final sampling coordinates are cast down. Conventions: `x_cam = R·x_world + t`,
//! pixel `(u, v) = (K·x_cam).xy / depth`, with `u` along image columns.

use crate::error::{Error, Result};
use crate::ops::{bilinear_sample, bilinear_sample_plain};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Tolerance for rotation orthonormality and unit determinant.
pub const ROTATION_TOL: f64 = 1e-6;

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2];
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn invert3(a: &Mat3, op: &'static str) -> Result<Mat3> {
    let d = det3(a);
    if d.abs() < 1e-12 {
        return Err(Error::invalid(op, format!("singular 3x3 matrix (det {d:e})")));
    }
    let inv_d = 1.0 / d;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_d;
    out[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_d;
    out[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_d;
    out[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_d;
    out[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_d;
    out[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_d;
    out[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_d;
    out[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_d;
    out[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_d;
    Ok(out)
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: &Vec3, op: &'static str) -> Result<Vec3> {
    let n = norm(v);
    if n < 1e-12 {
        return Err(Error::invalid(op, "cannot normalize near-zero vector"));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

/// A calibrated pinhole camera with its scene depth range (millimetres).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Intrinsics in pixels; upper triangular, positive focal lengths.
    pub k: Mat3,
    /// World-to-camera rotation.
    pub r: Mat3,
    /// World-to-camera translation (mm).
    pub t: Vec3,
    /// Nearest scene depth plane (mm).
    pub d_near: f64,
    /// Farthest scene depth plane (mm).
    pub d_far: f64,
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, d_near: f64, d_far: f64) -> Result<Camera> {
        let cam = Camera { k, r, t, d_near, d_far };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_near > 0.0 && self.d_near < self.d_far && self.d_far.is_finite()) {
            return Err(Error::invalid(
                "camera",
                format!("need 0 < d_near < d_far, got [{}, {}]", self.d_near, self.d_far),
            ));
        }
        if self.k[1][0] != 0.0 || self.k[2][0] != 0.0 || self.k[2][1] != 0.0 {
            return Err(Error::invalid("camera", "intrinsics must be upper triangular"));
        }
        if !(self.k[0][0] > 0.0 && self.k[1][1] > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if (self.k[2][2] - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("camera", "K[2][2] must be 1"));
        }
        let rt_r = mat_mul(&transpose(&self.r), &self.r);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rt_r[i][j] - expect).abs() > ROTATION_TOL {
                    return Err(Error::invalid(
                        "camera",
                        format!("rotation not orthonormal: (RtR)[{i}][{j}] = {}", rt_r[i][j]),
                    ));
                }
            }
        }
        let d = det3(&self.r);
        if (d - 1.0).abs() > ROTATION_TOL {
            return Err(Error::invalid("camera", format!("rotation determinant {d} != 1")));
        }
        Ok(())
    }

    /// Camera for a feature map downscaled by `factor` (e.g. 0.25 for a
    /// quarter-resolution grid): the first two intrinsic rows scale, the pose
    /// and depth range are unchanged.
    pub fn scaled(&self, factor: f64) -> Result<Camera> {
        if !(factor > 0.0) {
            return Err(Error::invalid("camera_scaled", format!("factor {factor} must be positive")));
        }
        let mut k = self.k;
        for col in 0..3 {
            k[0][col] *= factor;
            k[1][col] *= factor;
        }
        Camera::new(k, self.r, self.t, self.d_near, self.d_far)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let rt = transpose(&self.r);
        let c = mat_vec(&rt, &self.t);
        [-c[0], -c[1], -c[2]]
    }

    /// World point of the reference-ray sample at pixel `(u, v)` and `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        let k_inv = invert3(&self.k, "unproject")?;
        let dir = mat_vec(&k_inv, &[u, v, 1.0]);
        let cam_pt = [dir[0] * depth, dir[1] * depth, dir[2] * depth];
        let rt = transpose(&self.r);
        let shifted = [cam_pt[0] - self.t[0], cam_pt[1] - self.t[1], cam_pt[2] - self.t[2]];
        Ok(mat_vec(&rt, &shifted))
    }
}

/// Perspective projection of a world point: returns `(pixel, depth)`.
/// Errors if the point is not strictly in front of the camera.
pub fn project_point(cam: &Camera, x_world: &Vec3) -> Result<([f64; 2], f64)> {
    let xc = mat_vec(&cam.r, x_world);
    let xc = [xc[0] + cam.t[0], xc[1] + cam.t[1], xc[2] + cam.t[2]];
    if xc[2] <= 0.0 {
        return Err(Error::invalid(
            "project_point",
            format!("point behind camera (depth {})", xc[2]),
        ));
    }
    let p = mat_vec(&cam.k, &xc);
    Ok(([p[0] / xc[2], p[1] / xc[2]], xc[2]))
}

/// Depth hypotheses for one cascade stage, uniform in inverse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    /// Depths in mm, ordered near to far (inverse depth strictly decreasing),
    /// except for a zero-width refinement window where all values coincide.
    pub values: Vec<f64>,
    pub stage: usize,
}

/// Samples `count` hypotheses uniformly in inverse depth.
///
/// With no `center`, the full scene range `[d_near, d_far]` is swept. A
/// refinement stage passes the previous depth estimate as `center` and a
/// window width as `span_fraction` of the full inverse-depth range; the window
/// is shifted to stay inside the scene range (preserving its width) and
/// clamped if wider than the range itself. `span_fraction = 0` collapses every
/// hypothesis onto `center`.
pub fn inverse_depth_hypotheses(
    d_near: f64,
    d_far: f64,
    count: usize,
    stage: usize,
    center: Option<f64>,
    span_fraction: Option<f64>,
) -> Result<DepthHypotheses> {
    if count < 2 {
        return Err(Error::invalid("inverse_depth_hypotheses", format!("need >= 2 hypotheses, got {count}")));
    }
    if !(d_near > 0.0 && d_near < d_far && d_far.is_finite()) {
        return Err(Error::invalid(
            "inverse_depth_hypotheses",
            format!("need 0 < d_near < d_far, got [{d_near}, {d_far}]"),
        ));
    }
    let inv_near = 1.0 / d_near;
    let inv_far = 1.0 / d_far;
    let full = inv_near - inv_far;

    let (hi, lo) = match center {
        None => (inv_near, inv_far),
        Some(c) => {
            if !(c >= d_near && c <= d_far) {
                return Err(Error::invalid(
                    "inverse_depth_hypotheses",
                    format!("center {c} outside scene range [{d_near}, {d_far}]"),
                ));
            }
            let frac = span_fraction.ok_or_else(|| {
                Error::invalid("inverse_depth_hypotheses", "refinement stage requires a span fraction")
            })?;
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::invalid(
                    "inverse_depth_hypotheses",
                    format!("span fraction {frac} outside [0, 1]"),
                ));
            }
            let w = frac * full;
            let inv_c = 1.0 / c;
            let mut hi = inv_c + w / 2.0;
            let mut lo = inv_c - w / 2.0;
            // Shift the window back inside the scene range without shrinking.
            if lo < inv_far {
                hi += inv_far - lo;
                lo = inv_far;
            }
            if hi > inv_near {
                lo -= hi - inv_near;
                hi = inv_near;
            }
            (hi.min(inv_near), lo.max(inv_far))
        }
    };

    let mut values = Vec::with_capacity(count);
    if hi - lo <= 0.0 {
        values.resize(count, 1.0 / hi);
    } else {
        let step = (hi - lo) / (count - 1) as f64;
        for k in 0..count {
            // Walk from near (large inverse depth) to far.
            let inv = hi - step * k as f64;
            values.push(1.0 / inv);
        }
    }
    Ok(DepthHypotheses { values, stage })
}

/// The plane-induced homography mapping reference pixels to source pixels for
/// the fronto-parallel plane at `depth` in the reference frame.
///
/// With `R_rel = R_s R_rᵀ` and `t_rel = t_s − R_rel t_r`, a point on the plane
/// `nᵀ x_ref = depth` (optical-axis normal `n = (0,0,1)`) maps as
/// `x_src = (R_rel + t_rel nᵀ / depth) x_ref`, so
/// `H = K_s (R_rel + t_rel nᵀ / depth) K_r⁻¹`. (Formulations that write a
/// minus sign here put the plane offset on the other side of the plane
/// equation; both describe the same warp.)
pub fn plane_homography(cam_ref: &Camera, cam_src: &Camera, depth: f64) -> Result<Mat3> {
    if !(depth > 0.0) {
        return Err(Error::invalid("plane_homography", format!("depth {depth} must be positive")));
    }
    let r_rel = mat_mul(&cam_src.r, &transpose(&cam_ref.r));
    let rt = mat_vec(&r_rel, &cam_ref.t);
    let t_rel = [cam_src.t[0] - rt[0], cam_src.t[1] - rt[1], cam_src.t[2] - rt[2]];
    let mut m = r_rel;
    // Add t_rel · nᵀ / depth; with n along +z only the last column moves.
    for i in 0..3 {
        m[i][2] += t_rel[i] / depth;
    }
    let k_r_inv = invert3(&cam_ref.k, "plane_homography")?;
    Ok(mat_mul(&cam_src.k, &mat_mul(&m, &k_r_inv)))
}

/// Sampling coordinates (`[2, H, W]`, row 0 = x, row 1 = y) that pull source
/// features onto the reference grid through the plane at `depth`. Reference
/// pixels whose plane point falls behind the source camera are sent far out
/// of bounds so bilinear sampling masks them.
pub fn warp_coords<T: Real>(
    cam_ref: &Camera,
    cam_src: &Camera,
    depth: f64,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let h_mat = plane_homography(cam_ref, cam_src, depth)?;
    let mut data = vec![T::zero(); 2 * height * width];
    let hw = height * width;
    for y in 0..height {
        for x in 0..width {
            let p = mat_vec(&h_mat, &[x as f64, y as f64, 1.0]);
            let (sx, sy) = if p[2] > 1e-9 {
                (p[0] / p[2], p[1] / p[2])
            } else {
                (-1e9, -1e9)
            };
            data[y * width + x] = T::of(sx);
            data[hw + y * width + x] = T::of(sy);
        }
    }
    Tensor::new(&[2, height, width], data)
}

/// Plain plane-sweep warp of `src_feat` (`[C, H, W]`) onto the reference grid.
/// Returns the warped features and the in-bounds mask (`[H, W]`).
pub fn homography_warp_plain<T: Real>(
    src_feat: &Tensor<T>,
    cam_ref: &Camera,
    cam_src: &Camera,
    depth: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if src_feat.rank() != 3 {
        return Err(Error::shape(
            "homography_warp",
            format!("expected [C,H,W] features, got {:?}", src_feat.shape()),
        ));
    }
    let (h, w) = (src_feat.shape()[1], src_feat.shape()[2]);
    let coords = warp_coords::<T>(cam_ref, cam_src, depth, h, w)?;
    bilinear_sample_plain(src_feat, &coords)
}

/// Differentiable plane-sweep warp: gradients flow to the source features;
/// the geometry (and therefore the sampling grid) is a constant.
pub fn homography_warp<T: Real>(
    tape: &mut Tape<T>,
    src_feat: NodeId,
    cam_ref: &Camera,
    cam_src: &Camera,
    depth: f64,
) -> Result<(NodeId, Tensor<T>)> {
    let shape = tape.value(src_feat).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "homography_warp",
            format!("expected [C,H,W] features, got {shape:?}"),
        ));
    }
    let coords = warp_coords::<T>(cam_ref, cam_src, depth, shape[1], shape[2])?;
    let coords_node = tape.constant(coords);
    bilinear_sample(tape, src_feat, coords_node)
}

/// Sampling coordinates (`[2, H, W]`) mapping each reference pixel through its
/// own depth `depths[y·W + x]` into the source image. This generalizes
/// [`warp_coords`] to a per-pixel depth surface: unproject the pixel to the
/// reference camera frame, move to the source frame, and project. Pixels whose
/// 3D point lands behind the source camera (or with non-positive depth) are
/// sent far out of bounds so bilinear sampling masks them.
pub fn warp_coords_depthmap<T: Real>(
    cam_ref: &Camera,
    cam_src: &Camera,
    depths: &[f64],
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    if depths.len() != height * width {
        return Err(Error::shape(
            "warp_coords_depthmap",
            format!("{} depths for a {height}x{width} grid", depths.len()),
        ));
    }
    // x_src_cam = R_rel · (d · K_r⁻¹ p̃) + t_rel, then p = K_s x_src_cam:
    // p = d · M p̃ + K_s t_rel with M = K_s R_rel K_r⁻¹.
    let r_rel = mat_mul(&cam_src.r, &transpose(&cam_ref.r));
    let rt = mat_vec(&r_rel, &cam_ref.t);
    let t_rel = [cam_src.t[0] - rt[0], cam_src.t[1] - rt[1], cam_src.t[2] - rt[2]];
    let k_r_inv = invert3(&cam_ref.k, "warp_coords_depthmap")?;
    let m = mat_mul(&cam_src.k, &mat_mul(&r_rel, &k_r_inv));
    let kt = mat_vec(&cam_src.k, &t_rel);
    let mut data = vec![T::zero(); 2 * height * width];
    let hw = height * width;
    for y in 0..height {
        for x in 0..width {
            let d = depths[y * width + x];
            let ray = mat_vec(&m, &[x as f64, y as f64, 1.0]);
            let p = [d * ray[0] + kt[0], d * ray[1] + kt[1], d * ray[2] + kt[2]];
            let (sx, sy) = if d > 0.0 && p[2] > 1e-9 {
                (p[0] / p[2], p[1] / p[2])
            } else {
                (-1e9, -1e9)
            };
            data[y * width + x] = T::of(sx);
            data[hw + y * width + x] = T::of(sy);
        }
    }
    Tensor::new(&[2, height, width], data)
}

/// Plain per-pixel-depth warp of `src_feat` (`[C, H, W]`) onto the reference
/// grid. Returns the warped features and the in-bounds mask (`[H, W]`).
pub fn depthmap_warp_plain<T: Real>(
    src_feat: &Tensor<T>,
    cam_ref: &Camera,
    cam_src: &Camera,
    depths: &[f64],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if src_feat.rank() != 3 {
        return Err(Error::shape(
            "depthmap_warp",
            format!("expected [C,H,W] features, got {:?}", src_feat.shape()),
        ));
    }
    let (h, w) = (src_feat.shape()[1], src_feat.shape()[2]);
    let coords = warp_coords_depthmap::<T>(cam_ref, cam_src, depths, h, w)?;
    bilinear_sample_plain(src_feat, &coords)
}

/// Differentiable per-pixel-depth warp: gradients flow to the source features;
/// the sampling grid is a constant (the depth surface is treated as data).
pub fn depthmap_warp<T: Real>(
    tape: &mut Tape<T>,
    src_feat: NodeId,
    cam_ref: &Camera,
    cam_src: &Camera,
    depths: &[f64],
) -> Result<(NodeId, Tensor<T>)> {
    let shape = tape.value(src_feat).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "depthmap_warp",
            format!("expected [C,H,W] features, got {shape:?}"),
        ));
    }
    let coords = warp_coords_depthmap::<T>(cam_ref, cam_src, depths, shape[1], shape[2])?;
    let coords_node = tape.constant(coords);
    bilinear_sample(tape, src_feat, coords_node)
}

/// Normalizes a `(D, H, W)` hypothesis/pixel lattice into the unit cube over
/// the camera frustum: `u = x/(W−1)`, `v = y/(H−1)`,
/// `z = (1/d − 1/d_far) / (1/d_near − 1/d_far)`. Output is `[3, D·H·W]` with
/// cells ordered depth-major, then rows, then columns.
pub fn frustum_normalize(
    cam_ref: &Camera,
    depths: &[f64],
    height: usize,
    width: usize,
) -> Result<Tensor<f64>> {
    if cam_ref.d_near >= cam_ref.d_far {
        return Err(Error::invalid("frustum_normalize", "degenerate depth range"));
    }
    if depths.is_empty() || height == 0 || width == 0 {
        return Err(Error::invalid("frustum_normalize", "empty lattice"));
    }
    let inv_near = 1.0 / cam_ref.d_near;
    let inv_far = 1.0 / cam_ref.d_far;
    let denom = inv_near - inv_far;
    let tol = 1e-9 * denom;
    let cells = depths.len() * height * width;
    let mut data = vec![0.0f64; 3 * cells];
    let u_den = (width.max(2) - 1) as f64;
    let v_den = (height.max(2) - 1) as f64;
    let mut idx = 0;
    for &d in depths {
        let z = (1.0 / d - inv_far) / denom;
        if !(-tol..=1.0 + tol).contains(&z) {
            return Err(Error::invalid(
                "frustum_normalize",
                format!("depth {d} outside scene range [{}, {}]", cam_ref.d_near, cam_ref.d_far),
            ));
        }
        let z = z.clamp(0.0, 1.0);
        for y in 0..height {
            let v = y as f64 / v_den;
            for x in 0..width {
                data[idx] = x as f64 / u_den;
                data[cells + idx] = v;
                data[2 * cells + idx] = z;
                idx += 1;
            }
        }
    }
    Tensor::new(&[3, cells], data)
}

/// Builds a camera at `position` looking at `target`, with the image x-axis
/// perpendicular to `up`. Errors when the viewing direction is degenerate or
/// parallel to `up`.
#[allow(clippy::too_many_arguments)]
pub fn look_at_camera(
    position: Vec3,
    target: Vec3,
    up: Vec3,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    d_near: f64,
    d_far: f64,
) -> Result<Camera> {
    let forward = normalize(
        &[target[0] - position[0], target[1] - position[1], target[2] - position[2]],
        "look_at_camera",
    )?;
    let right = normalize(&cross(&up, &forward), "look_at_camera")?;
    let down = cross(&forward, &right);
    let r = [right, down, forward];
    let rp = mat_vec(&r, &position);
    let t = [-rp[0], -rp[1], -rp[2]];
    let k = [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]];
    Camera::new(k, r, t, d_near, d_far)
}

/// Serializes a camera to the plain-text block format (see README).
pub fn camera_to_text(cam: &Camera) -> String {
    let mut s = String::new();
    s.push_str("intrinsics\n");
    for row in &cam.k {
        s.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
    }
    s.push_str("rotation\n");
    for row in &cam.r {
        s.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
    }
    s.push_str("translation\n");
    s.push_str(&format!("{} {} {}\n", cam.t[0], cam.t[1], cam.t[2]));
    s.push_str("depth_range\n");
    s.push_str(&format!("{} {}\n", cam.d_near, cam.d_far));
    s
}

/// Parses the plain-text camera format and validates the result.
pub fn camera_from_text(text: &str) -> Result<Camera> {
    fn next_label(label: &'static str, tokens: &mut std::str::SplitWhitespace) -> Result<()> {
        match tokens.next() {
            Some(t) if t == label => Ok(()),
            Some(t) => Err(Error::parse(format!("camera text: expected '{label}', found '{t}'"))),
            None => Err(Error::parse(format!("camera text: missing '{label}' section"))),
        }
    }
    fn num(tokens: &mut std::str::SplitWhitespace) -> Result<f64> {
        let t = tokens
            .next()
            .ok_or_else(|| Error::parse("camera text: unexpected end of input"))?;
        t.parse::<f64>()
            .map_err(|_| Error::parse(format!("camera text: bad number '{t}'")))
    }

    let mut tokens = text.split_whitespace();
    let mut cam_k = [[0.0; 3]; 3];
    let mut cam_r = [[0.0; 3]; 3];
    let mut cam_t = [0.0; 3];
    next_label("intrinsics", &mut tokens)?;
    for row in &mut cam_k {
        for v in row.iter_mut() {
            *v = num(&mut tokens)?;
        }
    }
    next_label("rotation", &mut tokens)?;
    for row in &mut cam_r {
        for v in row.iter_mut() {
            *v = num(&mut tokens)?;
        }
    }
    next_label("translation", &mut tokens)?;
    for v in cam_t.iter_mut() {
        *v = num(&mut tokens)?;
    }
    next_label("depth_range", &mut tokens)?;
    let d_near = num(&mut tokens)?;
    let d_far = num(&mut tokens)?;
    if tokens.next().is_some() {
        return Err(Error::parse("camera text: trailing tokens"));
    }
    Camera::new(cam_k, cam_r, cam_t, d_near, d_far)
}
