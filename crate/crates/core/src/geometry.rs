//! Pinhole cameras, plane-induced homographies and alpha-aware bilinear warping.
//!
//! Pixel centers sit at integer coordinates: `(0, 0)` is the center of the
//! top-left pixel. Poses are world-to-camera: `x_cam = R * x_world + t`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const ORTHONORMAL_TOL: f64 = 1e-6;
/// Homogeneous scale below which a mapped point is treated as behind the source.
const MIN_HOMOGENEOUS_W: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix: {0}")]
    InvalidRotation(String),
    #[error("point is behind the camera (camera-frame depth {0})")]
    BehindCamera(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate homography: plane at depth {depth} passes through the source camera center")]
    DegenerateHomography { depth: f64 },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed camera record at line {line}: {message}")]
    CameraParse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 1x1 (got {}x{})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation(format!("|R^T R - I|_max = {err:e}")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidArgument("translation must be finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose of a camera centered at `center` (world coordinates) with world-to-camera rotation `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, pose })
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Projects a world point to pixel coordinates, returning the camera-frame depth alongside.
    pub fn project(&self, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let pc = self.pose.world_to_camera(point);
        if !(pc.z > 0.0) {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        let k = &self.intrinsics;
        let pixel = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
        Ok((pixel, pc.z))
    }

    /// World point seen at `pixel` with camera-frame depth `depth`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::InvalidArgument(format!("depth must be positive, got {depth}")));
        }
        let k = &self.intrinsics;
        let pc = Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
        Ok(self.pose.camera_to_world(&pc))
    }
}

/// 3x3 homography mapping homogeneous target pixels to source pixels.
///
/// The matrix is kept at its natural scale: the third homogeneous
/// coordinate of a mapped point is positive exactly when the point lies in
/// front of the source camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps a target pixel, or `None` when the mapped point is at or behind the source camera.
    #[inline]
    pub fn map(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if !(w > MIN_HOMOGENEOUS_W) {
            return None;
        }
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        Some((u, v))
    }
}

/// Homography induced by the plane fronto-parallel to `target` at target-frame depth `depth`.
pub fn plane_homography(source: &Camera, target: &Camera, depth: f64) -> Result<Homography> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(GeometryError::InvalidArgument(format!("plane depth must be positive, got {depth}")));
    }
    let rt = target.pose.rotation();
    let rs = source.pose.rotation();
    let r_rel = rs * rt.transpose();
    let t_rel = source.pose.translation() - r_rel * target.pose.translation();

    // Source center expressed in the target frame; the plane z = depth must not contain it.
    let source_center_z = (-(r_rel.transpose() * t_rel)).z;
    if ((source_center_z - depth) / depth).abs() < 1e-12 {
        return Err(GeometryError::DegenerateHomography { depth });
    }

    let normal = Vector3::new(0.0, 0.0, 1.0);
    let h = source.intrinsics.matrix()
        * (r_rel + t_rel * normal.transpose() / depth)
        * target.intrinsics.inverse_matrix();
    Ok(Homography(h))
}

/// Image with straight (non-premultiplied) RGBA channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl RgbaImage {
    /// Fully transparent black image.
    pub fn transparent(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; 4 * width as usize * height as usize] }
    }

    pub fn filled(width: u32, height: u32, rgba: [f32; 4]) -> Result<Self> {
        Self::from_fn(width, height, |_, _| rgba)
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 4]) -> Result<Self> {
        let mut data = Vec::with_capacity(4 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_raw(width, height, data)
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != 4 * width as usize * height as usize {
            return Err(GeometryError::InvalidImage(format!(
                "expected {} values for {width}x{height} RGBA, got {}",
                4 * width as usize * height as usize,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GeometryError::InvalidImage(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 4] {
        let i = 4 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    /// Pixel at signed coordinates, transparent black outside the image.
    #[inline]
    pub fn pixel_or_transparent(&self, x: i64, y: i64) -> [f32; 4] {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            [0.0; 4]
        } else {
            self.pixel(x as u32, y as u32)
        }
    }

    /// Crop with signed origin; pixels outside the image are transparent black.
    pub fn crop(&self, x0: i64, y0: i64, width: u32, height: u32) -> RgbaImage {
        let mut out = RgbaImage::transparent(width, height);
        for y in 0..height {
            for x in 0..width {
                let p = self.pixel_or_transparent(x0 + x as i64, y0 + y as i64);
                let i = 4 * (y as usize * width as usize + x as usize);
                out.data[i..i + 4].copy_from_slice(&p);
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| GeometryError::Codec { path: path.display().to_string(), source })?
            .into_rgba8();
        let (width, height) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::from_raw(width, height, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let img = image::RgbaImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| GeometryError::Codec { path: path.display().to_string(), source })
    }

    /// Saves only the color channels.
    pub fn save_rgb_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .chunks_exact(4)
            .flat_map(|p| [quantize(p[0]), quantize(p[1]), quantize(p[2])])
            .collect();
        let img = image::RgbImage::from_raw(self.width, self.height, bytes)
            .expect("buffer length matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| GeometryError::Codec { path: path.display().to_string(), source })
    }
}

/// Saves `[H, W]` values in `[0, 1]` as a 16-bit grayscale PNG (`round(v * 65535)`).
pub fn save_gray16_png(values: &[f32], width: u32, height: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != (width * height) as usize {
        return Err(GeometryError::InvalidImage(format!("{} values for a {width}x{height} image", values.len())));
    }
    let px: Vec<u16> = values.iter().map(|&v| (v as f64 * 65535.0).round().clamp(0.0, 65535.0) as u16).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width, height, px).expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| GeometryError::Codec { path: path.display().to_string(), source })
}

/// Saves 8-bit grayscale levels as a PNG.
pub fn save_gray8_png(levels: Vec<u8>, width: u32, height: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = image::GrayImage::from_raw(width, height, levels)
        .ok_or_else(|| GeometryError::InvalidImage(format!("level count does not match {width}x{height}")))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| GeometryError::Codec { path: path.display().to_string(), source })
}

/// `round(v * 255)` clamped to the 8-bit range.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Warps `source` into an `out_width x out_height` image whose pixel `(i, j)` samples `source`
/// at `homography(i, j)`.
pub fn warp_image(source: &RgbaImage, homography: &Homography, out_width: u32, out_height: u32) -> RgbaImage {
    warp_region(source, homography, 0, 0, out_width, out_height)
}

/// Like [`warp_image`] but the output covers target pixels `[x0, x0 + width) x [y0, y0 + height)`.
///
/// Each output pixel depends only on its absolute target coordinate, so
/// adjacent regions stitch together exactly.
pub fn warp_region(
    source: &RgbaImage,
    homography: &Homography,
    x0: i64,
    y0: i64,
    width: u32,
    height: u32,
) -> RgbaImage {
    let mut out = RgbaImage::transparent(width, height);
    for j in 0..height {
        for i in 0..width {
            let tx = (x0 + i as i64) as f64;
            let ty = (y0 + j as i64) as f64;
            if let Some((u, v)) = homography.map(tx, ty) {
                let px = sample_bilinear(source, u, v);
                let k = 4 * (j as usize * width as usize + i as usize);
                out.data[k..k + 4].copy_from_slice(&px);
            }
        }
    }
    out
}

/// Alpha-weighted bilinear sample. Color is renormalized by the covered alpha;
/// out-of-bounds taps contribute no coverage.
#[inline]
pub fn sample_bilinear(source: &RgbaImage, u: f64, v: f64) -> [f32; 4] {
    // Far outside: avoid overflowing the integer conversion below.
    let (w, h) = (source.width as f64, source.height as f64);
    if !(u > -1.0 && v > -1.0 && u < w && v < h) {
        return [0.0; 4];
    }
    let xf = u.floor();
    let yf = v.floor();
    let ax = u - xf;
    let ay = v - yf;
    let x = xf as i64;
    let y = yf as i64;
    if ax == 0.0 && ay == 0.0 {
        return source.pixel_or_transparent(x, y);
    }
    let taps = [
        (x, y, (1.0 - ax) * (1.0 - ay)),
        (x + 1, y, ax * (1.0 - ay)),
        (x, y + 1, (1.0 - ax) * ay),
        (x + 1, y + 1, ax * ay),
    ];
    let mut rgb = [0.0f64; 3];
    let mut alpha = 0.0f64;
    for (tx, ty, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        let p = source.pixel_or_transparent(tx, ty);
        let a = wt * p[3] as f64;
        alpha += a;
        rgb[0] += a * p[0] as f64;
        rgb[1] += a * p[1] as f64;
        rgb[2] += a * p[2] as f64;
    }
    if alpha <= 0.0 {
        return [0.0; 4];
    }
    let c = |s: f64| ((s / alpha) as f32).clamp(0.0, 1.0);
    [c(rgb[0]), c(rgb[1]), c(rgb[2]), (alpha as f32).clamp(0.0, 1.0)]
}

/// On-disk camera record: one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(cam: &Camera) -> Self {
        let k = cam.intrinsics;
        let r = cam.pose.rotation();
        let t = cam.pose.translation();
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Camera> {
        let k = Intrinsics::new(rec.fx, rec.fy, rec.cx, rec.cy, rec.width, rec.height)?;
        let pose = Pose::new(
            Matrix3::from_row_slice(&rec.rotation),
            Vector3::new(rec.translation[0], rec.translation[1], rec.translation[2]),
        )?;
        Camera::new(k, pose)
    }
}

pub fn write_cameras(path: impl AsRef<Path>, cameras: &[Camera]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| GeometryError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for cam in cameras {
        let line = serde_json::to_string(&CameraRecord::from(cam)).expect("camera record serializes");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Reads a cameras file: one JSON object per non-empty line.
pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let io_err = |source| GeometryError::Io { path: path.display().to_string(), source };
    let f = BufReader::new(fs::File::open(path).map_err(io_err)?);
    let mut cameras = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        cameras.push(parse_camera(&line, i + 1)?);
    }
    Ok(cameras)
}

pub fn parse_camera(text: &str, line: usize) -> Result<Camera> {
    let rec: CameraRecord = serde_json::from_str(text)
        .map_err(|e| GeometryError::CameraParse { line, message: e.to_string() })?;
    Camera::try_from(&rec).map_err(|e| GeometryError::CameraParse { line, message: e.to_string() })
}
