//! Deterministic synthetic scenes of textured fronto-parallel layers.
//!
//! Scene frame: layers are rectangles on planes `z = depth`, textured in
//! their own `(x, y)` coordinates. Cameras of a rig look down `+z`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{read_cameras, write_cameras, Camera, GeometryError, Intrinsics, Pose, RgbaImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    /// Alternating squares of `cell` texels.
    Checkerboard { cell: f64, colors: [[f32; 3]; 2] },
    /// Smooth lattice noise per channel, summed over octaves that halve in
    /// amplitude and double in frequency. `cell` is the coarsest lattice
    /// spacing in texels.
    ValueNoise { octaves: u32, seed: u64, cell: f64 },
    Flat { color: [f32; 3] },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u32, channel: usize, i: i64, j: i64) -> f64 {
    let mut h = splitmix(seed ^ ((octave as u64) << 56) ^ ((channel as u64) << 48));
    h = splitmix(h ^ i as u64);
    h = splitmix(h ^ (j as u64).rotate_left(32));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, octaves: u32, cell: f64, channel: usize, u: f64, v: f64) -> f64 {
    let (mut total, mut weight, mut amp, mut scale) = (0.0, 0.0, 1.0, cell);
    for o in 0..octaves {
        let (x, y) = (u / scale, v / scale);
        let (i, j) = (x.floor(), y.floor());
        let (fx, fy) = (smoothstep(x - i), smoothstep(y - j));
        let (i, j) = (i as i64, j as i64);
        let l = |di, dj| lattice(seed, o, channel, i + di, j + dj);
        let top = l(0, 0) + (l(1, 0) - l(0, 0)) * fx;
        let bottom = l(0, 1) + (l(1, 1) - l(0, 1)) * fx;
        total += amp * (top + (bottom - top) * fy);
        weight += amp;
        amp *= 0.5;
        scale *= 0.5;
    }
    total / weight
}

impl Texture {
    pub fn validate(&self) -> Result<()> {
        let ok_color = |c: &[f32; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        let fine = match self {
            Texture::Checkerboard { cell, colors } => *cell > 0.0 && colors.iter().all(ok_color),
            Texture::ValueNoise { octaves, cell, .. } => *octaves >= 1 && *cell > 0.0,
            Texture::Flat { color } => ok_color(color),
        };
        if fine {
            Ok(())
        } else {
            Err(SynthError::InvalidScene(format!("bad texture {self:?}")))
        }
    }

    /// Color at texel coordinates `(u, v)`.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        match self {
            Texture::Checkerboard { cell, colors } => {
                let parity = ((u / cell).floor() as i64 + (v / cell).floor() as i64).rem_euclid(2);
                colors[parity as usize]
            }
            Texture::ValueNoise { octaves, seed, cell } => {
                std::array::from_fn(|c| value_noise(*seed, *octaves, *cell, c, u, v) as f32)
            }
            Texture::Flat { color } => *color,
        }
    }
}

/// Opaque textured rectangle on the plane `z = depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub depth: f64,
    /// `[x_min, x_max, y_min, y_max]` in scene units.
    pub extent: [f64; 4],
    /// Texels per scene unit.
    pub texel_density: f64,
    pub texture: Texture,
}

impl Layer {
    fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, x1, y0, y1] = self.extent;
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub layers: Vec<Layer>,
    pub background: [f32; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut depths = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.depth > 0.0 && l.depth.is_finite()) {
                return Err(SynthError::InvalidScene(format!("layer {i} depth {} is not positive", l.depth)));
            }
            let [x0, x1, y0, y1] = l.extent;
            if !(x0 < x1 && y0 < y1) || !(l.texel_density > 0.0) {
                return Err(SynthError::InvalidScene(format!("layer {i} has an empty extent or bad density")));
            }
            l.texture.validate()?;
            depths.push(l.depth);
        }
        depths.sort_by(f64::total_cmp);
        if depths.windows(2).any(|w| w[0] == w[1]) {
            return Err(SynthError::InvalidScene("layer depths must be distinct".into()));
        }
        if !self.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(SynthError::InvalidScene("background color outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-pixel camera-frame depth; `f32::INFINITY` where no layer was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

const DEPTH_MAGIC: &[u8; 4] = b"DSWD";

impl DepthMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    /// Little-endian raster: `"DSWD"`, width, height, a reserved zero word, then binary32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SynthError::InvalidDataset(format!("depth raster: {m}"));
        if bytes.len() < 16 || &bytes[..4] != DEPTH_MAGIC {
            return Err(bad("missing DSWD header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height) = (word(4), word(8));
        let n = width as usize * height as usize;
        if bytes.len() != 16 + 4 * n {
            return Err(bad(&format!("expected {} bytes for {width}x{height}, got {}", 16 + 4 * n, bytes.len())));
        }
        let data = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { width, height, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

/// Ray-casts every pixel center against the layers; the nearest hit in front of the camera wins.
pub fn render_view(scene: &SceneSpec, camera: &Camera) -> (RgbaImage, DepthMap) {
    let (w, h) = (camera.width(), camera.height());
    let kinv = camera.intrinsics.inverse_matrix();
    let r = *camera.pose.rotation();
    let rt = r.transpose();
    let center = camera.pose.center();
    let bg = scene.background;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgba = Vec::with_capacity(4 * w as usize);
            let mut depth = Vec::with_capacity(w as usize);
            for x in 0..w {
                let ray_cam = kinv * Vector3::new(x as f64, y as f64, 1.0);
                let ray = rt * ray_cam;
                let mut best: Option<(f64, &Layer, f64, f64)> = None;
                for layer in &scene.layers {
                    if ray.z.abs() < 1e-15 {
                        continue;
                    }
                    let t = (layer.depth - center.z) / ray.z;
                    if t <= 0.0 || best.is_some_and(|(bt, ..)| bt <= t) {
                        continue;
                    }
                    let p = center + ray * t;
                    if layer.contains(p.x, p.y) {
                        best = Some((t, layer, p.x, p.y));
                    }
                }
                match best {
                    Some((t, layer, px, py)) => {
                        let c = layer.texture.sample(px * layer.texel_density, py * layer.texel_density);
                        rgba.extend_from_slice(&[c[0], c[1], c[2], 1.0]);
                        // ray_cam has unit z, so t is the camera-frame depth.
                        depth.push(t as f32);
                    }
                    None => {
                        rgba.extend_from_slice(&[bg[0], bg[1], bg[2], 1.0]);
                        depth.push(f32::INFINITY);
                    }
                }
            }
            (rgba, depth)
        })
        .collect();
    let mut rgba = Vec::with_capacity(4 * (w * h) as usize);
    let mut depth = Vec::with_capacity((w * h) as usize);
    for (c, d) in rows {
        rgba.extend(c);
        depth.extend(d);
    }
    let image = RgbaImage::from_raw(w, h, rgba).expect("texture colors lie in [0, 1]");
    (image, DepthMap { width: w, height: h, data: depth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RigLayout {
    /// `count` cameras centered on the origin along `+x`, `spacing` apart,
    /// with uniform center jitter of up to `jitter` per axis and rotation
    /// jitter of up to `rotation_jitter` radians.
    LinearTrack { count: usize, spacing: f64, jitter: f64, #[serde(default)] rotation_jitter: f64, seed: u64 },
    Explicit { poses: Vec<ExplicitPose> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitPose {
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub intrinsics: Intrinsics,
    pub layout: RigLayout,
}

impl RigSpec {
    pub fn linear_track(intrinsics: Intrinsics, count: usize, spacing: f64, jitter: f64, seed: u64) -> Self {
        Self { intrinsics, layout: RigLayout::LinearTrack { count, spacing, jitter, rotation_jitter: 0.0, seed } }
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.intrinsics.validate()?;
        match &self.layout {
            RigLayout::LinearTrack { count, spacing, jitter, rotation_jitter, seed } => {
                if *count == 0 || !(spacing.is_finite() && jitter.is_finite() && *jitter >= 0.0 && *rotation_jitter >= 0.0) {
                    return Err(SynthError::InvalidRig(format!("bad linear track {:?}", self.layout)));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mid = (*count as f64 - 1.0) / 2.0;
                (0..*count)
                    .map(|i| {
                        let mut j = || if *jitter > 0.0 { rng.gen_range(-*jitter..=*jitter) } else { 0.0 };
                        let c = Vector3::new((i as f64 - mid) * spacing + j(), j(), j());
                        let rot = if *rotation_jitter > 0.0 {
                            let mut a = || rng.gen_range(-*rotation_jitter..=*rotation_jitter);
                            *Rotation3::from_euler_angles(a(), a(), a()).matrix()
                        } else {
                            Matrix3::identity()
                        };
                        Ok(Camera::new(self.intrinsics, Pose::from_center(rot, c)?)?)
                    })
                    .collect()
            }
            RigLayout::Explicit { poses } => poses
                .iter()
                .map(|p| {
                    let c = Vector3::from(p.center);
                    Ok(Camera::new(self.intrinsics, Pose::from_center(Matrix3::from_row_slice(&p.rotation), c)?)?)
                })
                .collect(),
        }
    }
}

/// Parameters of [`random_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    /// Nearest and farthest layer depth.
    pub depth_range: (f64, f64),
    pub layers: usize,
    /// Half-width of the area the farthest layer must cover, as a multiple of its depth.
    pub coverage: f64,
    pub octaves: u32,
    /// Coarsest noise cell in texels; one texel per pixel at unit focal length and depth.
    pub cell: f64,
    pub texel_density: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self { depth_range: (2.0, 8.0), layers: 3, coverage: 1.2, octaves: 3, cell: 6.0, texel_density: 24.0 }
    }
}

/// A random scene: a far layer covering the whole view plus nearer
/// rectangles covering part of it, all with value-noise textures.
pub fn random_scene(config: &SceneGenConfig, seed: u64) -> Result<SceneSpec> {
    let (near, far) = config.depth_range;
    if !(near > 0.0 && far > near) || config.layers == 0 {
        return Err(SynthError::InvalidScene(format!("bad generator config {config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.layers);
    // Sample inverse depths so layers spread evenly in disparity.
    let mut inv: Vec<f64> = (0..config.layers - 1).map(|_| rng.gen_range(1.0 / far..1.0 / near)).collect();
    inv.sort_by(|a, b| b.total_cmp(a));
    let far_half = config.coverage * far;
    let texture = |rng: &mut ChaCha8Rng| Texture::ValueNoise { octaves: config.octaves, seed: rng.gen(), cell: config.cell };
    layers.push(Layer {
        depth: far,
        extent: [-far_half, far_half, -far_half, far_half],
        texel_density: config.texel_density / far,
        texture: texture(&mut rng),
    });
    for &d_inv in &inv {
        let depth = 1.0 / d_inv;
        // Rectangles spanning roughly a third to a half of the field at their depth.
        let half = depth * 0.5;
        let (w, h) = (rng.gen_range(0.3..0.6) * half, rng.gen_range(0.3..0.6) * half);
        let (cx, cy) = (rng.gen_range(-0.4..0.4) * half, rng.gen_range(-0.4..0.4) * half);
        layers.push(Layer {
            depth,
            extent: [cx - w, cx + w, cy - h, cy + h],
            texel_density: config.texel_density / depth,
            texture: texture(&mut rng),
        });
    }
    let scene = SceneSpec { layers, background: [0.5, 0.5, 0.5] };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene: SceneSpec,
    pub rig: RigSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub scene: SceneSpec,
    pub rig: RigSpec,
    pub cameras: String,
    pub views: Vec<ViewRecord>,
    /// Depths of the layers, nearest first.
    pub layer_depths: Vec<f64>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "viewsynth-dataset";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scenes: Vec<SceneRecord>,
}

/// Renders every view of every scene and writes PNGs, depth rasters,
/// per-scene camera files and `manifest.json` under `out`.
pub fn make_dataset(entries: &[SceneEntry], out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut scenes = Vec::with_capacity(entries.len());
    for (s, entry) in entries.iter().enumerate() {
        entry.scene.validate()?;
        let cameras = entry.rig.cameras()?;
        let id = format!("scene_{s:04}");
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cameras_name = format!("{id}/cameras.jsonl");
        write_cameras(out.join(&cameras_name), &cameras)?;
        let mut views = Vec::with_capacity(cameras.len());
        for (v, cam) in cameras.iter().enumerate() {
            let (image, depth) = render_view(&entry.scene, cam);
            let rec = ViewRecord { image: format!("{id}/view_{v:03}.png"), depth: format!("{id}/view_{v:03}.depth") };
            image.save_rgb_png(out.join(&rec.image))?;
            depth.save(out.join(&rec.depth))?;
            views.push(rec);
        }
        let mut layer_depths: Vec<f64> = entry.scene.layers.iter().map(|l| l.depth).collect();
        layer_depths.sort_by(f64::total_cmp);
        scenes.push(SceneRecord { id, scene: entry.scene.clone(), rig: entry.rig.clone(), cameras: cameras_name, views, layer_depths });
    }
    let manifest = Manifest { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION, scenes };
    let path = out.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(&mut f, &manifest).expect("manifest serializes");
    f.write_all(b"\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// One posed view as stored on disk.
#[derive(Debug, Clone)]
pub struct View {
    pub image: RgbaImage,
    pub camera: Camera,
    pub depth: DepthMap,
}

#[derive(Debug, Clone)]
pub struct SceneData {
    pub id: String,
    pub spec: SceneSpec,
    pub views: Vec<View>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    /// Loads `manifest.json` from `dir` (or the manifest file itself) and every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_NAME))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| SynthError::Manifest { path: manifest_path.display().to_string(), message: e.to_string() })?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest {
                path: manifest_path.display().to_string(),
                message: format!("unsupported format {} v{}", manifest.format, manifest.version),
            });
        }
        let scenes = manifest
            .scenes
            .iter()
            .map(|rec| {
                let cameras = read_cameras(root.join(&rec.cameras))?;
                if cameras.len() != rec.views.len() {
                    return Err(SynthError::InvalidDataset(format!(
                        "{}: {} cameras for {} views",
                        rec.id,
                        cameras.len(),
                        rec.views.len()
                    )));
                }
                let views = rec
                    .views
                    .iter()
                    .zip(cameras)
                    .map(|(v, camera)| {
                        let image = RgbaImage::load_png(root.join(&v.image))?;
                        let depth = DepthMap::load(root.join(&v.depth))?;
                        if (image.width(), image.height()) != (camera.width(), camera.height()) {
                            return Err(SynthError::InvalidDataset(format!("{} does not match its camera size", v.image)));
                        }
                        Ok(View { image, camera, depth })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SceneData { id: rec.id.clone(), spec: rec.scene.clone(), views })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { root, manifest, scenes })
    }

    pub fn view_count(&self) -> usize {
        self.scenes.iter().map(|s| s.views.len()).sum()
    }
}

/// Unprojects pixel `(x, y)` of `from` at its stored depth and projects it into `to`.
pub fn transfer_pixel(from: &Camera, depth: f32, x: u32, y: u32, to: &Camera) -> Option<Vector2<f64>> {
    if !depth.is_finite() {
        return None;
    }
    let p = from.unproject(&Vector2::new(x as f64, y as f64), depth as f64).ok()?;
    to.project(&p).ok().map(|(uv, _)| uv)
}
