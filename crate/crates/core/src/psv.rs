//! Plane-sweep volumes: each source image reprojected into the target camera
//! at a sequence of fronto-parallel depth planes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{plane_homography, warp_region, Camera, GeometryError, RgbaImage};

#[derive(Debug, Error)]
pub enum PsvError {
    #[error("invalid depth sampling: {0}")]
    InvalidSampling(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PsvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DepthScheme {
    /// Uniform steps in `1/d`, i.e. uniform disparity steps.
    #[default]
    InverseDepthUniform,
    DepthUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSampling {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
    #[serde(default)]
    pub scheme: DepthScheme,
}

impl DepthSampling {
    pub fn new(d_min: f64, d_max: f64, count: usize, scheme: DepthScheme) -> Result<Self> {
        let s = Self { d_min, d_max, count, scheme };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(PsvError::InvalidSampling(format!(
                "need 0 < d_min < d_max, got d_min={} d_max={}",
                self.d_min, self.d_max
            )));
        }
        if self.count < 2 {
            return Err(PsvError::InvalidSampling(format!("need at least 2 planes, got {}", self.count)));
        }
        Ok(())
    }

    /// Strictly increasing plane depths from `d_min` to `d_max` inclusive.
    pub fn depth_planes(&self) -> Vec<f64> {
        let last = (self.count - 1) as f64;
        (0..self.count)
            .map(|z| {
                if z == 0 {
                    return self.d_min;
                }
                if z == self.count - 1 {
                    return self.d_max;
                }
                let t = z as f64 / last;
                match self.scheme {
                    DepthScheme::DepthUniform => self.d_min + (self.d_max - self.d_min) * t,
                    DepthScheme::InverseDepthUniform => {
                        let (a, b) = (1.0 / self.d_min, 1.0 / self.d_max);
                        1.0 / (a + (b - a) * t)
                    }
                }
            })
            .collect()
    }

    /// Index of the plane closest to `depth` in the sampling's own metric
    /// (inverse depth for the inverse-depth scheme).
    pub fn nearest_plane(&self, depth: f64) -> usize {
        let planes = self.depth_planes();
        let key = |d: f64| match self.scheme {
            DepthScheme::InverseDepthUniform => 1.0 / d,
            DepthScheme::DepthUniform => d,
        };
        let k = key(depth);
        let mut best = 0;
        for (z, &d) in planes.iter().enumerate() {
            if (key(d) - k).abs() < (key(planes[best]) - k).abs() {
                best = z;
            }
        }
        best
    }
}

/// Rectangle of target pixels. The origin may be negative and the rectangle
/// may extend past the target image; reprojection is defined everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: i64,
    pub y0: i64,
    pub width: u32,
    pub height: u32,
}

impl Region {
    pub fn new(x0: i64, y0: i64, width: u32, height: u32) -> Self {
        Self { x0, y0, width, height }
    }

    pub fn full(camera: &Camera) -> Self {
        Self::new(0, 0, camera.width(), camera.height())
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A source image with its camera.
#[derive(Debug, Clone)]
pub struct PosedImage {
    pub image: RgbaImage,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSweepVolume {
    pub source_index: usize,
    pub region: Region,
    pub depths: Vec<f64>,
    /// One reprojected image per depth, each of the region's size.
    pub planes: Vec<RgbaImage>,
}

impl PlaneSweepVolume {
    pub fn depth_count(&self) -> usize {
        self.planes.len()
    }
}

/// Reprojects every source into `target` over `region`, one volume per source.
///
/// A plane whose homography is degenerate (it contains the source center) is
/// left fully transparent.
pub fn build_psv(
    sources: &[PosedImage],
    target: &Camera,
    sampling: &DepthSampling,
    region: Region,
) -> Result<Vec<PlaneSweepVolume>> {
    sampling.validate()?;
    if sources.is_empty() {
        return Err(PsvError::InvalidArgument("at least one source view is required".into()));
    }
    if region.is_empty() {
        return Err(PsvError::InvalidArgument(format!("empty region {region:?}")));
    }
    let depths = sampling.depth_planes();
    sources
        .iter()
        .enumerate()
        .map(|(k, src)| {
            let planes = depths
                .iter()
                .map(|&d| match plane_homography(&src.camera, target, d) {
                    Ok(h) => Ok(warp_region(&src.image, &h, region.x0, region.y0, region.width, region.height)),
                    Err(GeometryError::DegenerateHomography { depth }) => {
                        log::debug!("source {k}: degenerate plane at depth {depth}, leaving it transparent");
                        Ok(RgbaImage::transparent(region.width, region.height))
                    }
                    Err(e) => Err(e.into()),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PlaneSweepVolume { source_index: k, region, depths: depths.clone(), planes })
        })
        .collect()
}

/// Writes `psv_s{k}_z{z}.png` for every plane plus a `depths.txt` index.
pub fn dump_psv(volumes: &[PlaneSweepVolume], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)
        .map_err(|source| GeometryError::Io { path: dir.display().to_string(), source })?;
    let mut index = String::from("source\tplane\tdepth\tfile\n");
    for vol in volumes {
        for (z, plane) in vol.planes.iter().enumerate() {
            let name = format!("psv_s{}_z{}.png", vol.source_index, z);
            plane.save_png(dir.join(&name))?;
            let _ = writeln!(index, "{}\t{}\t{}\t{}", vol.source_index, z, vol.depths[z], name);
        }
    }
    let path = dir.join("depths.txt");
    std::fs::write(&path, index).map_err(|source| GeometryError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use nalgebra::{Matrix3, Vector3};

    fn textured(w: u32, h: u32) -> RgbaImage {
        RgbaImage::from_fn(w, h, |x, y| {
            let v = 0.5 + 0.4 * ((x as f32 * 0.7).sin() * (y as f32 * 0.45).cos());
            [v, 1.0 - v, 0.3, 1.0]
        })
        .unwrap()
    }

    fn camera_at(x: f64, z: f64, w: u32, h: u32) -> Camera {
        let k = Intrinsics::new(40.0, 40.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap();
        Camera::new(k, Pose::from_center(Matrix3::identity(), Vector3::new(x, 0.0, z)).unwrap()).unwrap()
    }

    #[test]
    fn depth_plane_schemes() {
        let inv = DepthSampling::new(1.0, 3.0, 3, DepthScheme::InverseDepthUniform).unwrap();
        let d = inv.depth_planes();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 1.5).abs() < 1e-12);
        assert_eq!(d[2], 3.0);
        let lin = DepthSampling::new(1.0, 3.0, 3, DepthScheme::DepthUniform).unwrap();
        assert_eq!(lin.depth_planes(), vec![1.0, 2.0, 3.0]);

        let many = DepthSampling::new(0.5, 40.0, 96, DepthScheme::InverseDepthUniform).unwrap().depth_planes();
        assert!(many.windows(2).all(|w| w[0] < w[1]));
        let inv_steps: Vec<f64> = many.windows(2).map(|w| 1.0 / w[0] - 1.0 / w[1]).collect();
        assert!(inv_steps.iter().all(|s| (s - inv_steps[0]).abs() < 1e-9));
    }

    #[test]
    fn depth_sampling_invariants() {
        assert!(DepthSampling::new(1.0, 1.0, 3, DepthScheme::DepthUniform).is_err());
        assert!(DepthSampling::new(0.0, 2.0, 3, DepthScheme::DepthUniform).is_err());
        assert!(DepthSampling::new(1.0, 2.0, 1, DepthScheme::DepthUniform).is_err());
    }

    #[test]
    fn nearest_plane_uses_sampling_metric() {
        let s = DepthSampling::new(1.0, 3.0, 3, DepthScheme::InverseDepthUniform).unwrap();
        assert_eq!(s.nearest_plane(1.05), 0);
        assert_eq!(s.nearest_plane(1.6), 1);
        assert_eq!(s.nearest_plane(10.0), 2);
    }

    #[test]
    fn self_reprojection_is_depth_independent() {
        let img = textured(20, 16);
        let cam = camera_at(0.3, -0.2, 20, 16);
        let sampling = DepthSampling::new(1.0, 10.0, 5, DepthScheme::InverseDepthUniform).unwrap();
        let region = Region::new(3, 2, 9, 7);
        let vols = build_psv(&[PosedImage { image: img.clone(), camera: cam }], &cam, &sampling, region).unwrap();
        assert_eq!(vols.len(), 1);
        assert_eq!(vols[0].depth_count(), 5);
        let crop = img.crop(3, 2, 9, 7);
        for plane in &vols[0].planes {
            assert_eq!(plane, &crop);
        }
    }

    #[test]
    fn source_without_overlap_is_transparent() {
        let img = textured(16, 16);
        let target = camera_at(0.0, 0.0, 16, 16);
        // Far to the side: the nearest plane falls completely outside its view.
        let source = camera_at(50.0, 0.0, 16, 16);
        let sampling = DepthSampling::new(1.0, 4.0, 4, DepthScheme::InverseDepthUniform).unwrap();
        let vols = build_psv(&[PosedImage { image: img, camera: source }], &target, &sampling, Region::full(&target)).unwrap();
        assert!(vols[0].planes[0].as_raw().chunks(4).all(|p| p[3] == 0.0));
    }

    #[test]
    fn degenerate_plane_is_transparent() {
        let img = textured(16, 16);
        let target = camera_at(0.0, 0.0, 16, 16);
        let source = camera_at(0.2, 2.0, 16, 16);
        let sampling = DepthSampling::new(1.0, 2.0, 2, DepthScheme::DepthUniform).unwrap();
        let vols = build_psv(&[PosedImage { image: img, camera: source }], &target, &sampling, Region::full(&target)).unwrap();
        assert!(vols[0].planes[1].as_raw().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjacent_regions_compose_exactly() {
        let img = textured(32, 24);
        let target = camera_at(0.0, 0.0, 32, 24);
        let sources = [
            PosedImage { image: img.clone(), camera: camera_at(0.25, 0.0, 32, 24) },
            PosedImage { image: img, camera: camera_at(-0.4, 0.1, 32, 24) },
        ];
        let sampling = DepthSampling::new(1.5, 12.0, 6, DepthScheme::InverseDepthUniform).unwrap();
        let whole = build_psv(&sources, &target, &sampling, Region::new(-2, 1, 20, 10)).unwrap();
        let left = build_psv(&sources, &target, &sampling, Region::new(-2, 1, 7, 10)).unwrap();
        let right = build_psv(&sources, &target, &sampling, Region::new(5, 1, 13, 10)).unwrap();
        for k in 0..2 {
            for z in 0..6 {
                let w = &whole[k].planes[z];
                for y in 0..10 {
                    for x in 0..20 {
                        let expected = if x < 7 { left[k].planes[z].pixel(x, y) } else { right[k].planes[z].pixel(x - 7, y) };
                        if x < 18 {
                            assert_eq!(w.pixel(x, y), expected);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn covered_slab_has_full_alpha() {
        // A wide source directly behind the target sees the whole target frustum at every depth.
        let target = camera_at(0.0, 0.0, 16, 12);
        let k = Intrinsics::new(20.0, 20.0, 31.5, 31.5, 64, 64).unwrap();
        let source = Camera::new(k, Pose::from_center(Matrix3::identity(), Vector3::new(0.05, 0.0, -0.5)).unwrap()).unwrap();
        let img = textured(64, 64);
        let sampling = DepthSampling::new(1.0, 8.0, 5, DepthScheme::InverseDepthUniform).unwrap();
        let vols = build_psv(&[PosedImage { image: img, camera: source }], &target, &sampling, Region::full(&target)).unwrap();
        for plane in &vols[0].planes {
            assert!(plane.as_raw().chunks(4).all(|p| p[3] == 1.0));
        }
    }

    #[test]
    fn build_psv_rejects_bad_arguments() {
        let cam = camera_at(0.0, 0.0, 8, 8);
        let sampling = DepthSampling::new(1.0, 2.0, 2, DepthScheme::DepthUniform).unwrap();
        assert!(build_psv(&[], &cam, &sampling, Region::full(&cam)).is_err());
        let src = [PosedImage { image: textured(8, 8), camera: cam }];
        assert!(build_psv(&src, &cam, &sampling, Region::new(0, 0, 0, 4)).is_err());
    }

    #[test]
    fn dump_writes_every_plane() {
        let cam = camera_at(0.0, 0.0, 8, 8);
        let sampling = DepthSampling::new(1.0, 2.0, 3, DepthScheme::DepthUniform).unwrap();
        let src = [PosedImage { image: textured(8, 8), camera: cam }, PosedImage { image: textured(8, 8), camera: camera_at(0.1, 0.0, 8, 8) }];
        let vols = build_psv(&src, &cam, &sampling, Region::full(&cam)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_psv(&vols, dir.path()).unwrap();
        assert!(dir.path().join("psv_s1_z2.png").exists());
        let index = std::fs::read_to_string(dir.path().join("depths.txt")).unwrap();
        assert_eq!(index.lines().count(), 1 + 2 * 3);
    }
}
