//! Procedural RGB-D scene generation with analytic ground-truth depth and
//! normals, plus triangular-lattice dot-pattern subsampling. Stands in for
//! a raytraced sparse ToF capture at desk scale.
//!
//! Geometry: a tilted background plane plus a handful of fronto-parallel
//! rectangular slabs (front faces of axis-aligned boxes), composited by
//! z-buffer under a pinhole camera. Normals come from the surface
//! parameters, not from finite differences.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preproc::{SparseDepthMap, D_MAX};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const SIN_60: f64 = 0.8660254037844386;

/// One synthetic frame: dense ground truth plus the reproducibility seed.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Depth in meters, 1x1xHxW, everywhere valid and <= D_max.
    pub depth_gt: Tensor,
    /// Unit normals, camera-facing (z < 0), 1x3xHxW.
    pub normals_gt: Tensor,
    /// Color in [0, 1], 1x3xHxW.
    pub color: Tensor,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    // unit normal with nz < 0, and n . p0 for a point p0 on the plane
    n: [f64; 3],
    offset: f64,
}

#[derive(Debug, Clone, Copy)]
struct Slab {
    // fronto-parallel rectangle at fixed depth (front face of a box)
    depth: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

/// Pinhole ray direction for pixel (x, y), z component fixed at 1.
fn ray(x: usize, y: usize, width: usize, height: usize) -> [f64; 3] {
    let f = 0.9 * width.max(height) as f64;
    let cx = width as f64 / 2.0;
    let cy = height as f64 / 2.0;
    [(x as f64 + 0.5 - cx) / f, (y as f64 + 0.5 - cy) / f, 1.0]
}

fn shade(albedo: [f32; 3], n: [f64; 3]) -> [f32; 3] {
    // one fixed directional light plus ambient
    let light = [0.35, -0.45, -0.82];
    let lambert = (-(n[0] * light[0] + n[1] * light[1] + n[2] * light[2])).max(0.0);
    let k = (0.35 + 0.65 * lambert) as f32;
    [albedo[0] * k, albedo[1] * k, albedo[2] * k]
}

/// Deterministic scene keyed by (seed); 3..=8 surfaces.
pub fn generate_scene(seed: u64, width: usize, height: usize) -> Result<Scene> {
    if width < 32 || height < 32 {
        return Err(Error::invalid(
            "generate_scene",
            format!("minimum extent is 32, got {width}x{height}"),
        ));
    }
    let mut rng = SplitMix64::new(seed);

    // background plane: mild tilt keeps depth well inside (0, D_max]
    let tilt_x = rng.uniform(-0.25, 0.25) as f64;
    let tilt_y = rng.uniform(-0.25, 0.25) as f64;
    let inv = (tilt_x * tilt_x + tilt_y * tilt_y + 1.0).sqrt();
    let bg = Plane {
        n: [tilt_x / inv, tilt_y / inv, -1.0 / inv],
        offset: -(rng.uniform(5.0, 9.0) as f64) / inv,
    };
    let bg_albedo = [
        rng.uniform(0.25, 0.9),
        rng.uniform(0.25, 0.9),
        rng.uniform(0.25, 0.9),
    ];

    let n_slabs = 2 + rng.below(6) as usize; // 3..=8 surfaces total
    let mut slabs = Vec::with_capacity(n_slabs);
    let mut albedos = Vec::with_capacity(n_slabs);
    for _ in 0..n_slabs {
        let depth = rng.uniform(1.0, 6.5) as f64;
        // extents in camera-space meters at that depth
        let half_w = rng.uniform(0.2, 1.6) as f64;
        let half_h = rng.uniform(0.2, 1.6) as f64;
        let cx = rng.uniform(-1.8, 1.8) as f64;
        let cy = rng.uniform(-1.4, 1.4) as f64;
        slabs.push(Slab {
            depth,
            x0: cx - half_w,
            x1: cx + half_w,
            y0: cy - half_h,
            y1: cy + half_h,
        });
        albedos.push([
            rng.uniform(0.25, 0.9),
            rng.uniform(0.25, 0.9),
            rng.uniform(0.25, 0.9),
        ]);
    }

    let hw = height * width;
    let mut depth = vec![0.0f32; hw];
    let mut normals = vec![0.0f32; 3 * hw];
    let mut color = vec![0.0f32; 3 * hw];
    for y in 0..height {
        for x in 0..width {
            let dir = ray(x, y, width, height);
            // background: n . (t * dir) = n . p0
            let denom = bg.n[0] * dir[0] + bg.n[1] * dir[1] + bg.n[2] * dir[2];
            let mut t = bg.offset / denom;
            let mut n = bg.n;
            let mut alb = bg_albedo;
            for (slab, a) in slabs.iter().zip(&albedos) {
                let px = slab.depth * dir[0];
                let py = slab.depth * dir[1];
                if slab.depth < t && px >= slab.x0 && px <= slab.x1 && py >= slab.y0 && py <= slab.y1 {
                    t = slab.depth;
                    n = [0.0, 0.0, -1.0];
                    alb = *a;
                }
            }
            let t = t.min(D_MAX as f64);
            let i = y * width + x;
            depth[i] = t as f32;
            normals[i] = n[0] as f32;
            normals[hw + i] = n[1] as f32;
            normals[2 * hw + i] = n[2] as f32;
            let c = shade(alb, n);
            color[i] = c[0];
            color[hw + i] = c[1];
            color[2 * hw + i] = c[2];
        }
    }

    Ok(Scene {
        depth_gt: Tensor::new(vec![1, 1, height, width], depth)?,
        normals_gt: Tensor::new(vec![1, 3, height, width], normals)?,
        color: Tensor::new(vec![1, 3, height, width], color)?,
        seed,
    })
}

/// Single fronto-parallel plane at the given depth: D == depth everywhere,
/// N == (0, 0, -1).
pub fn flat_scene(depth_m: f32, width: usize, height: usize) -> Scene {
    let hw = height * width;
    let mut normals = vec![0.0f32; 3 * hw];
    normals[2 * hw..].fill(-1.0);
    Scene {
        depth_gt: Tensor::full(&[1, 1, height, width], depth_m),
        normals_gt: Tensor::new(vec![1, 3, height, width], normals).unwrap(),
        color: Tensor::full(&[1, 3, height, width], 0.5),
        seed: 0,
    }
}

/// Triangular-lattice dot pattern.
#[derive(Debug, Clone)]
pub struct DotPattern {
    /// Horizontal pitch in pixels.
    pub pitch: f64,
    /// Uniform jitter amplitude in pixels (applied per dot, per axis).
    pub jitter: f64,
}

impl DotPattern {
    pub fn new(pitch: f64, jitter: f64) -> Self {
        DotPattern { pitch, jitter }
    }
}

/// Pitch such that a triangular lattice over width x height yields about
/// `target_dots` sites: p = sqrt(area / (target * sin 60)).
pub fn pitch_for_target_count(width: usize, height: usize, target_dots: usize) -> Result<f64> {
    if target_dots == 0 {
        return Err(Error::invalid("pitch_for_target_count", "target_dots must be >= 1"));
    }
    let area = (width * height) as f64;
    Ok((area / (target_dots as f64 * SIN_60)).sqrt())
}

/// Integer pixel coordinates of the lattice dots (horizontal-row triangular
/// lattice, odd rows offset by half a pitch), jittered and deduplicated.
pub fn pattern_coords(pattern: &DotPattern, width: usize, height: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = SplitMix64::new(seed ^ 0x00d0_77ed_0000_0001);
    let p = pattern.pitch;
    let dy = p * SIN_60;
    let mut coords = Vec::new();
    let mut row = 0usize;
    let mut y = dy / 2.0;
    while y < height as f64 {
        let x0 = if row % 2 == 0 { p / 2.0 } else { p };
        let mut x = x0;
        while x < width as f64 {
            let jx = if pattern.jitter > 0.0 {
                rng.uniform(-pattern.jitter as f32, pattern.jitter as f32) as f64
            } else {
                0.0
            };
            let jy = if pattern.jitter > 0.0 {
                rng.uniform(-pattern.jitter as f32, pattern.jitter as f32) as f64
            } else {
                0.0
            };
            let px = (x + jx).round();
            let py = (y + jy).round();
            if px >= 0.0 && px < width as f64 && py >= 0.0 && py < height as f64 {
                coords.push((py as usize, px as usize));
            }
            x += p;
        }
        y += dy;
        row += 1;
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}

/// Mask ground-truth depth at the pattern's dot coordinates; everything
/// else is Invalid.
pub fn subsample(scene: &Scene, pattern: &DotPattern, seed: u64) -> SparseDepthMap {
    let (_, _, h, w) = scene.depth_gt.nchw();
    let mut depth = vec![0.0f32; h * w];
    for (y, x) in pattern_coords(pattern, w, h, seed) {
        depth[y * w + x] = scene.depth_gt.data()[y * w + x];
    }
    SparseDepthMap::new(h, w, depth).unwrap()
}

/// One dataset sample on disk: scene_%06d/{dgt,ngt,color,dsparse}.dtb.
pub struct DatasetWriter<'a> {
    root: &'a Path,
    manifest: Vec<String>,
}

impl<'a> DatasetWriter<'a> {
    pub fn create(root: &'a Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(DatasetWriter {
            root,
            manifest: vec!["# index seed split".to_string()],
        })
    }

    pub fn write_sample(
        &mut self,
        index: usize,
        scene: &Scene,
        sparse: &SparseDepthMap,
        split: &str,
    ) -> Result<()> {
        let dir = self.root.join(format!("scene_{index:06}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        scene.depth_gt.write_dtb(&dir.join("dgt.dtb"))?;
        scene.normals_gt.write_dtb(&dir.join("ngt.dtb"))?;
        scene.color.write_dtb(&dir.join("color.dtb"))?;
        sparse.to_tensor().write_dtb(&dir.join("dsparse.dtb"))?;
        self.manifest.push(format!("{index} {} {split}", scene.seed));
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let path = self.root.join("manifest.txt");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for line in &self.manifest {
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// One loaded dataset sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub split: String,
    pub depth_gt: Tensor,
    pub normals_gt: Tensor,
    pub color: Tensor,
    pub sparse: SparseDepthMap,
}

/// Read every sample listed in a dataset manifest.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let manifest = root.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let index: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(&manifest, format!("bad line: {line}")))?;
        let _seed = parts.next();
        let split = parts.next().unwrap_or("train").to_string();
        let dir = root.join(format!("scene_{index:06}"));
        samples.push(Sample {
            index,
            split,
            depth_gt: Tensor::read_dtb(&dir.join("dgt.dtb"))?,
            normals_gt: Tensor::read_dtb(&dir.join("ngt.dtb"))?,
            color: Tensor::read_dtb(&dir.join("color.dtb"))?,
            sparse: SparseDepthMap::from_tensor(&Tensor::read_dtb(&dir.join("dsparse.dtb"))?)?,
        });
    }
    Ok(samples)
}
