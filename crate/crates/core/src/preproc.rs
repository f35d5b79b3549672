//! Sparse depth preprocessing: sparsity accounting, exact Euclidean
//! distance transform, nearest-neighbor interpolation and assembly of the
//! normalized (D_NNI, E, C) network input.
//!
//! EDT and NNI share one two-pass lower-envelope computation on squared
//! distances. Nearest-site ties are resolved to the smallest row-major
//! site index, which requires keeping degenerate (single-point) envelope
//! intervals alive and breaking ties explicitly at query time.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth normalization constant (meters).
pub const D_MAX: f32 = 15.0;
/// EDT normalization constant (pixels). The normalized map is not clamped;
/// values above 1 are allowed.
pub const E_MAX: f32 = 40.0;

/// Sparse depth samples on an h x w grid. Values > 0 are valid depths in
/// meters; values <= 0 encode Invalid.
#[derive(Debug, Clone)]
pub struct SparseDepthMap {
    height: usize,
    width: usize,
    depth: Vec<f32>,
}

impl SparseDepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::shape(
                "sparse_depth_map",
                format!("{height}x{width} grid needs {} values, got {}", height * width, depth.len()),
            ));
        }
        Ok(SparseDepthMap { height, width, depth })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.nchw();
        if n != 1 || c != 1 {
            return Err(Error::shape("sparse_depth_map", format!("expected 1x1xHxW, got {:?}", t.shape())));
        }
        SparseDepthMap::new(h, w, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.depth[idx] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.depth.clone()).unwrap()
    }
}

/// Sparsity level K in percent: 100 * valid / total.
pub fn sparsity_level(d: &SparseDepthMap) -> f64 {
    100.0 * d.valid_count() as f64 / (d.height * d.width) as f64
}

/// Exact EDT + nearest-site labels in one pass.
pub struct DistanceField {
    pub height: usize,
    pub width: usize,
    /// Squared Euclidean distance to the nearest valid pixel (exact, integer).
    pub dist_sq: Vec<i64>,
    /// Row-major index of the nearest valid pixel (smallest row-major index
    /// among equidistant sites).
    pub site: Vec<u32>,
}

const INF: i64 = i64::MAX / 4;

/// Lower-envelope pass over one scanline. `f[i]` is the offset of the
/// parabola rooted at position i (INF = absent); `key[i]` orders tied sites
/// (smaller wins). Returns (min value, winning root) per position.
fn envelope_1d(f: &[i64], key: &[u64]) -> (Vec<i64>, Vec<usize>) {
    let n = f.len();
    let mut out_val = vec![INF; n];
    let mut out_root = vec![usize::MAX; n];

    // roots of parabolas present on this line
    let mut v: Vec<usize> = Vec::with_capacity(n);
    // boundary i starts the win interval of v[i], as an exact rational num/den
    let mut znum: Vec<i64> = Vec::with_capacity(n + 1);
    let mut zden: Vec<i64> = Vec::with_capacity(n + 1);

    for q in 0..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            match v.last() {
                None => break,
                Some(&p) => {
                    // crossing of parabolas rooted at p and q
                    let num = f[q] + (q * q) as i64 - f[p] - (p * p) as i64;
                    let den = 2 * (q as i64 - p as i64);
                    if v.len() == 1 {
                        znum.push(num);
                        zden.push(den);
                        break;
                    }
                    // pop only on strict domination so single-point win
                    // intervals (ties) survive
                    let zi = v.len() - 1;
                    if num * zden[zi - 1] < znum[zi - 1] * den {
                        v.pop();
                        znum.pop();
                        zden.pop();
                    } else {
                        znum.push(num);
                        zden.push(den);
                        break;
                    }
                }
            }
        }
        v.push(q);
    }
    if v.is_empty() {
        return (out_val, out_root);
    }

    let eval = |root: usize, x: usize| f[root] + (x as i64 - root as i64).pow(2);
    let mut k = 0usize;
    for x in 0..n {
        // advance while the next interval starts strictly before x
        while k + 1 < v.len() && znum[k] < (x as i64) * zden[k] {
            k += 1;
        }
        let mut best_val = eval(v[k], x);
        let mut best_root = v[k];
        // neighbors whose (possibly degenerate) intervals touch x can tie
        let mut j = k;
        while j + 1 < v.len() && znum[j] == (x as i64) * zden[j] {
            j += 1;
            let val = eval(v[j], x);
            if val < best_val || (val == best_val && key[v[j]] < key[best_root]) {
                best_val = val;
                best_root = v[j];
            }
        }
        let mut j = k;
        while j > 0 && znum[j - 1] == (x as i64) * zden[j - 1] {
            j -= 1;
            let val = eval(v[j], x);
            if val < best_val || (val == best_val && key[v[j]] < key[best_root]) {
                best_val = val;
                best_root = v[j];
            }
        }
        out_val[x] = best_val;
        out_root[x] = best_root;
    }
    (out_val, out_root)
}

/// Two-pass exact EDT with nearest-site labeling.
pub fn distance_field(d: &SparseDepthMap) -> Result<DistanceField> {
    let (h, w) = (d.height, d.width);
    if d.valid_count() == 0 {
        return Err(Error::EmptySparseInput);
    }

    // pass 1: per column, nearest valid row (tie -> smaller row)
    let mut col_dist = vec![INF; h * w]; // squared vertical distance
    let mut col_site_row = vec![u32::MAX; h * w];
    for x in 0..w {
        let mut last_valid: Option<usize> = None;
        for y in 0..h {
            if d.is_valid(y * w + x) {
                last_valid = Some(y);
            }
            if let Some(ys) = last_valid {
                col_dist[y * w + x] = ((y - ys) * (y - ys)) as i64;
                col_site_row[y * w + x] = ys as u32;
            }
        }
        let mut next_valid: Option<usize> = None;
        for y in (0..h).rev() {
            if d.is_valid(y * w + x) {
                next_valid = Some(y);
            }
            if let Some(ys) = next_valid {
                let dd = ((ys - y) * (ys - y)) as i64;
                // strict: on ties the upper (smaller-row) site stands
                if dd < col_dist[y * w + x] {
                    col_dist[y * w + x] = dd;
                    col_site_row[y * w + x] = ys as u32;
                }
            }
        }
    }

    // pass 2: per row, lower envelope across columns
    let mut dist_sq = vec![0i64; h * w];
    let mut site = vec![0u32; h * w];
    let mut f = vec![INF; w];
    let mut key = vec![u64::MAX; w];
    for y in 0..h {
        for x in 0..w {
            f[x] = col_dist[y * w + x];
            key[x] = if f[x] < INF {
                // row-major index of the column's representative site
                (col_site_row[y * w + x] as u64) * w as u64 + x as u64
            } else {
                u64::MAX
            };
        }
        let (vals, roots) = envelope_1d(&f, &key);
        for x in 0..w {
            dist_sq[y * w + x] = vals[x];
            let root = roots[x];
            site[y * w + x] = col_site_row[y * w + root] * w as u32 + root as u32;
        }
    }

    Ok(DistanceField {
        height: h,
        width: w,
        dist_sq,
        site,
    })
}

/// Euclidean distance (pixels) from each pixel to the nearest valid pixel.
pub fn edt(d: &SparseDepthMap) -> Result<Tensor> {
    let field = distance_field(d)?;
    let data = field.dist_sq.iter().map(|&v| (v as f64).sqrt() as f32).collect();
    Tensor::new(vec![1, 1, d.height, d.width], data)
}

/// Dense depth: every pixel takes the depth of its nearest valid pixel.
pub fn nni(d: &SparseDepthMap) -> Result<Tensor> {
    let field = distance_field(d)?;
    let data = field.site.iter().map(|&s| d.depth[s as usize]).collect();
    Tensor::new(vec![1, 1, d.height, d.width], data)
}

/// Normalized network input (D_NNI, E, C) plus the constants needed to
/// de-normalize predictions.
#[derive(Debug, Clone)]
pub struct PreprocessedInput {
    /// D_NNI / D_max, 1x1xHxW.
    pub depth_nni: Tensor,
    /// E / E_max, 1x1xHxW (not clamped).
    pub edt: Tensor,
    /// Color in [0, 1], 1x3xHxW.
    pub color: Tensor,
    pub d_max: f32,
    pub e_max: f32,
}

impl PreprocessedInput {
    /// Channels stacked as (D_NNI, E, C) -> 1x5xHxW.
    pub fn stacked(&self) -> Tensor {
        let (_, _, h, w) = self.depth_nni.nchw();
        let mut data = Vec::with_capacity(5 * h * w);
        data.extend_from_slice(self.depth_nni.data());
        data.extend_from_slice(self.edt.data());
        data.extend_from_slice(self.color.data());
        Tensor::new(vec![1, 5, h, w], data).unwrap()
    }
}

/// Full preprocessing per the pipeline contract: NNI and EDT from one
/// distance-field pass, then normalization by D_max, E_max and 255.
///
/// `color` is 1x3xHxW with values in [0, 255] (or already [0, 1]; the
/// caller controls the range, division by 255 is applied when `raw_color`).
pub fn preprocess(d: &SparseDepthMap, color: &Tensor, raw_color: bool) -> Result<PreprocessedInput> {
    let (cn, cc, ch, cw) = color.nchw();
    if cn != 1 || cc != 3 || ch != d.height || cw != d.width {
        return Err(Error::shape(
            "preprocess",
            format!(
                "color must be 1x3x{}x{}, got {:?}",
                d.height,
                d.width,
                color.shape()
            ),
        ));
    }
    let field = distance_field(d)?;
    let nni_data: Vec<f32> = field
        .site
        .iter()
        .map(|&s| d.depth[s as usize] / D_MAX)
        .collect();
    let edt_data: Vec<f32> = field
        .dist_sq
        .iter()
        .map(|&v| ((v as f64).sqrt() as f32) / E_MAX)
        .collect();
    let color_data: Vec<f32> = if raw_color {
        color.data().iter().map(|&v| v / 255.0).collect()
    } else {
        color.data().to_vec()
    };
    Ok(PreprocessedInput {
        depth_nni: Tensor::new(vec![1, 1, d.height, d.width], nni_data)?,
        edt: Tensor::new(vec![1, 1, d.height, d.width], edt_data)?,
        color: Tensor::new(vec![1, 3, d.height, d.width], color_data)?,
        d_max: D_MAX,
        e_max: E_MAX,
    })
}

/// Brute-force nearest-valid reference with the same row-major tie rule.
/// Test oracle; O(pixels * sites).
pub fn brute_force_nearest(d: &SparseDepthMap) -> Result<(Vec<i64>, Vec<u32>)> {
    let (h, w) = (d.height, d.width);
    let sites: Vec<usize> = (0..h * w).filter(|&i| d.is_valid(i)).collect();
    if sites.is_empty() {
        return Err(Error::EmptySparseInput);
    }
    let mut dist_sq = vec![0i64; h * w];
    let mut site = vec![0u32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = INF;
            let mut best_site = 0u32;
            for &s in &sites {
                let (sy, sx) = (s / w, s % w);
                let dy = sy as i64 - y as i64;
                let dx = sx as i64 - x as i64;
                let dd = dy * dy + dx * dx;
                if dd < best {
                    best = dd;
                    best_site = s as u32;
                }
            }
            dist_sq[y * w + x] = best;
            site[y * w + x] = best_site;
        }
    }
    Ok((dist_sq, site))
}
