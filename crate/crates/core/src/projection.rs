//! Differentiable silhouette projection of occupancy grids.
//!
//! A view rotates the grid about the vertical axis (trilinear resampling about
//! the grid center, zero outside) and an orthographic camera then looks down
//! the rotated `z` axis. A pixel's coverage is the probability that its ray
//! meets at least one occupied voxel, `1 - prod_k (1 - x_k)`.
//!
//! Handedness: a positive azimuth turns the camera counterclockwise seen from
//! `+y`, so the object appears rotated by `-azimuth`. Output voxel `q` reads the
//! source at `R_y(azimuth) q`; a voxel on the `+x` arm lands on the `+z` arm at
//! azimuth `pi/2`.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::viewpoint::{ViewDistribution, NUM_BINS};
use crate::voxel::VoxelGrid;

pub const SILHOUETTE_MAGIC: &[u8; 8] = b"MPGSILH1";

/// Camera placement. Only the azimuth is free; elevation is carried for
/// completeness and is always zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    azimuth: f64,
    elevation: f64,
}

impl Viewpoint {
    pub fn new(azimuth: f64) -> Self {
        let mut a = azimuth.rem_euclid(TAU);
        if a >= TAU {
            a = 0.0;
        }
        Self { azimuth: a, elevation: 0.0 }
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn bin(&self) -> usize {
        crate::viewpoint::bin_of(self.azimuth)
    }
}

/// Row-major `height x width` coverage image; row 0 is the top (highest `y`).
#[derive(Clone, Debug, PartialEq)]
pub struct Silhouette {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Silhouette {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(invalid(format!("silhouette {width}x{height} cannot hold {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("coverage {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn threshold(&self, t: f32) -> Silhouette {
        let data = self.data.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
        Silhouette { width: self.width, height: self.height, data }
    }

    /// Binary 8-bit PGM (P5); pixels at or above 0.5 become 255.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut tokens = Vec::new();
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Malformed("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" || tokens.len() != 4 {
            return Err(Error::Malformed("expected a binary P5 PGM header".into()));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Malformed(format!("bad PGM header field {s:?}")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(Error::Malformed("unsupported PGM dimensions or depth".into()));
        }
        let mut bytes = vec![0u8; width * height];
        r.read_exact(&mut bytes).map_err(|_| Error::Malformed("truncated PGM payload".into()))?;
        let data = bytes.iter().map(|&b| (b as f32 / maxval as f32).min(1.0)).collect();
        Ok(Self { width, height, data })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pgm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_pgm(File::open(path)?)
    }

    /// Lossless float storage: magic, width and height as u32 LE, then f32 LE values.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SILHOUETTE_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| Error::Malformed("truncated silhouette header".into()))?;
        if &header[..8] != SILHOUETTE_MAGIC {
            return Err(Error::Malformed("bad silhouette magic".into()));
        }
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if width == 0 || height == 0 || payload.len() != width * height * 4 {
            return Err(Error::Malformed("silhouette payload does not match header".into()));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_vec(width, height, data).map_err(|e| Error::Malformed(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    /// Source offset within one `y` slab: `x * N * N + z`.
    src: u32,
    weight: f32,
}

/// Snaps interpolation coordinates that sit on a voxel center within rounding
/// noise, so axis-aligned rotations are exact permutations.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// The rotate-and-resample map for one view, precomputed as bilinear taps in
/// the horizontal plane. Rotation is about `y`, so vertical coordinates map to
/// themselves and every `y` slab shares the same taps.
#[derive(Clone, Debug)]
pub struct Resampler {
    n: usize,
    /// `taps[start[p]..start[p+1]]` feed output position `p = x * N + z`.
    start: Vec<u32>,
    taps: Vec<Tap>,
}

impl Resampler {
    pub fn new(n: usize, view: Viewpoint) -> Self {
        let (s, c) = view.azimuth.sin_cos();
        let center = (n as f64 - 1.0) / 2.0;
        let mut start = Vec::with_capacity(n * n + 1);
        let mut taps = Vec::with_capacity(n * n * 4);
        start.push(0);
        for i in 0..n {
            for k in 0..n {
                let qx = i as f64 - center;
                let qz = k as f64 - center;
                let sx = snap(c * qx + s * qz + center);
                let sz = snap(-s * qx + c * qz + center);
                let (x0, z0) = (sx.floor(), sz.floor());
                let (fx, fz) = (sx - x0, sz - z0);
                for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    for (dz, wz) in [(0.0, 1.0 - fz), (1.0, fz)] {
                        let w = wx * wz;
                        let (xi, zi) = (x0 + dx, z0 + dz);
                        if w == 0.0 || xi < 0.0 || zi < 0.0 || xi >= n as f64 || zi >= n as f64 {
                            continue;
                        }
                        taps.push(Tap { src: (xi as usize * n * n + zi as usize) as u32, weight: w as f32 });
                    }
                }
                start.push(taps.len() as u32);
            }
        }
        Self { n, start, taps }
    }

    /// `out = A x` for a flat `N^3` occupancy array.
    pub fn apply(&self, src: &[f32], out: &mut [f32]) {
        let n = self.n;
        for i in 0..n {
            for k in 0..n {
                let p = i * n + k;
                let taps = &self.taps[self.start[p] as usize..self.start[p + 1] as usize];
                for y in 0..n {
                    let mut acc = 0.0f32;
                    for t in taps {
                        acc += t.weight * src[t.src as usize + y * n];
                    }
                    out[(i * n + y) * n + k] = acc;
                }
            }
        }
    }

    /// `grad_src += A^T grad_out`.
    pub fn apply_transpose(&self, grad_out: &[f32], grad_src: &mut [f32]) {
        let n = self.n;
        for i in 0..n {
            for k in 0..n {
                let p = i * n + k;
                let taps = &self.taps[self.start[p] as usize..self.start[p + 1] as usize];
                for y in 0..n {
                    let g = grad_out[(i * n + y) * n + k];
                    if g == 0.0 {
                        continue;
                    }
                    for t in taps {
                        grad_src[t.src as usize + y * n] += t.weight * g;
                    }
                }
            }
        }
    }
}

/// Coverage image of an already rotated grid: pixel `(row, col)` integrates the
/// column `x = col, y = N-1-row` over all `z`.
fn cover_columns(n: usize, rotated: &[f32], out: &mut [f32]) {
    for x in 0..n {
        for y in 0..n {
            let column = &rotated[(x * n + y) * n..(x * n + y + 1) * n];
            let escape: f32 = column.iter().map(|&v| 1.0 - v).product();
            out[(n - 1 - y) * n + x] = (1.0 - escape).clamp(0.0, 1.0);
        }
    }
}

/// Backward of [`cover_columns`]: `d cover / d x_k = prod_{j != k} (1 - x_j)`.
fn cover_columns_backward(n: usize, rotated: &[f32], upstream: &[f32], grad_rotated: &mut [f32]) {
    let mut prefix = vec![0.0f32; n + 1];
    for x in 0..n {
        for y in 0..n {
            let g = upstream[(n - 1 - y) * n + x];
            let base = (x * n + y) * n;
            let column = &rotated[base..base + n];
            let dst = &mut grad_rotated[base..base + n];
            if g == 0.0 {
                dst.iter_mut().for_each(|d| *d = 0.0);
                continue;
            }
            prefix[0] = 1.0;
            for k in 0..n {
                prefix[k + 1] = prefix[k] * (1.0 - column[k]);
            }
            let mut suffix = 1.0f32;
            for k in (0..n).rev() {
                dst[k] = g * prefix[k] * suffix;
                suffix *= 1.0 - column[k];
            }
        }
    }
}

/// Forward state kept for the backward pass of one rendering.
#[derive(Clone, Debug)]
pub struct RenderCache {
    resampler: Resampler,
    rotated: Vec<f32>,
}

/// Renders a flat `N^3` occupancy array; returns the `N x N` coverage and the
/// state needed by [`render_backward`].
pub fn render(n: usize, occupancy: &[f32], view: Viewpoint) -> (Vec<f32>, RenderCache) {
    let resampler = Resampler::new(n, view);
    let mut rotated = vec![0.0; n * n * n];
    resampler.apply(occupancy, &mut rotated);
    let mut sil = vec![0.0; n * n];
    cover_columns(n, &rotated, &mut sil);
    (sil, RenderCache { resampler, rotated })
}

/// Accumulates `d L / d occupancy` into `grad` given `d L / d coverage`.
pub fn render_backward(cache: &RenderCache, upstream: &[f32], grad: &mut [f32]) {
    let n = cache.resampler.n;
    let mut grad_rotated = vec![0.0; n * n * n];
    cover_columns_backward(n, &cache.rotated, upstream, &mut grad_rotated);
    cache.resampler.apply_transpose(&grad_rotated, grad);
}

pub fn rotate_resample(grid: &VoxelGrid, view: Viewpoint) -> VoxelGrid {
    let n = grid.resolution();
    let mut out = vec![0.0; n * n * n];
    Resampler::new(n, view).apply(grid.as_slice(), &mut out);
    // Convex weights of [0,1] inputs stay in [0,1] up to rounding.
    VoxelGrid::from_vec_clamped(n, out).expect("resolution already validated")
}

pub fn silhouette_from_grid(grid: &VoxelGrid, view: Viewpoint) -> Silhouette {
    let n = grid.resolution();
    let (data, _) = render(n, grid.as_slice(), view);
    Silhouette { width: n, height: n, data }
}

/// `d L / d occupancy` for the composite rotate-resample + coverage map.
pub fn silhouette_gradient(grid: &VoxelGrid, view: Viewpoint, upstream: &[f32]) -> Result<Vec<f32>> {
    let n = grid.resolution();
    if upstream.len() != n * n {
        return Err(invalid(format!("upstream gradient has {} values, silhouette has {}", upstream.len(), n * n)));
    }
    let (_, cache) = render(n, grid.as_slice(), view);
    let mut grad = vec![0.0; n * n * n];
    render_backward(&cache, upstream, &mut grad);
    Ok(grad)
}

/// Picks a bin with probability equal to its weight, then an azimuth uniformly
/// inside that bin.
pub fn sample_viewpoint<R: Rng + ?Sized>(dist: &ViewDistribution, rng: &mut R) -> Viewpoint {
    let u: f64 = rng.random();
    let weights = dist.weights();
    let mut acc = 0.0;
    let mut bin = NUM_BINS - 1;
    for (b, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc && w > 0.0 {
            bin = b;
            break;
        }
    }
    // Guard against the cumulative sum falling short of 1 by rounding.
    if weights[bin] == 0.0 {
        bin = weights.iter().rposition(|&w| w > 0.0).expect("normalized histogram has mass");
    }
    let width = TAU / NUM_BINS as f64;
    let off: f64 = rng.random();
    Viewpoint::new((bin as f64 + off) * width)
}
