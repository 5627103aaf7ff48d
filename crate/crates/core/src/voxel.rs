//! Dense occupancy grids.
//!
//! Index order is `(x, y, z)` with `y` vertical; storage is x-major, then y,
//! then z. The symmetry plane sits at `x = N/2`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const VOXEL_MAGIC: &[u8; 8] = b"MPGVOXL1";

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    n: usize,
    data: Vec<f32>,
}

/// The low-x half (`x < N/2`) of a symmetric grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfGrid {
    n: usize,
    data: Vec<f32>,
}

fn check_resolution(n: usize) -> Result<()> {
    if n == 0 || n % 2 != 0 {
        return Err(invalid(format!("resolution must be positive and even, got {n}")));
    }
    Ok(())
}

fn check_values(data: &[f32]) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("occupancy {v} outside [0,1]")));
    }
    Ok(())
}

impl VoxelGrid {
    pub fn zeros(n: usize) -> Result<Self> {
        check_resolution(n)?;
        Ok(Self { n, data: vec![0.0; n * n * n] })
    }

    pub fn filled(n: usize, value: f32) -> Result<Self> {
        check_values(&[value])?;
        check_resolution(n)?;
        Ok(Self { n, data: vec![value; n * n * n] })
    }

    pub fn from_vec(n: usize, data: Vec<f32>) -> Result<Self> {
        check_resolution(n)?;
        if data.len() != n * n * n {
            return Err(invalid(format!("expected {} values for N={n}, got {}", n * n * n, data.len())));
        }
        check_values(&data)?;
        Ok(Self { n, data })
    }

    /// Clamps into `[0,1]` instead of rejecting; NaN maps to 0.
    pub fn from_vec_clamped(n: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_vec(n, data)
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.n + y) * self.n + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) -> Result<()> {
        check_values(&[value])?;
        let i = self.index(x, y, z);
        self.data[i] = value;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Fraction of total mass relative to a full grid.
    pub fn occupancy_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_x_symmetric(&self) -> bool {
        let n = self.n;
        (0..n / 2).all(|x| {
            (0..n).all(|y| (0..n).all(|z| self.get(x, y, z) == self.get(n - 1 - x, y, z)))
        })
    }

    /// Every output value is exactly 0 or 1; 1 iff the input is `>= threshold`.
    pub fn binarize(&self, threshold: f32) -> Result<VoxelGrid> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("threshold {threshold} outside (0,1)")));
        }
        let data = self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Ok(VoxelGrid { n: self.n, data })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VOXEL_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| Error::Malformed("truncated voxel header".into()))?;
        if &header[..8] != VOXEL_MAGIC {
            return Err(Error::Malformed("bad voxel magic".into()));
        }
        let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if header[12..16] != [0; 4] {
            return Err(Error::Malformed("reserved header bytes are not zero".into()));
        }
        if n == 0 || n % 2 != 0 || n > 1024 {
            return Err(Error::Malformed(format!("unsupported resolution {n}")));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = n * n * n * 4;
        if payload.len() != expected {
            return Err(Error::Malformed(format!(
                "header declares N={n} ({expected} payload bytes) but payload holds {} bytes",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Malformed("occupancy outside [0,1]".into()));
        }
        Ok(Self { n, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl HalfGrid {
    pub fn zeros(n: usize) -> Result<Self> {
        check_resolution(n)?;
        Ok(Self { n, data: vec![0.0; n * n * n / 2] })
    }

    pub fn from_vec(n: usize, data: Vec<f32>) -> Result<Self> {
        check_resolution(n)?;
        if data.len() != n * n * n / 2 {
            return Err(invalid(format!("expected {} values for half grid N={n}, got {}", n * n * n / 2, data.len())));
        }
        check_values(&data)?;
        Ok(Self { n, data })
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[(x * self.n + y) * self.n + z]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) -> Result<()> {
        check_values(&[value])?;
        if x >= self.n / 2 {
            return Err(invalid(format!("x={x} outside half extent {}", self.n / 2)));
        }
        let i = (x * self.n + y) * self.n + z;
        self.data[i] = value;
        Ok(())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Reflects the half grid over `x = N/2`: `out[x] == out[N-1-x]` and the low-x
/// half equals the input.
pub fn mirror_symmetric(half: &HalfGrid) -> VoxelGrid {
    let n = half.n;
    let plane = n * n;
    let mut data = vec![0.0; n * plane];
    for x in 0..n / 2 {
        let src = &half.data[x * plane..(x + 1) * plane];
        data[x * plane..(x + 1) * plane].copy_from_slice(src);
        data[(n - 1 - x) * plane..(n - x) * plane].copy_from_slice(src);
    }
    VoxelGrid { n, data }
}

/// Flat-slice mirror shared with the generator's batched output.
pub(crate) fn mirror_into(n: usize, half: &[f32], out: &mut [f32]) {
    let plane = n * n;
    for x in 0..n / 2 {
        let src = &half[x * plane..(x + 1) * plane];
        out[x * plane..(x + 1) * plane].copy_from_slice(src);
        out[(n - 1 - x) * plane..(n - x) * plane].copy_from_slice(src);
    }
}

/// Adjoint of [`mirror_into`]: folds a full-grid gradient back onto the half.
pub(crate) fn fold_gradient(n: usize, full: &[f32], half: &mut [f32]) {
    let plane = n * n;
    for x in 0..n / 2 {
        let a = &full[x * plane..(x + 1) * plane];
        let b = &full[(n - 1 - x) * plane..(n - x) * plane];
        for ((h, &ga), &gb) in half[x * plane..(x + 1) * plane].iter_mut().zip(a).zip(b) {
            *h = ga + gb;
        }
    }
}
