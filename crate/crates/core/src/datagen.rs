//! Procedural ground-truth shape families and silhouette datasets.
//!
//! Training code only ever receives a [`SilhouetteDataset`]; view and shape
//! labels live in [`OracleLabels`], which only evaluation reads.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::projection::{silhouette_from_grid, Silhouette, Viewpoint};
use crate::rng;
use crate::viewpoint::{bin_of, ViewDistribution, NUM_BINS};
use crate::voxel::VoxelGrid;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const STREAM_SHAPE: u64 = 0x5348;
const STREAM_VIEW: u64 = 0x5649;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    /// Seat slab, back slab and four legs.
    Chair,
    /// Top slab and four legs.
    Table,
    /// Two pillars and a lintel.
    Arch,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [FamilyKind::Chair, FamilyKind::Table, FamilyKind::Arch];

    pub fn parts(self) -> usize {
        match self {
            FamilyKind::Chair => 6,
            FamilyKind::Table => 5,
            FamilyKind::Arch => 3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            FamilyKind::Chair => 0,
            FamilyKind::Table => 1,
            FamilyKind::Arch => 2,
        }
    }
}

/// Inclusive range of a dimension as a fraction of the grid resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.min + (self.max - self.min) * u
    }
}

/// A parametric family. Dimension names are shared across kinds; each kind
/// reads the subset it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeFamily {
    pub kind: FamilyKind,
    /// Half of the lateral (x) extent.
    pub half_width: Range,
    /// Front-to-back (z) extent.
    pub depth: Range,
    /// Height of the seat/top/lintel underside above the floor.
    pub height: Range,
    pub slab_thickness: Range,
    pub leg_width: Range,
    /// Chair back height above the seat.
    pub back_height: Range,
}

impl ShapeFamily {
    pub fn chair() -> Self {
        Self {
            kind: FamilyKind::Chair,
            half_width: Range::new(0.2, 0.34),
            depth: Range::new(0.42, 0.62),
            height: Range::new(0.3, 0.45),
            slab_thickness: Range::new(0.06, 0.12),
            leg_width: Range::new(0.06, 0.12),
            back_height: Range::new(0.28, 0.45),
        }
    }

    pub fn table() -> Self {
        Self {
            kind: FamilyKind::Table,
            half_width: Range::new(0.28, 0.42),
            depth: Range::new(0.35, 0.7),
            height: Range::new(0.4, 0.65),
            slab_thickness: Range::new(0.06, 0.12),
            leg_width: Range::new(0.06, 0.12),
            back_height: Range::point(0.0),
        }
    }

    pub fn arch() -> Self {
        Self {
            kind: FamilyKind::Arch,
            half_width: Range::new(0.25, 0.42),
            depth: Range::new(0.15, 0.4),
            height: Range::new(0.4, 0.7),
            slab_thickness: Range::new(0.08, 0.16),
            leg_width: Range::new(0.08, 0.16),
            back_height: Range::point(0.0),
        }
    }

    pub fn of(kind: FamilyKind) -> Self {
        match kind {
            FamilyKind::Chair => Self::chair(),
            FamilyKind::Table => Self::table(),
            FamilyKind::Arch => Self::arch(),
        }
    }
}

/// Fills `[x0, x1) x [y0, y1) x [z0, z1)` clipped to the 1-voxel margin.
fn fill_box(g: &mut [f32], n: usize, (x0, x1): (usize, usize), (y0, y1): (usize, usize), (z0, z1): (usize, usize)) {
    let lo = 1;
    let hi = n - 1;
    for x in x0.max(lo)..x1.min(hi) {
        for y in y0.max(lo)..y1.min(hi) {
            for z in z0.max(lo)..z1.min(hi) {
                g[(x * n + y) * n + z] = 1.0;
            }
        }
    }
}

fn voxels(frac: f64, n: usize) -> usize {
    ((frac * n as f64).round() as usize).max(1)
}

/// Samples one binary, x-symmetric shape with at least one voxel of margin.
/// The back of a chair faces `-z`.
pub fn sample_shape<R: Rng + ?Sized>(family: &ShapeFamily, n: usize, rng: &mut R) -> Result<VoxelGrid> {
    if n < 8 || n % 2 != 0 {
        return Err(invalid(format!("shape resolution must be even and >= 8, got {n}")));
    }
    let half = n / 2;
    let limit = half - 1;
    let hw = voxels(family.half_width.sample(rng), n).min(limit);
    let depth = voxels(family.depth.sample(rng), n).min(n - 2);
    let height = voxels(family.height.sample(rng), n).clamp(2, n - 3);
    let thick = voxels(family.slab_thickness.sample(rng), n);
    let leg = voxels(family.leg_width.sample(rng), n).min(hw);
    let back = voxels(family.back_height.sample(rng), n);

    let (x0, x1) = (half - hw, half + hw);
    let z0 = (n - depth) / 2;
    let z1 = z0 + depth;
    let mut g = vec![0.0f32; n * n * n];
    match family.kind {
        FamilyKind::Chair | FamilyKind::Table => {
            let top = height;
            let bottom = top.saturating_sub(thick).max(2);
            fill_box(&mut g, n, (x0, x1), (bottom, top), (z0, z1));
            let legd = leg.min(depth / 2).max(1);
            for (lx0, lx1) in [(x0, x0 + leg), (x1 - leg, x1)] {
                for (lz0, lz1) in [(z0, z0 + legd), (z1 - legd, z1)] {
                    fill_box(&mut g, n, (lx0, lx1), (1, bottom), (lz0, lz1));
                }
            }
            if family.kind == FamilyKind::Chair {
                let bt = thick.min(depth / 2).max(1);
                fill_box(&mut g, n, (x0, x1), (top, top + back), (z0, z0 + bt));
            }
        }
        FamilyKind::Arch => {
            let pillar = leg.min(hw);
            let top = height;
            fill_box(&mut g, n, (x0, x0 + pillar), (1, top), (z0, z1));
            fill_box(&mut g, n, (x1 - pillar, x1), (1, top), (z0, z1));
            fill_box(&mut g, n, (x0, x1), (top, top + thick), (z0, z1));
        }
    }
    VoxelGrid::from_vec(n, g)
}

/// Azimuth distribution of a dataset's views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AzimuthDistribution {
    Uniform,
    /// Mixture of wrapped-normal peaks (radians); equal weights when `weights` is absent.
    Peaks { centers: Vec<f64>, spread: f64, weights: Option<Vec<f64>> },
    /// Explicit 16-bin histogram; azimuth is uniform inside the drawn bin.
    Histogram { weights: Vec<f64> },
}

impl AzimuthDistribution {
    /// Peaks centered on the given bins.
    pub fn peaks_at_bins(bins: &[usize], spread: f64) -> Self {
        let width = TAU / NUM_BINS as f64;
        Self::Peaks { centers: bins.iter().map(|&b| (b as f64 + 0.5) * width).collect(), spread, weights: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform => Ok(()),
            Self::Peaks { centers, spread, weights } => {
                if centers.is_empty() || !(*spread >= 0.0) || centers.iter().any(|c| !c.is_finite()) {
                    return Err(invalid("peaks need at least one finite center and a non-negative spread"));
                }
                if let Some(w) = weights {
                    if w.len() != centers.len() {
                        return Err(invalid("peak weights must match peak centers"));
                    }
                    ViewDistribution::from_weights_unnormalized(w)?;
                }
                Ok(())
            }
            Self::Histogram { weights } => {
                if weights.len() != NUM_BINS {
                    return Err(invalid(format!("histogram needs {NUM_BINS} weights")));
                }
                ViewDistribution::new(weights).map(|_| ())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Uniform => rng.random::<f64>() * TAU,
            Self::Peaks { centers, spread, weights } => {
                let i = match weights {
                    None => rng.random_range(0..centers.len()),
                    Some(w) => pick(w, rng),
                };
                let offset = if *spread > 0.0 { Normal::new(0.0, *spread).unwrap().sample(rng) } else { 0.0 };
                (centers[i] + offset).rem_euclid(TAU)
            }
            Self::Histogram { weights } => {
                let b = pick(weights, rng);
                (b as f64 + rng.random::<f64>()) * TAU / NUM_BINS as f64
            }
        }
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: ShapeFamily,
    pub resolution: usize,
    pub shapes: usize,
    pub views_per_shape: usize,
    pub azimuth: AzimuthDistribution,
    pub seed: u64,
}

impl DatasetSpec {
    /// Desk default: 2000 chair-like shapes with 4 uniform views each.
    pub fn chairs(resolution: usize, seed: u64) -> Self {
        Self {
            family: ShapeFamily::chair(),
            resolution,
            shapes: 2000,
            views_per_shape: 4,
            azimuth: AzimuthDistribution::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes == 0 || self.views_per_shape == 0 {
            return Err(invalid("shape and view counts must be positive"));
        }
        if self.resolution < 8 || self.resolution % 2 != 0 {
            return Err(invalid("resolution must be even and >= 8"));
        }
        self.azimuth.validate()
    }

    pub fn images(&self) -> usize {
        self.shapes * self.views_per_shape
    }
}

/// Training-facing silhouettes: pixels only, no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteDataset {
    size: usize,
    pixels: Vec<f32>,
}

impl SilhouetteDataset {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if size == 0 || pixels.len() % (size * size) != 0 {
            return Err(invalid("pixel buffer is not a whole number of images"));
        }
        Ok(Self { size, pixels })
    }

    pub fn from_images(size: usize, images: &[Silhouette]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(images.len() * size * size);
        for s in images {
            if s.width() != size || s.height() != size {
                return Err(invalid(format!("image is {}x{}, expected {size}x{size}", s.width(), s.height())));
            }
            pixels.extend_from_slice(s.as_slice());
        }
        Self::new(size, pixels)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.size * self.size)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.size * self.size;
        &self.pixels[i * px..(i + 1) * px]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.size * self.size);
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn silhouette(&self, i: usize) -> Silhouette {
        Silhouette::from_vec(self.size, self.size, self.image(i).to_vec()).expect("stored images are valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub image_id: usize,
    pub shape_id: usize,
    pub view_id: usize,
    pub azimuth: f64,
    pub bin: usize,
}

/// Hidden ground truth for evaluation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub records: Vec<OracleRecord>,
}

impl OracleLabels {
    pub fn bins(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.bin).collect()
    }

    /// Empirical 16-bin histogram of the true view bins.
    pub fn histogram(&self) -> Result<ViewDistribution> {
        let mut counts = [0.0; NUM_BINS];
        for r in &self.records {
            counts[r.bin] += 1.0;
        }
        ViewDistribution::from_weights_unnormalized(&counts)
    }
}

pub struct GeneratedDataset {
    pub training: SilhouetteDataset,
    pub oracle: OracleLabels,
    /// The ground-truth shapes, for FID; never used for training.
    pub reference: Vec<VoxelGrid>,
}

/// Renders `shapes x views_per_shape` binary silhouettes, ordered by
/// `(shape id, view id)`.
pub fn build_dataset(spec: &DatasetSpec) -> Result<GeneratedDataset> {
    spec.validate()?;
    let n = spec.resolution;
    let per_shape: Vec<(VoxelGrid, Vec<(f64, Silhouette)>)> = (0..spec.shapes)
        .into_par_iter()
        .map(|s| {
            let mut shape_rng = rng::derive(spec.seed, STREAM_SHAPE, s as u64);
            let grid = sample_shape(&spec.family, n, &mut shape_rng)?;
            let mut view_rng = rng::derive(spec.seed, STREAM_VIEW, s as u64);
            let views = (0..spec.views_per_shape)
                .map(|_| {
                    let az = spec.azimuth.sample(&mut view_rng);
                    let view = Viewpoint::new(az);
                    (view.azimuth(), silhouette_from_grid(&grid, view).threshold(0.5))
                })
                .collect();
            Ok((grid, views))
        })
        .collect::<Result<_>>()?;

    let mut pixels = Vec::with_capacity(spec.images() * n * n);
    let mut records = Vec::with_capacity(spec.images());
    let mut reference = Vec::with_capacity(spec.shapes);
    for (shape_id, (grid, views)) in per_shape.into_iter().enumerate() {
        for (view_id, (az, sil)) in views.into_iter().enumerate() {
            records.push(OracleRecord { image_id: records.len(), shape_id, view_id, azimuth: az, bin: bin_of(az) });
            pixels.extend_from_slice(sil.as_slice());
        }
        reference.push(grid);
    }
    Ok(GeneratedDataset { training: SilhouetteDataset::new(n, pixels)?, oracle: OracleLabels { records }, reference })
}

/// Ground-truth shapes of a spec, regenerated deterministically from its seed.
pub fn reference_shapes(spec: &DatasetSpec) -> Result<Vec<VoxelGrid>> {
    spec.validate()?;
    (0..spec.shapes)
        .into_par_iter()
        .map(|s| sample_shape(&spec.family, spec.resolution, &mut rng::derive(spec.seed, STREAM_SHAPE, s as u64)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub size: usize,
    pub count: usize,
    /// Absent for imported datasets.
    pub spec: Option<DatasetSpec>,
}

fn image_name(i: usize) -> String {
    format!("{i:06}.pgm")
}

/// Writes `manifest.json`, `images/NNNNNN.pgm` and `oracle.json`.
pub fn write_dataset(dir: &Path, spec: Option<&DatasetSpec>, data: &SilhouetteDataset, oracle: Option<&OracleLabels>) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    for i in 0..data.len() {
        data.silhouette(i).save_pgm(images.join(image_name(i)))?;
    }
    let manifest =
        Manifest { format_version: DATASET_FORMAT_VERSION, size: data.size(), count: data.len(), spec: spec.cloned() };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(o) = oracle {
        fs::write(dir.join("oracle.json"), serde_json::to_string(o)?)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Malformed(format!("dataset format version {} is not supported", m.format_version)));
    }
    Ok(m)
}

/// Loads the training-facing images of a dataset directory.
pub fn load_training_set(dir: &Path) -> Result<SilhouetteDataset> {
    let m = read_manifest(dir)?;
    let mut pixels = Vec::with_capacity(m.count * m.size * m.size);
    for i in 0..m.count {
        let s = Silhouette::load_pgm(dir.join("images").join(image_name(i)))?;
        if s.width() != m.size || s.height() != m.size {
            return Err(Error::Malformed(format!("image {i} does not match manifest size {}", m.size)));
        }
        pixels.extend_from_slice(s.as_slice());
    }
    SilhouetteDataset::new(m.size, pixels)
}

/// Evaluation-only access to the hidden labels.
pub fn load_oracle(dir: &Path) -> Result<OracleLabels> {
    let path = dir.join("oracle.json");
    if !path.exists() {
        return Err(Error::Config(format!("no oracle labels at {}", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Imports a folder of unlabeled PGM or PNG masks (sorted by file name),
/// thresholded at 0.5.
pub fn import_silhouette_folder(dir: &Path, size: usize) -> Result<SilhouetteDataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .pgm or .png masks in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let sil = if p.extension().and_then(|e| e.to_str()) == Some("png") {
            let img = image::open(p).map_err(|e| Error::Malformed(format!("{}: {e}", p.display())))?.to_luma8();
            let (w, h) = img.dimensions();
            let data = img.pixels().map(|px| px.0[0] as f32 / 255.0).collect();
            Silhouette::from_vec(w as usize, h as usize, data)?
        } else {
            Silhouette::load_pgm(p)?
        };
        if sil.width() != size || sil.height() != size {
            return Err(invalid(format!("{} is {}x{}, expected {size}x{size}", p.display(), sil.width(), sil.height())));
        }
        images.push(sil.threshold(0.5));
    }
    SilhouetteDataset::from_images(size, &images)
}

/// Bin histogram implied by an azimuth distribution, by numerical integration.
pub fn bin_histogram(dist: &AzimuthDistribution) -> Result<ViewDistribution> {
    let mut mass = [0.0f64; NUM_BINS];
    match dist {
        AzimuthDistribution::Uniform => mass = [1.0; NUM_BINS],
        AzimuthDistribution::Histogram { weights } => mass.copy_from_slice(weights),
        AzimuthDistribution::Peaks { centers, spread, weights } => {
            let samples = 64 * NUM_BINS;
            for (i, &c) in centers.iter().enumerate() {
                let w = weights.as_ref().map_or(1.0, |w| w[i]);
                if *spread == 0.0 {
                    mass[bin_of(c.rem_euclid(TAU))] += w;
                    continue;
                }
                for k in 0..samples {
                    let a = (k as f64 + 0.5) * TAU / samples as f64;
                    let mut d = (a - c).rem_euclid(TAU);
                    if d > TAU / 2.0 {
                        d -= TAU;
                    }
                    let density: f64 = (-3..=3)
                        .map(|wrap| {
                            let x = d + wrap as f64 * TAU;
                            (-0.5 * (x / spread).powi(2)).exp()
                        })
                        .sum();
                    mass[bin_of(a)] += w * density;
                }
            }
        }
    }
    ViewDistribution::from_weights_unnormalized(&mass)
}
