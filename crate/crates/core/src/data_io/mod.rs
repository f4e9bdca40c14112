//! 4D diffusion MRI sequences: ingestion, intensity normalization and
//! construction of the slice-to-slice training pairs used by Stage I.

mod container;
mod nifti;

use log::warn;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand::seq::IndexedRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{ContainerHeader, RawContainer, read_container, write_container};
pub use nifti::{read_nifti1, write_nifti1};

/// Sizes of a 4D sequence: `w`×`h` in-plane pixels, `d` slices, `l` volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub l: usize,
}

impl Dims {
    pub fn voxels(&self) -> usize {
        self.w * self.h * self.d * self.l
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.w, self.h, self.d, self.l]
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.h, self.d, self.l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizationMode {
    GlobalMinmax,
    /// Per-volume bounds taken at the given percentiles (0..=100); values
    /// outside the bounds are clipped.
    PerVolumePercentile { p_lo: f64, p_hi: f64 },
}

/// Bounds used to map raw intensities onto [-1, 1]. Holds one pair for
/// `GlobalMinmax` and one pair per volume otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    #[serde(flatten)]
    pub mode: NormalizationMode,
    pub bounds: Vec<[f64; 2]>,
}

impl NormalizationRecord {
    fn bounds_for(&self, volume: usize) -> [f64; 2] {
        if self.bounds.len() == 1 {
            self.bounds[0]
        } else {
            self.bounds[volume]
        }
    }

    /// Multiplier taking raw intensity differences to normalized units.
    pub fn scale(&self, volume: usize) -> f64 {
        let [lo, hi] = self.bounds_for(volume);
        if hi > lo { 2.0 / (hi - lo) } else { 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    Nifti1,
    RawContainer,
}

/// A 4D diffusion MRI sequence. Storage is `(l, d, h, w)` in C order, so
/// `w` is the fastest-varying axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    data: Array4<f32>,
    pub spacing: [f32; 3],
    pub normalization: Option<NormalizationRecord>,
    pub source_id: String,
    /// Volume indices acquired without diffusion weighting.
    pub b0_volumes: Vec<usize>,
}

impl Volume4D {
    /// Wraps an `(l, d, h, w)` array, checking the sequence invariants.
    pub fn new(data: Array4<f32>, spacing: [f32; 3], source_id: impl Into<String>) -> Result<Self> {
        let (l, d, h, w) = data.dim();
        if l == 0 || d == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidParams(format!(
                "all dimensions must be positive, got ({w}, {h}, {d}, {l})"
            )));
        }
        if l < 2 {
            return Err(Error::InvalidParams(format!(
                "a sequence needs at least 2 volumes, got {l}"
            )));
        }
        let bad = data.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteData { count: bad });
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            spacing,
            normalization: None,
            source_id: source_id.into(),
            b0_volumes: Vec::new(),
        })
    }

    pub fn dims(&self) -> Dims {
        let (l, d, h, w) = self.data.dim();
        Dims { w, h, d, l }
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    /// In-plane slice `z` of volume `vol` as an `(h, w)` view.
    pub fn slice(&self, vol: usize, z: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), vol).index_axis_move(Axis(0), z)
    }

    pub fn slice_mut(&mut self, vol: usize, z: usize) -> ArrayViewMut2<'_, f32> {
        self.data
            .index_axis_mut(Axis(0), vol)
            .index_axis_move(Axis(0), z)
    }

    /// Same metadata, different voxel values (used for derived volumes).
    pub fn with_data(&self, data: Array4<f32>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::shape(
                format!("{:?}", self.data.dim()),
                format!("{:?}", data.dim()),
            ));
        }
        Ok(Self {
            data,
            spacing: self.spacing,
            normalization: self.normalization.clone(),
            source_id: self.source_id.clone(),
            b0_volumes: self.b0_volumes.clone(),
        })
    }
}

/// Loads a 4D sequence with raw (unnormalized) intensities.
pub fn ingest(path: impl AsRef<std::path::Path>, format: IngestFormat) -> Result<Volume4D> {
    let path = path.as_ref();
    match format {
        IngestFormat::Nifti1 => read_nifti1(path),
        IngestFormat::RawContainer => {
            let c = read_container(path)?;
            c.into_volume()
        }
    }
}

/// Writes a sequence as a raw container, optionally tagged with the stage that produced it.
pub fn export(v: &Volume4D, path: impl AsRef<std::path::Path>, stage: Option<&str>) -> Result<()> {
    let c = RawContainer::from_volume(v, stage);
    write_container(path, &c)
}

pub fn normalize(v: &Volume4D, mode: NormalizationMode) -> Result<Volume4D> {
    if v.is_normalized() {
        return Err(Error::AlreadyNormalized);
    }
    let dims = v.dims();
    let bounds: Vec<[f64; 2]> = match mode {
        NormalizationMode::GlobalMinmax => {
            let (lo, hi) = min_max(v.data.iter().copied());
            vec![[lo, hi]]
        }
        NormalizationMode::PerVolumePercentile { p_lo, p_hi } => {
            if !(0.0..100.0).contains(&p_lo) || !(p_lo < p_hi && p_hi <= 100.0) {
                return Err(Error::InvalidParams(format!(
                    "percentile bounds must satisfy 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})"
                )));
            }
            (0..dims.l)
                .map(|vol| {
                    let mut vals: Vec<f64> = v
                        .data
                        .index_axis(Axis(0), vol)
                        .iter()
                        .map(|&x| x as f64)
                        .collect();
                    vals.sort_by(f64::total_cmp);
                    [percentile(&vals, p_lo), percentile(&vals, p_hi)]
                })
                .collect()
        }
    };
    normalize_with(v, &NormalizationRecord { mode, bounds })
}

/// Maps `v` onto [-1, 1] with bounds recorded from another sequence, so new
/// data lands in the same intensity frame a model was trained in.
pub fn normalize_with(v: &Volume4D, record: &NormalizationRecord) -> Result<Volume4D> {
    if v.is_normalized() {
        return Err(Error::AlreadyNormalized);
    }
    if record.bounds.len() != 1 && record.bounds.len() != v.dims().l {
        return Err(Error::InvalidParams(format!(
            "{} normalization bounds for {} volumes",
            record.bounds.len(),
            v.dims().l
        )));
    }
    let mut data = v.data.clone();
    for (vol, mut volume) in data.axis_iter_mut(Axis(0)).enumerate() {
        let [lo, hi] = record.bounds_for(vol);
        if hi <= lo {
            warn!("volume {vol} has a degenerate intensity range ({lo}); mapping to zeros");
            volume.fill(0.0);
            continue;
        }
        let span = hi - lo;
        volume.mapv_inplace(|x| {
            let y = 2.0 * (x as f64 - lo) / span - 1.0;
            y.clamp(-1.0, 1.0) as f32
        });
    }
    let mut out = v.with_data(data)?;
    out.normalization = Some(record.clone());
    Ok(out)
}

/// Inverse of [`normalize`]. Clipped values stay at their bounds.
pub fn denormalize(v: &Volume4D) -> Result<Volume4D> {
    let record = v.normalization.as_ref().ok_or(Error::NotNormalized)?;
    let mut data = v.data.clone();
    for (vol, mut volume) in data.axis_iter_mut(Axis(0)).enumerate() {
        let [lo, hi] = record.bounds_for(vol);
        let span = (hi - lo).max(0.0);
        volume.mapv_inplace(|y| ((y as f64 + 1.0) * 0.5 * span + lo) as f32);
    }
    let mut out = v.with_data(data)?;
    out.normalization = None;
    Ok(out)
}

fn min_max(it: impl Iterator<Item = f32>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x as f64), hi.max(x as f64))
    })
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let frac = pos - i as f64;
    sorted[i] * (1.0 - frac) + sorted[j] * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorStrategy {
    /// The `n` nearest volume indices on the index ring (-1, +1, -2, +2, ...).
    AdjacentDirections,
    /// `n` distinct volumes drawn per (volume, slice) from a seeded generator.
    RandomDirections { seed: u64 },
}

impl Default for PriorStrategy {
    fn default() -> Self {
        PriorStrategy::AdjacentDirections
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOptions {
    pub n: usize,
    pub strategy: PriorStrategy,
    /// Allow b=0 volumes in prior sets.
    #[serde(default)]
    pub include_b0: bool,
}

impl PairOptions {
    pub fn new(n: usize, strategy: PriorStrategy) -> Self {
        Self {
            n,
            strategy,
            include_b0: false,
        }
    }
}

/// A target slice and the same-position slices of `n` other volumes.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub target: Array2<f32>,
    pub priors: Vec<Array2<f32>>,
    pub prior_volumes: Vec<usize>,
    pub volume_index: usize,
    pub slice_index: usize,
}

/// Volume indices forming the prior set of `(target, slice)`.
pub fn prior_volumes(
    dims: Dims,
    b0_volumes: &[usize],
    target: usize,
    slice: usize,
    opts: &PairOptions,
) -> Result<Vec<usize>> {
    let l = dims.l;
    let usable = |v: usize| v != target && (opts.include_b0 || !b0_volumes.contains(&v));
    let available = (0..l).filter(|&v| usable(v)).count();
    if opts.n == 0 {
        return Err(Error::InvalidParams("prior count n must be at least 1".into()));
    }
    if opts.n > available || opts.n > l.saturating_sub(1) {
        return Err(Error::TooFewVolumes {
            n: opts.n,
            available,
        });
    }
    match opts.strategy {
        PriorStrategy::AdjacentDirections => {
            let mut out = Vec::with_capacity(opts.n);
            let mut step = 1;
            while out.len() < opts.n {
                for cand in [(target + l - step % l) % l, (target + step) % l] {
                    if out.len() < opts.n && usable(cand) && !out.contains(&cand) {
                        out.push(cand);
                    }
                }
                step += 1;
            }
            Ok(out)
        }
        PriorStrategy::RandomDirections { seed } => {
            let candidates: Vec<usize> = (0..l).filter(|&v| usable(v)).collect();
            let mix = seed ^ ((target as u64) << 32 | slice as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            Ok(candidates
                .choose_multiple(&mut rng, opts.n)
                .copied()
                .collect())
        }
    }
}

/// Builds the pair for one `(volume, slice)` position.
pub fn slice_pair(v: &Volume4D, volume: usize, slice: usize, opts: &PairOptions) -> Result<SlicePair> {
    let prior_volumes = prior_volumes(v.dims(), &v.b0_volumes, volume, slice, opts)?;
    debug_assert!(!prior_volumes.contains(&volume));
    Ok(SlicePair {
        target: v.slice(volume, slice).to_owned(),
        priors: prior_volumes
            .iter()
            .map(|&p| v.slice(p, slice).to_owned())
            .collect(),
        prior_volumes,
        volume_index: volume,
        slice_index: slice,
    })
}

/// One epoch of pairs: every `(slice, volume)` appears once as target,
/// volume-major.
pub fn make_slice_pairs<'a>(
    v: &'a Volume4D,
    opts: PairOptions,
) -> Result<impl Iterator<Item = SlicePair> + 'a> {
    if !v.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let dims = v.dims();
    // validate once up front so the iterator itself is infallible
    for vol in 0..dims.l {
        prior_volumes(dims, &v.b0_volumes, vol, 0, &opts)?;
    }
    Ok((0..dims.l).flat_map(move |vol| {
        (0..dims.d).map(move |z| slice_pair(v, vol, z, &opts).expect("validated prior set"))
    }))
}
