use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::RoiMasks;
use crate::data_io::Volume4D;
use crate::error::{Error, Result};

/// An elliptic cylinder in normalised in-plane coordinates `[-1, 1]²`
/// whose radii shrink towards the end slices. Later structures paint over
/// earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Base intensity in `[0, 1]`.
    pub intensity: f64,
    /// Directional attenuation in `[0, 1)`: signal in direction `j` is
    /// `intensity·(1 − anisotropy·cos²(φ_j − orientation))`.
    pub anisotropy: f64,
    pub orientation: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, shrink: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / (self.rx * shrink);
        let v = (-s * dx + c * dy) / (self.ry * shrink);
        u * u + v * v <= 1.0
    }

    fn signal(&self, phi: f64) -> f64 {
        self.intensity * (1.0 - self.anisotropy * (phi - self.orientation).cos().powi(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `clean + σ·z`.
    Gaussian { sigma: f64 },
    /// `|clean + σ·(z₁ + i·z₂)|`.
    Rician { sigma: f64 },
}

impl NoiseModel {
    pub fn sigma(&self) -> f64 {
        match *self {
            NoiseModel::Gaussian { sigma } | NoiseModel::Rician { sigma } => sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[w, h, d, l]`
    pub shape: [usize; 4],
    pub structures: Vec<Ellipse>,
    /// Direction angle per volume; evenly spread over `[0, π)` when empty.
    #[serde(default)]
    pub directions: Vec<f64>,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Per-volume noise level overrides (same kind as `noise`).
    #[serde(default)]
    pub volume_sigma: Vec<f64>,
}

impl PhantomSpec {
    /// A head-like layout: skull-stripped outline, two bright ventricles
    /// and two anisotropic tracts.
    pub fn brain(shape: [usize; 4], noise: NoiseModel, seed: u64) -> Self {
        let e = |cx, cy, rx, ry, angle, intensity, anisotropy, orientation| Ellipse {
            cx,
            cy,
            rx,
            ry,
            angle,
            intensity,
            anisotropy,
            orientation,
        };
        Self {
            shape,
            structures: vec![
                e(0.0, 0.0, 0.78, 0.9, 0.0, 0.45, 0.1, 0.0),
                e(-0.28, 0.1, 0.16, 0.34, 0.25, 0.95, 0.0, 0.0),
                e(0.28, 0.1, 0.16, 0.34, -0.25, 0.95, 0.0, 0.0),
                e(0.0, -0.45, 0.45, 0.12, 0.0, 0.75, 0.7, 0.0),
                e(0.0, 0.55, 0.12, 0.22, 0.0, 0.7, 0.7, std::f64::consts::FRAC_PI_2),
            ],
            directions: Vec::new(),
            noise,
            seed,
            volume_sigma: Vec::new(),
        }
    }

    /// The 32×32×8×6 acceptance phantom with Gaussian noise.
    pub fn desk(sigma: f64, seed: u64) -> Self {
        Self::brain([32, 32, 8, 6], NoiseModel::Gaussian { sigma }, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) || self.shape[3] < 2 {
            return Err(Error::InvalidParams(format!("phantom shape {:?}", self.shape)));
        }
        if !self.directions.is_empty() && self.directions.len() != self.shape[3] {
            return Err(Error::InvalidParams("one direction per volume required".into()));
        }
        if !self.volume_sigma.is_empty() && self.volume_sigma.len() != self.shape[3] {
            return Err(Error::InvalidParams("one sigma per volume required".into()));
        }
        if self.noise.sigma() < 0.0 || self.volume_sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidParams("noise sigma must be >= 0".into()));
        }
        for s in &self.structures {
            if !(0.0..=1.0).contains(&s.intensity) || !(0.0..1.0).contains(&s.anisotropy) || s.rx <= 0.0 || s.ry <= 0.0 {
                return Err(Error::InvalidParams(format!("bad structure {s:?}")));
            }
        }
        Ok(())
    }

    fn direction(&self, j: usize) -> f64 {
        if self.directions.is_empty() {
            std::f64::consts::PI * j as f64 / self.shape[3] as f64
        } else {
            self.directions[j]
        }
    }

    fn sigma(&self, j: usize) -> f64 {
        self.volume_sigma.get(j).copied().unwrap_or(self.noise.sigma())
    }
}

fn coords(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Radius factor for slice `z` of `d`.
fn slice_shrink(z: usize, d: usize) -> f64 {
    1.0 - 0.15 * coords(z, d).abs()
}

/// Ground-truth and noisy copies, both unnormalised.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume4D, Volume4D)> {
    spec.validate()?;
    let [w, h, d, l] = spec.shape;
    let clean = Array4::from_shape_fn((l, d, h, w), |(j, z, i, k)| {
        let (x, y) = (coords(k, w), coords(i, h));
        let shrink = slice_shrink(z, d);
        let phi = spec.direction(j);
        spec.structures
            .iter()
            .rev()
            .find(|s| s.contains(x, y, shrink))
            .map_or(0.0, |s| s.signal(phi)) as f32
    });
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noisy = clean.clone();
    for ((j, _, _, _), v) in noisy.indexed_iter_mut() {
        let sigma = spec.sigma(j);
        let z1: f64 = StandardNormal.sample(&mut rng);
        *v = match spec.noise {
            NoiseModel::Gaussian { .. } => (*v as f64 + sigma * z1) as f32,
            NoiseModel::Rician { .. } => {
                let z2: f64 = StandardNormal.sample(&mut rng);
                (*v as f64 + sigma * z1).hypot(sigma * z2) as f32
            }
        };
    }
    let id = format!("phantom-{}", spec.seed);
    Ok((
        Volume4D::new(clean, [1.0; 3], id.clone())?,
        Volume4D::new(noisy, [1.0; 3], id)?,
    ))
}

/// Signal inside the first structure at every slice (shrunk by 20%),
/// background outside it at every slice with a 10% margin.
pub fn phantom_masks(spec: &PhantomSpec) -> Result<RoiMasks> {
    let outline = spec
        .structures
        .first()
        .ok_or_else(|| Error::InvalidParams("phantom has no structures".into()))?;
    let [w, h, d, _] = spec.shape;
    let smallest = (0..d).map(|z| slice_shrink(z, d)).fold(f64::MAX, f64::min);
    let largest = (0..d).map(|z| slice_shrink(z, d)).fold(f64::MIN, f64::max);
    let signal = Array2::from_shape_fn((h, w), |(i, k)| outline.contains(coords(k, w), coords(i, h), 0.8 * smallest));
    let background = Array2::from_shape_fn((h, w), |(i, k)| !outline.contains(coords(k, w), coords(i, h), 1.1 * largest));
    RoiMasks::new(signal, background, "phantom outline")
}
