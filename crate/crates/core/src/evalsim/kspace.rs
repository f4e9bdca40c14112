use ndarray::{Array2, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use rustfft::num_complex::Complex64;

use crate::data_io::Volume4D;
use crate::error::{Error, Result};

/// Complex coil sensitivities with `Σ_c |S_c|² = 1` at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    pub maps: Vec<Array2<Complex64>>,
}

impl CoilMaps {
    pub fn single(h: usize, w: usize) -> Self {
        Self {
            maps: vec![Array2::from_elem((h, w), Complex64::new(1.0, 0.0))],
        }
    }

    /// `n` coils with Gaussian magnitude profiles centred on a ring around
    /// the field of view and a linear phase ramp.
    pub fn ring(n: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams("at least one coil required".into()));
        }
        let mut maps: Vec<Array2<Complex64>> = (0..n)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / n as f64;
                let (cx, cy) = (1.2 * a.cos(), 1.2 * a.sin());
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0;
                    let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0;
                    let mag = (-((x - cx).powi(2) + (y - cy).powi(2)) / 1.5).exp();
                    Complex64::from_polar(mag, 0.5 * (x * a.cos() + y * a.sin()))
                })
            })
            .collect();
        let norm = maps
            .iter()
            .fold(Array2::<f64>::zeros((h, w)), |acc, m| acc + m.mapv(|v| v.norm_sqr()))
            .mapv(f64::sqrt);
        for m in &mut maps {
            ndarray::Zip::from(m).and(&norm).for_each(|v, &n| *v /= n);
        }
        Ok(Self { maps })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }
}

/// In-place unitary 2-D DFT.
fn fft2(a: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = a.dim();
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = vec![Complex64::default(); w.max(h)];
    for mut r in a.axis_iter_mut(Axis(0)) {
        buf[..w].iter_mut().zip(r.iter()).for_each(|(b, v)| *b = *v);
        row.process(&mut buf[..w]);
        r.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut c in a.axis_iter_mut(Axis(1)) {
        buf[..h].iter_mut().zip(c.iter()).for_each(|(b, v)| *b = *v);
        col.process(&mut buf[..h]);
        c.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    a.mapv_inplace(|v| v * scale);
}

/// Per-coil complex images after complex Gaussian noise (σ_k per real and
/// imaginary component) is added to each coil's k-space.
pub fn inject_kspace_noise_complex(
    image: ArrayView2<f64>,
    coils: &CoilMaps,
    sigma_k: f64,
    seed: u64,
) -> Result<Vec<Array2<Complex64>>> {
    if !(sigma_k >= 0.0) {
        return Err(Error::InvalidParams(format!("sigma_k must be >= 0, got {sigma_k}")));
    }
    if coils.maps.is_empty() || coils.dim() != image.dim() {
        return Err(Error::shape(format!("{:?}", image.dim()), "coil maps of another shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(coils.maps.len());
    for s in &coils.maps {
        let mut k = ndarray::Zip::from(s).and(image).map_collect(|&s, &v| s * v);
        fft2(&mut k, false);
        if sigma_k > 0.0 {
            for v in k.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *v += Complex64::new(sigma_k * re, sigma_k * im);
            }
        }
        fft2(&mut k, true);
        out.push(k);
    }
    Ok(out)
}

/// Root-sum-of-squares coil combination.
pub fn rss_combine(coil_images: &[Array2<Complex64>]) -> Array2<f64> {
    let dim = coil_images[0].dim();
    coil_images
        .iter()
        .fold(Array2::<f64>::zeros(dim), |acc, c| acc + c.mapv(|v| v.norm_sqr()))
        .mapv(f64::sqrt)
}

/// Noisy magnitude image from k-space noise injection and RSS recombination.
pub fn inject_kspace_noise(image: ArrayView2<f64>, coils: &CoilMaps, sigma_k: f64, seed: u64) -> Result<Array2<f64>> {
    let c = inject_kspace_noise_complex(image, coils, sigma_k, seed)?;
    if sigma_k == 0.0 {
        // Exact clean magnitude without FFT round-off.
        return Ok(image.mapv(f64::abs));
    }
    Ok(rss_combine(&c))
}

/// Applies k-space noise slice by slice to a whole sequence.
pub fn kspace_noisy_volume(clean: &Volume4D, coils: &CoilMaps, sigma_k: f64, seed: u64) -> Result<Volume4D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = clean.data().clone();
    let dims = clean.dims();
    for v in 0..dims.l {
        for z in 0..dims.d {
            let img = clean.slice(v, z).mapv(|x| x as f64);
            let noisy = inject_kspace_noise(img.view(), coils, sigma_k, rng.next_u64())?;
            data.slice_mut(ndarray::s![v, z, .., ..])
                .assign(&noisy.mapv(|x| x as f32));
        }
    }
    clean.with_data(data)
}
