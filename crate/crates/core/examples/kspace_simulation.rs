//! Injects complex Gaussian noise in k-space for single- and multi-coil
//! acquisitions and checks the image-domain statistics.

use ddm2::evalsim::{CoilMaps, PhantomSpec, inject_kspace_noise, inject_kspace_noise_complex, jarque_bera, make_phantom};
use ndarray::Array2;

fn main() -> ddm2::Result<()> {
    let (h, w) = (64, 64);
    let sigma = 0.05;
    let zero = Array2::<f64>::zeros((h, w));
    let single = inject_kspace_noise_complex(zero.view(), &CoilMaps::single(h, w), sigma, 1)?;
    let n = (h * w) as f64;
    let re: Vec<f64> = single[0].iter().map(|v| v.re).collect();
    let std_re = (re.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let energy: f64 = single[0].iter().map(|v| v.norm_sqr()).sum();
    println!("single coil: std(re) {std_re:.4} vs {sigma}, energy {energy:.3} vs {:.3}", 2.0 * sigma * sigma * n);
    println!("normality of real part: JB p = {:.3}", jarque_bera(&re).p_value);

    let (clean, _) = make_phantom(&PhantomSpec::desk(0.0, 1))?;
    let img = clean.slice(0, 4).mapv(|v| v as f64);
    for coils in [1, 4, 8] {
        let maps = if coils == 1 { CoilMaps::single(32, 32) } else { CoilMaps::ring(coils, 32, 32)? };
        let noisy = inject_kspace_noise(img.view(), &maps, sigma, 2)?;
        let bg: Vec<f64> = noisy.iter().zip(img.iter()).filter(|(_, c)| **c == 0.0).map(|(v, _)| *v).collect();
        println!("{coils} coil(s): mean background magnitude {:.4}", bg.iter().sum::<f64>() / bg.len() as f64);
    }
    Ok(())
}
