//! Generates the desk phantom, derives ROI masks and scores a simple
//! smoothing filter with PSNR, SSIM and relative SNR/CNR.

use ddm2::evalsim::{PhantomSpec, evaluate, make_phantom, paired_t_test, phantom_masks};
use ndarray::{Array4, s};

fn main() -> ddm2::Result<()> {
    let spec = PhantomSpec::desk(0.08, 3);
    let (clean, noisy) = make_phantom(&spec)?;
    let masks = phantom_masks(&spec)?;
    println!(
        "phantom {:?}, {} signal and {} background pixels",
        noisy.dims(),
        masks.signal.iter().filter(|v| **v).count(),
        masks.background.iter().filter(|v| **v).count()
    );

    let x = noisy.data();
    let (l, d, h, w) = x.dim();
    let smooth = Array4::from_shape_fn((l, d, h, w), |(v, z, i, j)| {
        let win = x.slice(s![v, z, i.saturating_sub(1)..(i + 2).min(h), j.saturating_sub(1)..(j + 2).min(w)]);
        win.sum() / win.len() as f32
    });
    let report = evaluate(&smooth, x, Some(clean.data()), &masks, 1.0)?;
    for m in &report.summary {
        println!("{:>14}: mean {:8.3}  std {:6.3}  median {:8.3}", m.name, m.mean, m.std, m.quantiles.median);
    }
    let a: Vec<f64> = report.rows.iter().filter_map(|r| r.psnr_denoised).collect();
    let b: Vec<f64> = report.rows.iter().filter_map(|r| r.psnr_noisy).collect();
    let t = paired_t_test(&a, &b);
    println!("paired t-test on PSNR: t={:.2} p={:.2e}", t.statistic, t.p_value);
    Ok(())
}
