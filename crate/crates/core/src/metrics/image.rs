//! Full-reference image similarity: PSNR, SSIM, GMSD.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Reported when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const GMSD_C: f64 = 0.0026;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "images differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Channel-mean grayscale of a `[C, H, W]` image as `(H, W, pixels)`.
fn grayscale(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid(format!("expected [C, H, W], got {:?}", t.shape())));
    };
    let plane = h * w;
    let d = t.data();
    let gray = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i] as f64).sum::<f64>() / c as f64)
        .collect();
    Ok((h, w, gray))
}

/// Mean SSIM over all 8×8 windows at stride 1 of the grayscale images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ga) = grayscale(a)?;
    let (_, _, gb) = grayscale(b)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::invalid(format!("image {h}×{w} is smaller than the {k}×{k} window")));
    }
    let n = (k * k) as f64;
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                for dx in 0..k {
                    let i = (y + dy) * w + x + dx;
                    let (p, q) = (ga[i], gb[i]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Prewitt gradient magnitude, valid region only.
fn gradient_magnitude(h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dy: isize, dx: isize| g[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let gx = (p(-1, -1) + p(0, -1) + p(1, -1) - p(-1, 1) - p(0, 1) - p(1, 1)) / 3.0;
            let gy = (p(-1, -1) + p(-1, 0) + p(-1, 1) - p(1, -1) - p(1, 0) - p(1, 1)) / 3.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Population standard deviation of the gradient-magnitude similarity map.
pub fn gmsd(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ga) = grayscale(a)?;
    let (_, _, gb) = grayscale(b)?;
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!("image {h}×{w} is smaller than the 3×3 filter")));
    }
    let ma = gradient_magnitude(h, w, &ga);
    let mb = gradient_magnitude(h, w, &gb);
    let gms: Vec<f64> = ma
        .iter()
        .zip(&mb)
        .map(|(p, q)| (2.0 * p * q + GMSD_C) / (p * p + q * q + GMSD_C))
        .collect();
    let mean = gms.iter().sum::<f64>() / gms.len() as f64;
    let var = gms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / gms.len() as f64;
    Ok(var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn test_image() -> Tensor {
        Tensor::from_fn(&[3, 16, 16], |i| {
            let (y, x) = ((i % 256) / 16, i % 16);
            ((x * 7 + y * 3) % 16) as f32 / 15.0
        })
    }

    fn box_blur(t: &Tensor, r: usize) -> Tensor {
        let &[c, h, w] = t.shape() else { unreachable!() };
        Tensor::from_fn(t.shape(), |i| {
            let (ch, y, x) = (i / (h * w), (i % (h * w)) / w, i % w);
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    s += t.data()[ch * h * w + yy * w + xx];
                    n += 1.0;
                }
            }
            let _ = c;
            s / n
        })
    }

    #[test]
    fn psnr_values() {
        let a = test_image();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = Tensor::zeros(&[1, 10]);
        let b = Tensor::full(&[1, 10], 0.1);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn psnr_matches_noise_variance() {
        let mut rng = Rng::new(5);
        let a = rng.uniform_tensor(&[3, 64, 64], 0.2, 0.8);
        // uniform on [−h, h] has variance h²/3
        let half = 0.05f32;
        let b = a.zip_map(&rng.uniform_tensor(a.shape(), -half, half), |x, n| x + n).unwrap();
        let want = 10.0 * (3.0 / (half as f64).powi(2)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 0.2);
    }

    #[test]
    fn ssim_identities() {
        let a = test_image();
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        let c = Tensor::full(&[3, 8, 8], 0.3);
        assert_eq!(ssim(&c, &c).unwrap(), 1.0);
        assert!(ssim(&Tensor::zeros(&[3, 7, 7]), &Tensor::zeros(&[3, 7, 7])).is_err());
    }

    /// Flat background with a bright square and a dark disc.
    fn shapes_image() -> Tensor {
        Tensor::from_fn(&[3, 32, 32], |i| {
            let (y, x) = ((i % 1024) / 32, i % 32);
            let (dy, dx) = (y as f32 - 20.0, x as f32 - 20.0);
            if (4..14).contains(&y) && (4..14).contains(&x) {
                0.9
            } else if dy * dy + dx * dx < 36.0 {
                0.1
            } else {
                0.5
            }
        })
    }

    #[test]
    fn gmsd_grows_with_blur() {
        let a = shapes_image();
        assert_eq!(gmsd(&a, &a).unwrap(), 0.0);
        let light = gmsd(&a, &box_blur(&a, 1)).unwrap();
        let heavy = gmsd(&a, &box_blur(&a, 3)).unwrap();
        assert!(heavy > light && light > 0.0, "{light} {heavy}");
    }

    #[test]
    fn monotone_in_noise_level() {
        let a = test_image();
        let mut prev: Option<(f64, f64)> = None;
        for sigma in [0.01, 0.05, 0.1] {
            let mut rng = Rng::new(9);
            let b = a.zip_map(&rng.normal_tensor(a.shape()), |x, n| x + sigma * n).unwrap();
            let (p, g) = (psnr(&a, &b).unwrap(), gmsd(&a, &b).unwrap());
            if let Some((pp, pg)) = prev {
                assert!(p < pp && g > pg);
            }
            prev = Some((p, g));
        }
    }
}
