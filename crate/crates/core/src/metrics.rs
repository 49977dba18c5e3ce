//! PSNR and SSIM on `[0, 1]` images.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// Returned when the clamped images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / n;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (wo, ho) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, wo, ho)
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let size = {
        let s = SSIM_WINDOW.min(w).min(h);
        if s.is_multiple_of(2) {
            s - 1
        } else {
            s
        }
    };
    let k = gaussian_window(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mx, wo, ho) = filter_valid(a, w, h, &k);
    let (my, _, _) = filter_valid(b, w, h, &k);
    let (sxx, _, _) = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let (syy, _, _) = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let (sxy, _, _) = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let mut total = 0.0;
    for i in 0..wo * ho {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / (wo * ho) as f64
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, valid region),
/// averaged over channels. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a == b {
        return Ok(1.0);
    }
    let (ca, cb) = (a.clamped(), b.clamped());
    let (w, h) = (a.width(), a.height());
    let mut acc = 0.0;
    for c in 0..a.channels() {
        acc += ssim_plane(ca.plane(c), cb.plane(c), w, h);
    }
    Ok((acc / a.channels() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, estimate: &Image, reference: &Image) -> Result<()> {
        self.images.push(ImageMetrics {
            name: name.into(),
            psnr: psnr(estimate, reference)?,
            ssim: ssim(estimate, reference)?,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|m| m.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|m| m.ssim))
    }

    /// One JSON object per image followed by a `"mean"` record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for m in &self.images {
            s.push_str(&serde_json::to_string(m).map_err(|e| Error::Parse(e.to_string()))?);
            s.push('\n');
        }
        let summary = serde_json::json!({
            "name": "mean",
            "count": self.images.len(),
            "psnr": self.mean_psnr(),
            "ssim": self.mean_ssim(),
        });
        s.push_str(&summary.to_string());
        s.push('\n');
        Ok(s)
    }

    pub fn summary_table(&self) -> String {
        let width = self.images.iter().map(|m| m.name.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for m in &self.images {
            s.push_str(&format!("{:<width$}  {:>9.3}  {:>7.4}\n", m.name, m.psnr, m.ssim));
        }
        s.push_str(&format!(
            "{:<width$}  {:>9.3}  {:>7.4}\n",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        ));
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, c, (0..w * h * c).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn checker(n: usize) -> Image {
        let d = (0..n * n)
            .map(|i| {
                if ((i / n) / 4 + (i % n) / 4).is_multiple_of(2) {
                    0.8
                } else {
                    0.2
                }
            })
            .collect();
        Image::new(n, n, 1, d).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random(8, 8, 1, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = Image::filled(4, 4, 1, 0.0);
        let h = Image::filled(4, 4, 1, 0.5);
        assert!((psnr(&z, &h).unwrap() - 6.020599913279624).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_mse_oracle() {
        let a = random(7, 5, 3, 2);
        let b = random(7, 5, 3, 3);
        let mut se = 0.0;
        for i in 0..a.data().len() {
            se += (a.data()[i] - b.data()[i]).powi(2);
        }
        let expect = 10.0 * (1.0 / (se / 105.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_clamps_inputs() {
        let a = Image::filled(2, 2, 1, 1.7);
        let b = Image::filled(2, 2, 1, 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(psnr(&random(3, 3, 1, 1), &random(3, 4, 1, 1)).is_err());
        assert!(ssim(&random(3, 3, 1, 1), &random(3, 3, 3, 1)).is_err());
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = checker(32);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_closed_form() {
        let (m1, m2) = (0.3, 0.55);
        let a = Image::filled(16, 16, 1, m1);
        let b = Image::filled(16, 16, 1, m2);
        let c1 = 0.01f64.powi(2);
        let c2 = 0.03f64.powi(2);
        let expect = (2.0 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let a = random(13, 12, 1, 4);
        let b = random(13, 12, 1, 5);
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum::<f64>().powi(2);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for oy in 0..2 {
            for ox in 0..3 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..11 {
                    for kx in 0..11 {
                        let wgt = g[ky] * g[kx] / gs;
                        let x = a.get(0, oy + ky, ox + kx);
                        let y = b.get(0, oy + ky, ox + kx);
                        mx += wgt * x;
                        my += wgt * y;
                        xx += wgt * x * x;
                        yy += wgt * y * y;
                        xy += wgt * x * y;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        assert!((ssim(&a, &b).unwrap() - total / 6.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = random(16, 16, 1, 6).map(|v| 0.25 + 0.5 * v);
        let dir = random(16, 16, 1, 7).map(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let amp = 0.02 * k as f64;
            let mut b = a.clone();
            for (v, d) in b.data_mut().iter_mut().zip(dir.data()) {
                *v += amp * d;
            }
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_outputs() {
        let mut r = MetricReport::default();
        r.push("a", &random(12, 12, 1, 8), &random(12, 12, 1, 9)).unwrap();
        r.push("b", &checker(12), &checker(12)).unwrap();
        let text = r.to_jsonl().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let last: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(last["count"], 2);
        assert!(r.summary_table().contains("mean"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_are_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = random(14, 14, 1, s1);
            let b = random(14, 14, 1, s2);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }
}
