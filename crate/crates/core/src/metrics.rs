//! PSNR and SSIM for images in the `[0, 1]` domain.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1 / mse)` in dB with peak 1; `f64::INFINITY` for identical inputs.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), `K1 = 0.01`,
/// `K2 = 0.03`, dynamic range 1, averaged over channels and valid positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (c, h, w) = a.dims3("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("images must be at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_window();
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * n..(ch + 1) * n].iter().map(|v| v.f64()).collect();
        let pb: Vec<f64> = b.data()[ch * n..(ch + 1) * n].iter().map(|v| v.f64()).collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &k);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &k);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// `inf` for the identical-image sentinel, otherwise the plain value.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_owned()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub frame: String,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    #[serde(serialize_with = "serialize_db")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub sigma: Option<f64>,
}

impl MetricsReport {
    pub fn new(frames: Vec<FrameMetrics>, sigma: Option<f64>) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr_db = frames.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        MetricsReport { frames, mean_psnr_db, mean_ssim, sigma }
    }

    /// `frame,psnr_db,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr_db,ssim\n");
        for f in &self.frames {
            out.push_str(&format!("{},{},{}\n", f.frame, format_db(f.psnr_db), f.ssim));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::zeros(&[1, 4, 4]);
        let b = Tensor::<f64>::full(&[1, 4, 4], 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_of_constant_images() {
        let a = Tensor::<f32>::zeros(&[3, 16, 16]);
        let b = Tensor::<f32>::ones(&[3, 16, 16]);
        let c1 = 0.01f64.powi(2);
        let expect = c1 / (1.0 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Tensor::<f32>::zeros(&[3, 8, 8]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn report_serialization() {
        let r = MetricsReport::new(
            vec![
                FrameMetrics { frame: "000000.png".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
                FrameMetrics { frame: "000001.png".into(), psnr_db: 30.0, ssim: 0.9 },
            ],
            Some(25.0),
        );
        assert_eq!(r.to_csv(), "frame,psnr_db,ssim\n000000.png,inf,1\n000001.png,30,0.9\n");
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["frames"][0]["psnr_db"], "inf");
        assert_eq!(v["mean_psnr_db"], "inf");
        assert_eq!(v["frames"][1]["ssim"], 0.9);
    }
}
