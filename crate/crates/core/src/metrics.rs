//! Quality and rate metrics, rate-distortion curves, and BD-rate.
//!
//! PSNR and MS-SSIM score reconstructions against originals in `[0, 1]`
//! pixel scale. Bits per pixel normalizes a container's full size (header
//! included) by the pixel count summed over views. BD-rate compares two
//! rate-distortion curves with the classic cubic fit of log-rate over
//! quality, integrating their difference across the overlapping quality
//! interval. Curves serialize to a `label,metric,bpp,quality` CSV that
//! roundtrips exactly.

use crate::entropy::BitstreamContainer;
use crate::error::{io_err, Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::kernels::{avg_pool2_fwd, sep_reflect_fwd};
use crate::scalar::Scalar;
use ndarray::{Array3, ArrayView3};
use std::path::Path;
use std::sync::Arc;

/// Per-scale weights of the five-scale structural similarity score.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// PSNR reported for an exact reconstruction (avoids infinities in tables).
pub const PSNR_CAP_DB: f64 = 100.0;
/// Smallest image side accepted by the five-scale score.
pub const MS_SSIM_MIN_SIDE: usize = 160;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

// ---- distortion -------------------------------------------------------

/// Mean squared error over all channels and pixels.
pub fn mse<S: Scalar>(a: ArrayView3<S>, b: ArrayView3<S>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mse: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let sum = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = Scalar::to_f64(x) - Scalar::to_f64(y);
            d * d
        })
        .sum::<f64>();
    Ok(sum / n)
}

/// PSNR in dB for a given mean squared error in `[0, 1]` scale.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio between two images in `[0, 1]`.
pub fn psnr<S: Scalar>(a: ArrayView3<S>, b: ArrayView3<S>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

// ---- multi-scale structural similarity --------------------------------

/// Normalized Gaussian window taps shared by the pure and traced scores.
pub fn gaussian_window<S: Scalar>() -> Vec<S> {
    let r = (WINDOW / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps.into_iter().map(S::from_f64).collect()
}

fn blur(x: &Array3<f64>, taps: &[f64]) -> Array3<f64> {
    let rows = sep_reflect_fwd(x.view(), taps, 1);
    sep_reflect_fwd(rows.view(), taps, 2)
}

fn ms_ssim_scales(a: &Array3<f64>, b: &Array3<f64>, scales: usize) -> f64 {
    let taps = gaussian_window::<f64>();
    let mut a = a.clone();
    let mut b = b.clone();
    let mut score = 1.0;
    for s in 0..scales {
        let mu_a = blur(&a, &taps);
        let mu_b = blur(&b, &taps);
        let var_a = blur(&(&a * &a), &taps) - &mu_a * &mu_a;
        let var_b = blur(&(&b * &b), &taps) - &mu_b * &mu_b;
        let cov = blur(&(&a * &b), &taps) - &mu_a * &mu_b;
        let cs = (cov.mapv(|c| 2.0 * c + SSIM_C2)) / (&var_a + &var_b + SSIM_C2);
        let w = MS_SSIM_WEIGHTS[s];
        if s + 1 == scales {
            // final scale folds in the luminance term
            let lum = (2.0 * &mu_a * &mu_b + SSIM_C1) / (&mu_a * &mu_a + &mu_b * &mu_b + SSIM_C1);
            let m = (&lum * &cs).mean().unwrap().max(0.0);
            score *= m.powf(w);
        } else {
            let m = cs.mean().unwrap().max(0.0);
            score *= m.powf(w);
            a = avg_pool2_fwd(a.view());
            b = avg_pool2_fwd(b.view());
        }
    }
    score
}

fn check_ms_ssim_pre(ad: (usize, usize, usize), bd: (usize, usize, usize)) -> Result<()> {
    if ad != bd {
        return Err(Error::Shape(format!("ms_ssim: {ad:?} vs {bd:?}")));
    }
    let (_, h, w) = ad;
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::Shape(format!(
            "ms_ssim: image {h}x{w} is too small for 5 dyadic scales \
             (min side {MS_SSIM_MIN_SIDE})"
        )));
    }
    Ok(())
}

/// Five-scale structural similarity between two images in `[0, 1]`.
pub fn ms_ssim<S: Scalar>(a: ArrayView3<S>, b: ArrayView3<S>) -> Result<f64> {
    check_ms_ssim_pre(a.dim(), b.dim())?;
    let af = a.mapv(Scalar::to_f64);
    let bf = b.mapv(Scalar::to_f64);
    Ok(ms_ssim_scales(&af, &bf, MS_SSIM_WEIGHTS.len()))
}

fn ms_ssim_trace_scales<S: Scalar>(
    tape: &mut Tape<S>,
    a0: Var,
    b0: Var,
    scales: usize,
) -> Var {
    let taps = Arc::new(gaussian_window::<S>());
    let blur_t = |tape: &mut Tape<S>, x: Var, taps: &Arc<Vec<S>>| {
        let rows = tape.sep_reflect(x, Arc::clone(taps), 1);
        tape.sep_reflect(rows, Arc::clone(taps), 2)
    };
    let c1 = S::from_f64(SSIM_C1);
    let c2 = S::from_f64(SSIM_C2);
    // means clamp just above zero so the fractional powers stay finite
    let floor = S::from_f64(1e-6);
    let (mut a, mut b) = (a0, b0);
    let mut score: Option<Var> = None;
    for s in 0..scales {
        let mu_a = blur_t(tape, a, &taps);
        let mu_b = blur_t(tape, b, &taps);
        let aa = tape.mul(a, a);
        let bb = tape.mul(b, b);
        let ab = tape.mul(a, b);
        let (baa, bbb, bab) = (
            blur_t(tape, aa, &taps),
            blur_t(tape, bb, &taps),
            blur_t(tape, ab, &taps),
        );
        let mu_aa = tape.mul(mu_a, mu_a);
        let mu_bb = tape.mul(mu_b, mu_b);
        let mu_ab = tape.mul(mu_a, mu_b);
        let var_a = tape.sub(baa, mu_aa);
        let var_b = tape.sub(bbb, mu_bb);
        let cov = tape.sub(bab, mu_ab);
        let cov2 = tape.scale(cov, S::from_f64(2.0));
        let cs_num = tape.add_const(cov2, c2);
        let var_sum = tape.add(var_a, var_b);
        let cs_den = tape.add_const(var_sum, c2);
        let cs = tape.div(cs_num, cs_den);
        let w = S::from_f64(MS_SSIM_WEIGHTS[s]);
        let term = if s + 1 == scales {
            let mu_ab2 = tape.scale(mu_ab, S::from_f64(2.0));
            let lum_num = tape.add_const(mu_ab2, c1);
            let mu_sq = tape.add(mu_aa, mu_bb);
            let lum_den = tape.add_const(mu_sq, c1);
            let lum = tape.div(lum_num, lum_den);
            let ssim = tape.mul(lum, cs);
            tape.mean_all(ssim)
        } else {
            let m = tape.mean_all(cs);
            a = tape.avg_pool2(a);
            b = tape.avg_pool2(b);
            m
        };
        let clamped = tape.clamp_min(term, floor);
        let powed = tape.pow_const(clamped, w);
        score = Some(match score {
            None => powed,
            Some(acc) => tape.mul(acc, powed),
        });
    }
    score.expect("at least one scale")
}

/// Differentiable five-scale structural similarity on the tape; shares
/// the window and scale schedule with [`ms_ssim`].
pub fn ms_ssim_trace<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let dim3 = |x: &ndarray::ArrayD<S>| -> (usize, usize, usize) {
        let s = x.shape();
        (s[0], s[1], s[2])
    };
    let (ad, bd) = (dim3(tape.value(a)), dim3(tape.value(b)));
    check_ms_ssim_pre(ad, bd)?;
    Ok(ms_ssim_trace_scales(tape, a, b, MS_SSIM_WEIGHTS.len()))
}

// ---- rate -------------------------------------------------------------

/// Bits per pixel for a byte count spread over `k` views of `h x w` pixels.
pub fn bpp_for_bytes(total_bytes: usize, k: usize, h: usize, w: usize) -> f64 {
    8.0 * total_bytes as f64 / (k * h * w) as f64
}

/// Bits per pixel of a serialized container, header included.
pub fn bpp(container: &BitstreamContainer) -> f64 {
    bpp_for_bytes(
        container.total_bytes(),
        container.views.len(),
        container.height as usize,
        container.width as usize,
    )
}

// ---- rate-distortion curves -------------------------------------------

/// One evaluation point: rate in bits per pixel and quality (dB or a
/// structural-similarity score).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// A labeled rate-distortion curve for one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub metric: String,
    pub points: Vec<RdPoint>,
}

/// Points required for the cubic-fit rate comparison.
pub const BD_RATE_MIN_POINTS: usize = 4;

impl RdCurve {
    pub fn new(label: impl Into<String>, metric: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            metric: metric.into(),
            points: Vec::new(),
        }
    }

    /// Check the ordering and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        for field in [&self.label, &self.metric] {
            if field.is_empty() || field.contains(',') || field.contains('\n') {
                return Err(Error::Schema(format!(
                    "curve label/metric must be non-empty and free of commas: {field:?}"
                )));
            }
        }
        for p in &self.points {
            if !(p.bpp > 0.0) || !p.bpp.is_finite() || !p.quality.is_finite() {
                return Err(Error::Schema(format!(
                    "curve '{}': point ({}, {}) must have finite positive rate",
                    self.label, p.bpp, p.quality
                )));
            }
        }
        for w in self.points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(Error::Schema(format!(
                    "curve '{}': rates must increase strictly ({} then {})",
                    self.label, w[0].bpp, w[1].bpp
                )));
            }
        }
        Ok(())
    }
}

/// Least-squares cubic fit via the 4x4 normal equations with partial
/// pivoting. Returns coefficients lowest power first.
fn polyfit_cubic(x: &[f64], y: &[f64]) -> Result<[f64; 4]> {
    // accumulate moments of x up to power 6 and the mixed moments with y
    let mut sx = [0.0f64; 7];
    let mut sy = [0.0f64; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        let mut p = 1.0;
        for (k, s) in sx.iter_mut().enumerate() {
            *s += p;
            if k < 4 {
                sy[k] += p * yi;
            }
            p *= xi;
        }
    }
    let mut m = [[0.0f64; 5]; 4];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().take(4).enumerate() {
            *cell = sx[r + c];
        }
        row[4] = sy[r];
    }
    // Gaussian elimination, largest pivot in column
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < 1e-12 {
            return Err(Error::Schema(
                "cubic fit is singular; quality values must be distinct".into(),
            ));
        }
        m.swap(col, pivot);
        for row in col + 1..4 {
            let f = m[row][col] / m[col][col];
            for k in col..5 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut c = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = m[row][4];
        for k in row + 1..4 {
            acc -= m[row][k] * c[k];
        }
        c[row] = acc / m[row][row];
    }
    Ok(c)
}

/// Definite integral of a cubic with coefficients lowest power first.
fn cubic_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |t: f64| {
        t * (c[0] + t * (c[1] / 2.0 + t * (c[2] / 3.0 + t * c[3] / 4.0)))
    };
    anti(hi) - anti(lo)
}

fn fit_log_rate(curve: &RdCurve) -> Result<([f64; 4], f64, f64)> {
    curve.validate()?;
    if curve.points.len() < BD_RATE_MIN_POINTS {
        return Err(Error::Schema(format!(
            "curve '{}' has {} points; rate comparison needs at least {BD_RATE_MIN_POINTS}",
            curve.label,
            curve.points.len()
        )));
    }
    let q: Vec<f64> = curve.points.iter().map(|p| p.quality).collect();
    let r: Vec<f64> = curve.points.iter().map(|p| p.bpp.log10()).collect();
    let fit = polyfit_cubic(&q, &r)?;
    let lo = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((fit, lo, hi))
}

/// Mean difference of the fitted log10-rates, test minus anchor, over the
/// overlapping quality interval. Exactly antisymmetric in its arguments.
pub fn bd_rate_log_offset(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (fa, alo, ahi) = fit_log_rate(anchor)?;
    let (ft, tlo, thi) = fit_log_rate(test)?;
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if hi <= lo {
        return Err(Error::Schema(format!(
            "quality ranges do not overlap ([{alo}, {ahi}] vs [{tlo}, {thi}])"
        )));
    }
    Ok((cubic_integral(&ft, lo, hi) - cubic_integral(&fa, lo, hi)) / (hi - lo))
}

/// Average rate difference of `test` against `anchor` at equal quality,
/// in percent; negative means `test` spends fewer bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    Ok(100.0 * (10f64.powf(bd_rate_log_offset(anchor, test)?) - 1.0))
}

// ---- CSV --------------------------------------------------------------

/// Column header shared by every rate-distortion CSV this crate reads or
/// writes.
pub const RD_CSV_HEADER: &str = "label,metric,bpp,quality";

/// Serialize curves to CSV. `f64` values print in shortest-roundtrip
/// form, so reading the file back reconstructs the curves exactly.
pub fn rd_csv_to_string(curves: &[RdCurve]) -> Result<String> {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for c in curves {
        c.validate()?;
        for p in &c.points {
            out.push_str(&format!("{},{},{},{}\n", c.label, c.metric, p.bpp, p.quality));
        }
    }
    Ok(out)
}

/// Parse the CSV produced by [`rd_csv_to_string`], grouping rows into
/// curves by (label, metric) in first-appearance order.
pub fn rd_csv_from_str(text: &str) -> Result<Vec<RdCurve>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RD_CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "expected CSV header '{RD_CSV_HEADER}', got {other:?}"
            )))
        }
    }
    let mut curves: Vec<RdCurve> = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: expected 4 fields, got {}",
                idx + 2,
                parts.len()
            )));
        }
        let bpp: f64 = parts[2]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: bpp: {e}", idx + 2)))?;
        let quality: f64 = parts[3]
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: quality: {e}", idx + 2)))?;
        let (label, metric) = (parts[0].trim(), parts[1].trim());
        let curve = match curves
            .iter_mut()
            .find(|c| c.label == label && c.metric == metric)
        {
            Some(c) => c,
            None => {
                curves.push(RdCurve::new(label, metric));
                curves.last_mut().unwrap()
            }
        };
        curve.points.push(RdPoint { bpp, quality });
    }
    for c in &curves {
        c.validate()?;
    }
    Ok(curves)
}

pub fn write_rd_csv(path: &Path, curves: &[RdCurve]) -> Result<()> {
    std::fs::write(path, rd_csv_to_string(curves)?).map_err(io_err(path))
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdCurve>> {
    rd_csv_from_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
}
