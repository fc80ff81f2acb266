//! Image-quality metrics on restored PET values and intensity histograms.
//!
//! The data range used by PSNR and SSIM is `max - min` of the real volume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(real: &Volume, gen: &Volume) -> Result<()> {
    if real.dims() != gen.dims() {
        return Err(Error::ShapeMismatch {
            expected: real.dims().to_vec(),
            actual: gen.dims().to_vec(),
        });
    }
    Ok(())
}

fn data_range(v: &Volume) -> f64 {
    let (lo, hi) = v.min_max();
    hi as f64 - lo as f64
}

fn mse(real: &Volume, gen: &Volume) -> f64 {
    let n = real.len() as f64;
    real.values()
        .iter()
        .zip(gen.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n
}

/// `10 log10(range^2 / MSE)`; `+inf` when the volumes are identical.
pub fn psnr(real: &Volume, gen: &Volume) -> Result<f64> {
    check_pair(real, gen)?;
    let mse = mse(real, gen);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range(real).powi(2) / mse).log10())
}

pub fn rmse(real: &Volume, gen: &Volume) -> Result<f64> {
    check_pair(real, gen)?;
    Ok(mse(real, gen).sqrt())
}

/// Sum over every valid `k`-wide window along one axis of a `[d, h, w]`
/// buffer. Returns the shrunk buffer and its dims.
fn box_sum(src: &[f64], dims: [usize; 3], axis: usize, k: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let [od, oh, ow] = out_dims;
    let mut out = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let base = (z * dims[1] + y) * dims[2] + x;
                out.push((0..k).map(|i| src[base + i * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn window_sums(src: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let (a, d) = box_sum(src, dims, 2, SSIM_WINDOW);
    let (b, d) = box_sum(&a, d, 1, SSIM_WINDOW);
    box_sum(&b, d, 0, SSIM_WINDOW).0
}

/// Mean SSIM over every valid 7^3 window of a single 3D frame.
pub fn ssim3d(real: &[f64], gen: &[f64], dims: [usize; 3], range: f64) -> Result<f64> {
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
            reason: format!("ssim needs every dim >= {SSIM_WINDOW}"),
        });
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        window_sums(&real.iter().zip(gen).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>(), dims)
    };
    let sx = window_sums(real, dims);
    let sy = window_sums(gen, dims);
    let sxx = prod(&|a, _| a * a);
    let syy = prod(&|_, b| b * b);
    let sxy = prod(&|a, b| a * b);
    let n = (SSIM_WINDOW * SSIM_WINDOW * SSIM_WINDOW) as f64;
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = sxx[i] / n - mx * mx;
            let vy = syy[i] / n - my * my;
            let cov = sxy[i] / n - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            // flat windows of a zero-range volume
            if den == 0.0 { 1.0 } else { num / den }
        })
        .sum();
    Ok(total / sx.len() as f64)
}

/// SSIM of a 3D volume, or the mean over time steps of a 4D one.
pub fn ssim(real: &Volume, gen: &Volume) -> Result<f64> {
    check_pair(real, gen)?;
    let range = data_range(real);
    let frames = real.frames();
    let spatial = real.spatial();
    let n = spatial.iter().product::<usize>();
    let as_f64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut total = 0.0;
    for f in 0..frames {
        let r = as_f64(&real.values()[f * n..(f + 1) * n]);
        let g = as_f64(&gen.values()[f * n..(f + 1) * n]);
        total += ssim3d(&r, &g, spatial, range)?;
    }
    Ok(total / frames as f64)
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad number {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    /// dB; serialized as `"inf"` for identical volumes.
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub data_range: f64,
}

impl PairMetrics {
    pub fn compute(id: impl Into<String>, real: &Volume, gen: &Volume) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(real, gen)?,
            ssim: ssim(real, gen)?,
            rmse: rmse(real, gen)?,
            data_range: data_range(real),
        })
    }
}

/// Per-pair metrics and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub n_pairs: usize,
    pub data_range: f64,
    pub pairs: Vec<PairMetrics>,
}

impl MetricsReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::NoData);
        }
        let n = pairs.len() as f64;
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr: mean(|p| p.psnr),
            ssim: mean(|p| p.ssim),
            rmse: mean(|p| p.rmse),
            data_range: mean(|p| p.data_range),
            n_pairs: pairs.len(),
            pairs,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// `n_bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub min: f64,
    pub max: f64,
    pub frac_abs_below_1: f64,
}

impl HistogramReport {
    pub fn modal_bin(&self) -> usize {
        // first maximum
        let best = self.counts.iter().copied().max().unwrap_or(0);
        self.counts.iter().position(|&c| c == best).unwrap_or(0)
    }

    /// Adds another histogram over the same bins.
    pub fn merge(&mut self, other: &HistogramReport) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::Config("histogram bins differ".into()));
        }
        let (n0, n1) = (self.total as f64, other.total as f64);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        if self.total > 0 {
            self.frac_abs_below_1 =
                (self.frac_abs_below_1 * n0 + other.frac_abs_below_1 * n1) / (n0 + n1);
        }
        Ok(())
    }
}

/// Uniform-bin histogram over `[lo, hi]`; out-of-range values land in the
/// edge bins.
pub fn histogram(values: &[f32], n_bins: usize, range: (f64, f64)) -> Result<HistogramReport> {
    let (lo, hi) = range;
    if n_bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("degenerate histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; n_bins];
    let (mut min, mut max, mut small) = (f64::INFINITY, f64::NEG_INFINITY, 0u64);
    for &v in values {
        let v = v as f64;
        let bin = ((v - lo) / width).floor().clamp(0.0, (n_bins - 1) as f64) as usize;
        counts[bin] += 1;
        min = min.min(v);
        max = max.max(v);
        if v.abs() < 1.0 {
            small += 1;
        }
    }
    let total = values.len() as u64;
    Ok(HistogramReport {
        edges,
        counts,
        total,
        min,
        max,
        frac_abs_below_1: if total == 0 { 0.0 } else { small as f64 / total as f64 },
    })
}
