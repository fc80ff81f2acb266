//! Seeded synthetic MRI/PET pairs.
//!
//! The MRI is a smooth ellipsoidal "head" with low-frequency texture, bright
//! spots and dark spots. The PET is a deterministic function of the same
//! latent fields: bright spots become sharp positive uptake (up to the top of
//! `pet_range`), dark spots become sharp negative dips (down to the bottom of
//! `pet_range`), tissue carries a faint signal below 1 and everything gets
//! near-zero Laplace noise. Most PET voxels therefore sit in `(-1, 1)` with a
//! long signed tail, and the MRI -> PET mapping is learnable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Modality, PairSample, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mri_dims: [usize; 3],
    /// `[T, D, H, W]`
    pub pet_dims: [usize; 4],
    pub seed: u64,
    pub mri_range: [f32; 2],
    pub pet_range: [f32; 2],
    pub hot_spots: [usize; 2],
    pub cold_spots: [usize; 2],
    /// Laplace scale of the PET background noise.
    pub pet_noise: f32,
    /// Gaussian std of the MRI noise, as a fraction of the MRI range.
    pub mri_noise: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mri_dims: [64, 64, 64],
            pet_dims: [2, 24, 19, 19],
            seed: 7,
            mri_range: [0.0, 255.0],
            pet_range: [-100.0, 1000.0],
            hot_spots: [3, 5],
            cold_spots: [1, 2],
            pet_noise: 0.08,
            mri_noise: 0.01,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mri_dims.iter().any(|&d| d == 0) || self.pet_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims {
                dims: self.mri_dims.iter().chain(&self.pet_dims).copied().collect(),
                reason: "dims must be positive".into(),
            });
        }
        if !(self.mri_range[0] < self.mri_range[1]) || !(self.pet_range[0] < self.pet_range[1]) {
            return Err(Error::Config("intensity ranges must be increasing".into()));
        }
        if self.pet_range[0] > 0.0 || self.pet_range[1] < 0.0 {
            return Err(Error::Config("pet_range must contain 0".into()));
        }
        if self.hot_spots[0] > self.hot_spots[1] || self.cold_spots[0] > self.cold_spots[1] {
            return Err(Error::Config("spot count ranges must be [min, max]".into()));
        }
        if self.pet_noise < 0.0 || self.mri_noise < 0.0 {
            return Err(Error::Config("noise scales must be >= 0".into()));
        }
        Ok(())
    }

    /// Seed of the `index`-th sample of a dataset generated from this config.
    pub fn sample_seed(&self, index: u64) -> u64 {
        mix_seed(&[self.seed, index])
    }
}

/// SplitMix64 over a sequence of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug)]
struct Spot {
    center: [f64; 3],
    sigma: f64,
    amp: f64,
}

impl Spot {
    fn at(&self, u: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|i| (u[i] - self.center[i]).powi(2)).sum();
        self.amp * (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Latent anatomy shared by both modalities, in unit coordinates.
struct Phantom {
    center: [f64; 3],
    radii: [f64; 3],
    waves: [([f64; 3], f64); 2],
    hot: Vec<Spot>,
    cold: Vec<Spot>,
}

impl Phantom {
    fn sample(rng: &mut ChaCha8Rng, cfg: &DataConfig) -> Self {
        let center = std::array::from_fn(|_| 0.5 + rng.random_range(-0.03..0.03));
        let radii = std::array::from_fn(|_| rng.random_range(0.36..0.44));
        let waves = std::array::from_fn(|_| {
            let f = std::array::from_fn(|_| rng.random_range(1.0..3.0));
            (f, rng.random_range(0.0..std::f64::consts::TAU))
        });
        let spot = |rng: &mut ChaCha8Rng, amp: std::ops::Range<f64>| {
            // rejection-sample a centre well inside the head
            let c = loop {
                let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
                let rho: f64 = (0..3)
                    .map(|i| ((c[i] - center[i]) / radii[i]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if rho < 0.7 {
                    break c;
                }
            };
            Spot {
                center: c,
                sigma: rng.random_range(0.06..0.1),
                amp: rng.random_range(amp),
            }
        };
        let n_hot = rng.random_range(cfg.hot_spots[0]..=cfg.hot_spots[1]);
        let hot = (0..n_hot).map(|_| spot(rng, 0.55..1.0)).collect();
        let n_cold = rng.random_range(cfg.cold_spots[0]..=cfg.cold_spots[1]);
        let cold = (0..n_cold).map(|_| spot(rng, 0.7..1.0)).collect();
        Self {
            center,
            radii,
            waves,
            hot,
            cold,
        }
    }

    fn tissue(&self, u: [f64; 3]) -> f64 {
        let rho: f64 = (0..3)
            .map(|i| ((u[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        1.0 / (1.0 + (-(1.0 - rho) * 25.0).exp())
    }

    fn texture(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(f, phase)| {
                let arg: f64 = (0..3).map(|i| f[i] * u[i]).sum::<f64>() * std::f64::consts::TAU;
                (arg + phase).sin()
            })
            .sum();
        0.5 + 0.25 * s
    }

    fn hot(&self, u: [f64; 3]) -> f64 {
        self.hot.iter().map(|s| s.at(u)).sum::<f64>().min(1.2)
    }

    fn cold(&self, u: [f64; 3]) -> f64 {
        self.cold.iter().map(|s| s.at(u)).sum::<f64>().min(1.0)
    }
}

fn centers(dims: &[usize]) -> impl Iterator<Item = [f64; 3]> + '_ {
    let [d, h, w] = [dims[0], dims[1], dims[2]];
    (0..d).flat_map(move |z| {
        (0..h).flat_map(move |y| {
            (0..w).map(move |x| {
                [
                    (z as f64 + 0.5) / d as f64,
                    (y as f64 + 0.5) / h as f64,
                    (x as f64 + 0.5) / w as f64,
                ]
            })
        })
    })
}

fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One synthetic pair; a pure function of `seed` and `cfg`.
pub fn synth_pair(seed: u64, cfg: &DataConfig) -> Result<PairSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph = Phantom::sample(&mut rng, cfg);

    let [mri_lo, mri_hi] = cfg.mri_range.map(|v| v as f64);
    let mri_span = mri_hi - mri_lo;
    let noise = Normal::new(0.0, cfg.mri_noise as f64).unwrap();
    let mri_vals: Vec<f32> = centers(&cfg.mri_dims)
        .map(|u| {
            let t = ph.tissue(u);
            let base = t * (0.3 + 0.12 * ph.texture(u)) + 0.45 * ph.hot(u) * t
                - 0.22 * ph.cold(u) * t;
            let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
            (mri_lo + mri_span * v) as f32
        })
        .collect();

    let [pet_lo, pet_hi] = cfg.pet_range.map(|v| v as f64);
    let frames = cfg.pet_dims[0];
    let spatial = &cfg.pet_dims[1..];
    let latent: Vec<(f64, f64, f64)> = centers(spatial)
        .map(|u| {
            let t = ph.tissue(u);
            (
                pet_hi * ph.hot(u).powi(4),
                pet_lo * ph.cold(u).powi(4),
                0.5 * t * ph.texture(u),
            )
        })
        .collect();
    let mut pet_vals = Vec::with_capacity(frames * latent.len());
    for frame in 0..frames {
        let decay = 0.8f64.powi(frame as i32);
        for &(hot, cold, faint) in &latent {
            let v = decay * (hot + faint) + cold + laplace(&mut rng, cfg.pet_noise as f64);
            pet_vals.push(v as f32);
        }
    }

    let mri = Volume::new(Modality::Mri, cfg.mri_dims.to_vec(), mri_vals)?;
    let pet = Volume::new(Modality::Pet, cfg.pet_dims.to_vec(), pet_vals)?;
    PairSample::new(format!("synth-{seed:016x}"), mri, pet)
}
