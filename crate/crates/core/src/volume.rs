//! Volume container, MRI-statistics normalization and the raw volume file
//! format.
//!
//! MRI volumes are standardized with their own mean and standard deviation.
//! The paired PET is standardized with a tenth of the *MRI's* statistics, so
//! that the original PET intensities can be recovered from the MRI alone.
//!
//! File layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"M2PV"`                         |
//! | 4      | 1    | modality (0 = MRI, 1 = PET)             |
//! | 5      | 1    | ndim (3 or 4)                           |
//! | 6      | 2    | reserved, zero                          |
//! | 8      | 16   | four `u32` dims, unused trailing dims 0 |
//! | 24     | 4n   | `f32` voxels, row-major                 |

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on standard deviations.
pub const STD_EPS: f64 = 1e-8;

pub const MAGIC: [u8; 4] = *b"M2PV";
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Pet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Vec<usize>,
    values: Vec<f32>,
    modality: Modality,
}

impl Volume {
    /// MRI must be `[D, H, W]`, PET `[T, D, H, W]`; every value finite.
    pub fn new(modality: Modality, dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let want = match modality {
            Modality::Mri => 3,
            Modality::Pet => 4,
        };
        if dims.len() != want || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims {
                dims,
                reason: format!("{modality:?} volumes need {want} positive dims"),
            });
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            values,
            modality,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Spatial dims `[D, H, W]`.
    pub fn spatial(&self) -> [usize; 3] {
        let s = &self.dims[self.dims.len() - 3..];
        [s[0], s[1], s[2]]
    }

    /// Time steps (1 for MRI).
    pub fn frames(&self) -> usize {
        match self.modality {
            Modality::Mri => 1,
            Modality::Pet => self.dims[0],
        }
    }

    /// `[T, D, H, W]` with `T = 1` for MRI.
    pub fn dims4(&self) -> [usize; 4] {
        let [d, h, w] = self.spatial();
        [self.frames(), d, h, w]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        let values = self.values.iter().map(|&v| f(v as f64) as f32).collect();
        Volume::new(self.modality, self.dims.clone(), values)
    }

    fn expect(&self, modality: Modality) -> Result<()> {
        if self.modality != modality {
            return Err(Error::WrongModality {
                expected: modality,
                actual: self.modality,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    /// Scale and offset applied to the paired PET.
    pub fn pet_affine(&self) -> (f64, f64) {
        (self.mean / 10.0, (self.std / 10.0).max(STD_EPS))
    }
}

/// Mean and population standard deviation, std clamped below at
/// [`STD_EPS`].
pub fn compute_stats(vol: &Volume) -> Result<NormalizationStats> {
    if vol.is_empty() {
        return Err(Error::EmptyVolume);
    }
    if let Some(index) = vol.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let n = vol.len() as f64;
    let mean = vol.values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(NormalizationStats {
        mean,
        std: var.sqrt().max(STD_EPS),
    })
}

pub fn normalize_mri(vol: &Volume) -> Result<(Volume, NormalizationStats)> {
    vol.expect(Modality::Mri)?;
    let stats = compute_stats(vol)?;
    let out = vol.map(|v| (v - stats.mean) / stats.std)?;
    Ok((out, stats))
}

/// `(v - mean/10) / (std/10)` with the paired MRI's statistics.
pub fn normalize_pet(pet: &Volume, mri_stats: &NormalizationStats) -> Result<Volume> {
    pet.expect(Modality::Pet)?;
    let (offset, scale) = mri_stats.pet_affine();
    pet.map(|v| (v - offset) / scale)
}

/// Inverse of [`normalize_pet`].
pub fn restore_pet(norm_pet: &Volume, mri_stats: &NormalizationStats) -> Result<Volume> {
    norm_pet.expect(Modality::Pet)?;
    let (offset, scale) = mri_stats.pet_affine();
    norm_pet.map(|v| v * scale + offset)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub mri: Volume,
    pub pet: Volume,
    pub mri_stats: NormalizationStats,
    pub id: String,
}

impl PairSample {
    pub fn new(id: impl Into<String>, mri: Volume, pet: Volume) -> Result<Self> {
        mri.expect(Modality::Mri)?;
        pet.expect(Modality::Pet)?;
        let mri_stats = compute_stats(&mri)?;
        Ok(Self {
            mri,
            pet,
            mri_stats,
            id: id.into(),
        })
    }
}

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * vol.len());
    buf.extend_from_slice(&MAGIC);
    buf.push(match vol.modality {
        Modality::Mri => 0,
        Modality::Pet => 1,
    });
    buf.push(vol.dims.len() as u8);
    buf.extend_from_slice(&[0, 0]);
    for i in 0..4 {
        let d = vol.dims.get(i).copied().unwrap_or(0) as u32;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in &vol.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the container. A header shorter than 24 bytes or a payload that
/// is not a whole number of floats is [`Error::TruncatedPayload`]; a whole
/// number of floats that disagrees with the dims is
/// [`Error::DimPayloadMismatch`].
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { what: "volume" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let modality = match bytes[4] {
        0 => Modality::Mri,
        1 => Modality::Pet,
        m => return Err(Error::MalformedHeader(format!("modality byte {m}"))),
    };
    let ndim = bytes[5] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("ndim {ndim}")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let declared: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() % 4 != 0 {
        return Err(Error::TruncatedPayload {
            expected: declared * 4,
            found: payload.len(),
        });
    }
    if payload.len() / 4 != declared {
        return Err(Error::DimPayloadMismatch {
            declared,
            found: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(modality, dims, values)
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(vol))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mri(vals: Vec<f32>) -> Volume {
        let n = vals.len();
        Volume::new(Modality::Mri, vec![1, 1, n], vals).unwrap()
    }

    fn pet(vals: Vec<f32>) -> Volume {
        let n = vals.len();
        Volume::new(Modality::Pet, vec![1, 1, 1, n], vals).unwrap()
    }

    #[test]
    fn volume_invariants() {
        assert!(Volume::new(Modality::Mri, vec![2, 2], vec![0.0; 4]).is_err());
        assert!(Volume::new(Modality::Pet, vec![2, 2, 2], vec![0.0; 8]).is_err());
        assert!(Volume::new(Modality::Mri, vec![2, 2, 2], vec![0.0; 7]).is_err());
        assert!(matches!(
            Volume::new(Modality::Mri, vec![1, 1, 2], vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn stats_examples() {
        let s = compute_stats(&mri(vec![5.0; 10])).unwrap();
        assert_eq!((s.mean, s.std), (5.0, 1e-8));
        let s = compute_stats(&mri(vec![0.0, 0.0, 0.0, 4.0])).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!((s.std - 3f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn stats_of_standard_normal_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f32> = (0..64 * 64 * 64)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        // oracle: direct mean / population std over the drawn buffer
        let n = vals.len() as f64;
        let m = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (vals.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        let vol = Volume::new(Modality::Mri, vec![64, 64, 64], vals).unwrap();
        let s = compute_stats(&vol).unwrap();
        assert!((s.mean - m).abs() < 1e-12 && (s.std - sd).abs() < 1e-12);
        assert!(s.mean.abs() < 0.02 && (s.std - 1.0).abs() < 0.02);
    }

    #[test]
    fn normalize_mri_examples() {
        let (out, s) = normalize_mri(&mri(vec![0.0, 4.0])).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 2.0));
        assert_eq!(out.values(), &[-1.0, 1.0]);
        let (out, _) = normalize_mri(&mri(vec![7.0; 5])).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert!(matches!(
            normalize_mri(&pet(vec![1.0])),
            Err(Error::WrongModality { .. })
        ));
    }

    #[test]
    fn normalize_pet_examples() {
        let s = NormalizationStats {
            mean: 100.0,
            std: 20.0,
        };
        assert_eq!(normalize_pet(&pet(vec![50.0, 10.0]), &s).unwrap().values(), &[20.0, 0.0]);
        assert_eq!(restore_pet(&pet(vec![20.0, 0.0]), &s).unwrap().values(), &[50.0, 10.0]);
        assert!(normalize_pet(&mri(vec![1.0]), &s).is_err());
    }

    #[test]
    fn file_errors_are_distinct() {
        let vol = Volume::new(Modality::Mri, vec![2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_volume(&vol);
        assert_eq!(decode_volume(&bytes).unwrap(), vol);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 2]),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_volume(&bytes[..10]),
            Err(Error::TruncatedPayload { .. })
        ));
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 4]),
            Err(Error::DimPayloadMismatch { declared: 8, found: 7 })
        ));
    }

    #[test]
    fn save_load_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let vol = Volume::new(Modality::Pet, vec![2, 1, 2, 3], vec![-0.0, 1.5, -1e30, 3.0, 7.0, 1e-40, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        save_volume(&p, &vol).unwrap();
        let back = load_volume(&p).unwrap();
        let bits = |v: &Volume| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vol));
        assert_eq!(back.dims(), vol.dims());
    }

    proptest! {
        #[test]
        fn pet_normalization_round_trip(
            v in -1e6f32..1e6,
            mean in 0.0f64..200.0,
            std in 0.5f64..100.0,
        ) {
            let s = NormalizationStats { mean, std };
            let p = pet(vec![v]);
            let back = restore_pet(&normalize_pet(&p, &s).unwrap(), &s).unwrap();
            let err = (back.values()[0] as f64 - v as f64).abs();
            prop_assert!(err <= 1e-4 * (v.abs() as f64).max(1.0));
        }

        #[test]
        fn normalized_mri_is_standard(vals in prop::collection::vec(-100.0f32..300.0, 2..200)) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let (out, _) = normalize_mri(&mri(vals)).unwrap();
            let s = compute_stats(&out).unwrap();
            prop_assert!(s.mean.abs() < 1e-5);
            prop_assert!((s.std - 1.0).abs() < 1e-5);
        }

        #[test]
        fn file_round_trip_bit_exact(bits in prop::collection::vec(any::<u32>(), 1..64)) {
            let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).filter(|v| v.is_finite()).collect();
            prop_assume!(!vals.is_empty());
            let n = vals.len();
            let vol = Volume::new(Modality::Pet, vec![1, 1, 1, n], vals).unwrap();
            let back = decode_volume(&encode_volume(&vol)).unwrap();
            let a: Vec<u32> = vol.values().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
