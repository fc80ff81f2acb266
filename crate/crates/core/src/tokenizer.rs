//! Volumes to integer token sequences.
//!
//! A volume is summarized into 512 signed abs-max values over an 8x8x8 grid,
//! each value is scaled by 10^3 and rounded into the value band
//! `[1, 10^4]`, and an MRI/PET pair of such id lists is laid out as
//! `[BEGIN] mri.. [SEP] pet.. [END]` (1027 tokens). Values outside the band
//! are folded into the low `[1, 1000)` ids with mod-500 arithmetic, much like
//! a reserved block of unknown-word ids.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Float;
use crate::volume::{Modality, Volume};

/// Regions per spatial axis.
pub const GRID: usize = 8;
/// Summary values per volume.
pub const SUMMARY_LEN: usize = GRID * GRID * GRID;
/// `[BEGIN] + 512 + [SEP] + 512 + [END]`.
pub const SEQ_LEN: usize = 1 + SUMMARY_LEN + 1 + SUMMARY_LEN + 1;

pub const PAD: u32 = 0;
pub const VALUE_MIN: u32 = 1;
pub const VALUE_MAX: u32 = 10_000;
pub const BEGIN: u32 = 10_001;
pub const SEP: u32 = 10_002;
pub const END: u32 = 10_003;
pub const MASK: u32 = 10_004;
pub const VOCAB_SIZE: usize = 10_005;

pub const QUANT_SCALE: f64 = 1e3;
const FOLD: f64 = 500.0;

pub const MRI_OFFSET: usize = 1;
pub const SEP_POS: usize = 1 + SUMMARY_LEN;
pub const PET_OFFSET: usize = SEP_POS + 1;
pub const END_POS: usize = SEQ_LEN - 1;

/// round(0.05 * 512)
pub const MRI_MASKED: usize = 26;
/// round(0.25 * 512)
pub const PET_MASKED: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Segment {
    Begin = 0,
    Mri = 1,
    Sep = 2,
    Pet = 3,
    End = 4,
}

impl Segment {
    pub const COUNT: usize = 5;
}

/// Region boundaries `floor(i * n / 8)` for `i = 0..=8`.
pub fn grid_bounds(n: usize) -> [usize; GRID + 1] {
    std::array::from_fn(|i| i * n / GRID)
}

/// Flat index of the signed abs-max element of every grid region of a
/// `[C, D, H, W]` buffer, regions in row-major grid order. Ties keep the
/// first element in scan order (channel, depth, height, width).
pub fn abs_max_argmax<T: Float>(data: &[T], dims: [usize; 4]) -> Result<Vec<usize>> {
    let [c, d, h, w] = dims;
    if d < GRID || h < GRID || w < GRID {
        return Err(Error::InvalidDims {
            dims: dims.to_vec(),
            reason: format!("every spatial dim must be >= {GRID}"),
        });
    }
    if data.len() != c * d * h * w {
        return Err(Error::LengthMismatch {
            expected: c * d * h * w,
            actual: data.len(),
        });
    }
    let (bd, bh, bw) = (grid_bounds(d), grid_bounds(h), grid_bounds(w));
    let mut winners = Vec::with_capacity(SUMMARY_LEN);
    for gz in 0..GRID {
        for gy in 0..GRID {
            for gx in 0..GRID {
                let mut best = (T::neg_infinity(), usize::MAX);
                for ch in 0..c {
                    for z in bd[gz]..bd[gz + 1] {
                        for y in bh[gy]..bh[gy + 1] {
                            let row = ((ch * d + z) * h + y) * w;
                            for x in bw[gx]..bw[gx + 1] {
                                let a = data[row + x].abs();
                                if a > best.0 {
                                    best = (a, row + x);
                                }
                            }
                        }
                    }
                }
                winners.push(best.1);
            }
        }
    }
    Ok(winners)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummarySequence {
    pub values: Vec<f32>,
    pub source_modality: Modality,
}

/// Signed abs-max pooling of a volume over the 8x8x8 grid. For PET, each
/// region spans every time step.
pub fn summarize(vol: &Volume) -> Result<SummarySequence> {
    let dims = vol.dims4();
    let winners = abs_max_argmax(vol.values(), dims)?;
    Ok(SummarySequence {
        values: winners.iter().map(|&i| vol.values()[i]).collect(),
        source_modality: vol.modality(),
    })
}

/// How a value reached its token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    /// Inside the value band; id is the rounded scaled value.
    None,
    /// Scaled value `<= 0`: `|q| mod 500`, with 0 sent to 1.
    Negative,
    /// Scaled value `> 10^4`: `(q mod 500) + 500`.
    Overflow,
}

/// Token id of a single value.
pub fn quantize_value(v: f64) -> Result<(u32, Fold)> {
    if v.is_nan() {
        return Err(Error::NanInput { index: 0 });
    }
    if !v.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    // f64::round is half-away-from-zero.
    let q = (v * QUANT_SCALE).round();
    if q >= VALUE_MIN as f64 && q <= VALUE_MAX as f64 {
        Ok((q as u32, Fold::None))
    } else if q <= 0.0 {
        let r = (q.abs() % FOLD) as u32;
        Ok((r.max(VALUE_MIN), Fold::Negative))
    } else {
        Ok(((q % FOLD) as u32 + FOLD as u32, Fold::Overflow))
    }
}

/// Token ids and fold kinds for a list of values.
pub fn quantize_detailed<T: Float>(values: &[T]) -> Result<Vec<(u32, Fold)>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            quantize_value(v.f64()).map_err(|e| match e {
                Error::NanInput { .. } => Error::NanInput { index: i },
                Error::NonFinite { .. } => Error::NonFinite { index: i },
                e => e,
            })
        })
        .collect()
}

pub fn quantize(seq: &SummarySequence) -> Result<Vec<u32>> {
    Ok(quantize_detailed(&seq.values)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// `id / 10^3`. Only an inverse of [`quantize`] for ids that were not
/// folded.
pub fn dequantize(ids: &[u32]) -> Result<Vec<f32>> {
    ids.iter()
        .map(|&id| {
            if (VALUE_MIN..=VALUE_MAX).contains(&id) {
                Ok((id as f64 / QUANT_SCALE) as f32)
            } else {
                Err(Error::NotAValueToken(id))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        0..self.ids.len()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    pub fn segment_ids(&self) -> Vec<usize> {
        self.segments.iter().map(|&s| s as usize).collect()
    }

    /// One id per line.
    pub fn to_lines(&self) -> String {
        let mut s = String::with_capacity(self.ids.len() * 6);
        for id in &self.ids {
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }
}

/// Segment layout shared by every assembled sequence.
pub fn segment_layout() -> Vec<Segment> {
    let mut seg = Vec::with_capacity(SEQ_LEN);
    seg.push(Segment::Begin);
    seg.extend(std::iter::repeat_n(Segment::Mri, SUMMARY_LEN));
    seg.push(Segment::Sep);
    seg.extend(std::iter::repeat_n(Segment::Pet, SUMMARY_LEN));
    seg.push(Segment::End);
    seg
}

pub fn assemble(mri_ids: &[u32], pet_ids: &[u32]) -> Result<TokenSequence> {
    for ids in [mri_ids, pet_ids] {
        if ids.len() != SUMMARY_LEN {
            return Err(Error::LengthMismatch {
                expected: SUMMARY_LEN,
                actual: ids.len(),
            });
        }
    }
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(BEGIN);
    ids.extend_from_slice(mri_ids);
    ids.push(SEP);
    ids.extend_from_slice(pet_ids);
    ids.push(END);
    Ok(TokenSequence {
        ids,
        segments: segment_layout(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked_positions: Vec<usize>,
    pub original_ids: Vec<u32>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.masked_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }

    /// Puts the original ids back.
    pub fn restore(&self, seq: &TokenSequence) -> TokenSequence {
        let mut out = seq.clone();
        for (&p, &id) in self.masked_positions.iter().zip(&self.original_ids) {
            out.ids[p] = id;
        }
        out
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.masked_positions.binary_search(&pos).is_ok()
    }
}

/// Masks 26 MRI and 128 PET slots drawn uniformly without replacement.
pub fn plan_mask(seq: &TokenSequence, seed: u64) -> (TokenSequence, MaskPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = index::sample(&mut rng, SUMMARY_LEN, MRI_MASKED)
        .into_iter()
        .map(|i| MRI_OFFSET + i)
        .chain(
            index::sample(&mut rng, SUMMARY_LEN, PET_MASKED)
                .into_iter()
                .map(|i| PET_OFFSET + i),
        )
        .collect();
    positions.sort_unstable();
    let original_ids = positions.iter().map(|&p| seq.ids[p]).collect();
    let mut masked = seq.clone();
    for &p in &positions {
        masked.ids[p] = MASK;
    }
    (
        masked,
        MaskPlan {
            masked_positions: positions,
            original_ids,
        },
    )
}
