//! Volumetric encoder-decoder generator.
//!
//! ```text
//! MRI [1, S, S, S]
//!   encoder: L levels, each a stride-2 conv + conv  (S/2 ... 8)
//!   bottleneck: 1x1 conv to one channel at 8^3 = 512 values
//!   fusion: (bottleneck + summarize(MRI)) / 2
//!   decoder: upsample + conv, concat skip, conv     (16 ... G)
//!   head: 1x1 conv to T channels, trilinear resize to the PET grid,
//!         tanhshrink
//! ```
//!
//! `S` must be `8 * 2^L`; the decoder grid `G` is the smallest power of two
//! covering the largest output dim.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{self, GRID, SUMMARY_LEN};
use crate::volume::{Modality, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanhshrink,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub input_dims: [usize; 3],
    /// `[T, D, H, W]`
    pub output_dims: [usize; 4],
    pub base_channels: usize,
    /// Side of the decoder's cubic output grid before the final resize;
    /// 0 picks the smallest power of two covering the output.
    pub decoder_grid: usize,
    /// Channel cap, as a multiple of `base_channels`.
    pub max_channel_mult: usize,
    pub output_activation: OutputActivation,
    pub norm: NormKind,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_dims: [64, 64, 64],
            output_dims: [2, 24, 19, 19],
            base_channels: 8,
            decoder_grid: 0,
            max_channel_mult: 4,
            output_activation: OutputActivation::Tanhshrink,
            norm: NormKind::Instance,
            leaky_slope: 0.2,
            init_seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Full-resolution shapes: 256^3 MRI to 2 x 93 x 76 x 76 PET.
    pub fn full_scale() -> Self {
        Self {
            input_dims: [256, 256, 256],
            output_dims: [2, 93, 76, 76],
            ..Self::default()
        }
    }

    /// Number of stride-2 encoder levels (input side / 8 = 2^depth).
    pub fn depth(&self) -> Result<usize> {
        let s = self.input_dims[0];
        let bad = |reason: &str| Error::InvalidDims {
            dims: self.input_dims.to_vec(),
            reason: reason.into(),
        };
        if self.input_dims.iter().any(|&d| d != s) {
            return Err(bad("input must be cubic"));
        }
        if s < 2 * GRID || s % GRID != 0 || !(s / GRID).is_power_of_two() {
            return Err(bad("input side must be 8 * 2^L with L >= 1"));
        }
        Ok((s / GRID).trailing_zeros() as usize)
    }

    /// Side of the decoder's cubic output grid.
    pub fn decoder_grid(&self) -> usize {
        if self.decoder_grid != 0 {
            return self.decoder_grid;
        }
        self.output_dims[1..]
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
            .next_power_of_two()
            .max(2 * GRID)
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth()?;
        if self.output_dims.iter().any(|&d| d == 0) || self.output_dims[1..].iter().any(|&d| d < GRID) {
            return Err(Error::InvalidDims {
                dims: self.output_dims.to_vec(),
                reason: "output spatial dims must be >= 8".into(),
            });
        }
        let grid = self.decoder_grid();
        if grid < 2 * GRID || !grid.is_power_of_two() {
            return Err(Error::Config(format!("decoder grid {grid} must be a power of two >= 16")));
        }
        if grid > self.input_dims[0] / 2 {
            return Err(Error::InvalidDims {
                dims: self.output_dims.to_vec(),
                reason: format!(
                    "decoder grid {} exceeds the finest encoder level {}",
                    self.decoder_grid(),
                    self.input_dims[0] / 2
                ),
            });
        }
        if self.base_channels == 0 || self.max_channel_mult == 0 || depth == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level).min(self.max_channel_mult)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    /// `(downsampling conv, refining conv)` per level, finest first.
    encoder: Vec<(ConvBlock, ConvBlock)>,
    bottleneck: ConvBlock,
    decoder_in: ConvBlock,
    /// `(post-upsample conv, post-concat conv, skip level)`, coarsest first.
    decoder: Vec<(ConvBlock, ConvBlock, usize)>,
    head: ConvBlock,
}

/// Test hook for connectivity checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub zero_skips: bool,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<T> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

fn conv_block<T: Float>(
    ps: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    norm: bool,
    gain: f64,
) -> ConvBlock {
    let fan_in = (cin * k * k * k) as f64;
    let w = ps.add_normal(format!("{name}.weight"), &[cout, cin, k, k, k], gain / fan_in.sqrt(), rng);
    let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    let norm = norm.then(|| {
        (
            ps.add(format!("{name}.norm.gamma"), Tensor::full(&[cout], T::one())),
            ps.add(format!("{name}.norm.beta"), Tensor::zeros(&[cout])),
        )
    });
    ConvBlock {
        w,
        b,
        norm,
        stride,
        pad: k / 2,
    }
}

impl<T: Float> GeneratorModel<T> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let depth = config.depth()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamStore::new();
        let norm = config.norm == NormKind::Instance;
        let he = 2f64.sqrt();
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = 1;
        for level in 0..depth {
            let c = config.channels(level);
            let down = conv_block(&mut ps, &mut rng, &format!("enc{level}.down"), cin, c, 3, 2, norm, he);
            let conv = conv_block(&mut ps, &mut rng, &format!("enc{level}.conv"), c, c, 3, 1, norm, he);
            encoder.push((down, conv));
            cin = c;
        }
        let bottleneck = conv_block(&mut ps, &mut rng, "bottleneck", cin, 1, 1, 1, false, 1.0);
        let deepest = config.channels(depth - 1);
        let decoder_in = conv_block(&mut ps, &mut rng, "dec.in", 1, deepest, 3, 1, norm, he);
        let mut decoder = Vec::new();
        let mut side = GRID;
        let mut c_prev = deepest;
        let grid = config.decoder_grid();
        while side < grid {
            side *= 2;
            // encoder level whose output side is `side`
            let skip = depth - 1 - (side / GRID).trailing_zeros() as usize;
            let c = config.channels(skip);
            let i = decoder.len();
            let up = conv_block(&mut ps, &mut rng, &format!("dec{i}.up"), c_prev, c, 3, 1, norm, he);
            let merge = conv_block(&mut ps, &mut rng, &format!("dec{i}.merge"), 2 * c, c, 3, 1, norm, he);
            decoder.push((up, merge, skip));
            c_prev = c;
        }
        let head = conv_block(&mut ps, &mut rng, "head", c_prev, config.output_dims[0], 1, 1, false, 1.0);
        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                encoder,
                bottleneck,
                decoder_in,
                decoder,
                head,
            },
        })
    }

    pub fn cast<U: Float>(&self) -> GeneratorModel<U> {
        GeneratorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn block<'g>(&self, p: &Bound<'g, T>, blk: &ConvBlock, x: Var<'g, T>, act: bool) -> Var<'g, T> {
        let mut y = x.conv3d(p[blk.w], p[blk.b], blk.stride, blk.pad);
        if let Some((g, b)) = blk.norm {
            y = y.instance_norm(p[g], p[b], 1e-5);
        }
        if act {
            y = y.leaky_relu(self.config.leaky_slope);
        }
        y
    }

    /// Forward pass on a normalized `[1, S, S, S]` MRI tensor whose
    /// abs-max summary is `mri_summary`. Returns `[T, D, H, W]`.
    pub fn forward_var<'g>(
        &self,
        p: &Bound<'g, T>,
        mri: Var<'g, T>,
        mri_summary: &[T],
        opts: ForwardOptions,
    ) -> Var<'g, T> {
        let g = mri.graph();
        let l = &self.layout;
        let mut skips = Vec::with_capacity(l.encoder.len());
        let mut x = mri;
        for (down, conv) in &l.encoder {
            x = self.block(p, down, x, true);
            x = self.block(p, conv, x, true);
            skips.push(x);
        }
        let b = self.block(p, &l.bottleneck, x, false).reshape(&[SUMMARY_LEN]);
        let fused = bottleneck_fusion_var(b, g.constant(Tensor::from_vec(&[SUMMARY_LEN], mri_summary.to_vec()).unwrap()));
        let mut y = self.block(p, &l.decoder_in, fused.reshape(&[1, GRID, GRID, GRID]), true);
        for (up, merge, skip) in &l.decoder {
            y = self.block(p, up, y.upsample2(), true);
            let mut s = skips[*skip];
            if opts.zero_skips {
                s = g.constant(Tensor::zeros(&s.shape()));
            }
            y = self.block(p, merge, Var::concat0(&[y, s]), true);
        }
        let [_, d, h, w] = self.config.output_dims;
        let y = self.block(p, &l.head, y, false).resize_trilinear([d, h, w]);
        match self.config.output_activation {
            OutputActivation::Tanhshrink => y.tanhshrink(),
            OutputActivation::Tanh => y.tanh(),
        }
    }

    pub fn check_input(&self, mri: &Volume) -> Result<()> {
        if mri.modality() != Modality::Mri {
            return Err(Error::WrongModality {
                expected: Modality::Mri,
                actual: mri.modality(),
            });
        }
        if mri.dims() != self.config.input_dims {
            return Err(Error::ShapeMismatch {
                expected: self.config.input_dims.to_vec(),
                actual: mri.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Inference on a normalized MRI volume.
    pub fn forward(&self, mri: &Volume) -> Result<Volume> {
        self.forward_with(mri, ForwardOptions::default())
    }

    pub fn forward_with(&self, mri: &Volume, opts: ForwardOptions) -> Result<Volume> {
        self.check_input(mri)?;
        let summary: Vec<T> = tokenizer::summarize(mri)?
            .values
            .iter()
            .map(|&v| T::of(v as f64))
            .collect();
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let [d, h, w] = self.config.input_dims;
        let x = g.constant(Tensor::from_f32(&[1, d, h, w], mri.values())?);
        let out = self.forward_var(&p, x, &summary, opts).value();
        Volume::new(Modality::Pet, self.config.output_dims.to_vec(), out.to_f32())
    }
}

/// `(bottleneck + summary) / 2`, elementwise.
pub fn bottleneck_fusion(bottleneck: &[f32], summary: &[f32]) -> Result<Vec<f32>> {
    if bottleneck.len() != SUMMARY_LEN || summary.len() != SUMMARY_LEN {
        return Err(Error::LengthMismatch {
            expected: SUMMARY_LEN,
            actual: if bottleneck.len() != SUMMARY_LEN {
                bottleneck.len()
            } else {
                summary.len()
            },
        });
    }
    Ok(bottleneck
        .iter()
        .zip(summary)
        .map(|(b, s)| (b + s) / 2.0)
        .collect())
}

fn bottleneck_fusion_var<'g, T: Float>(b: Var<'g, T>, s: Var<'g, T>) -> Var<'g, T> {
    b.add(s).scale(0.5)
}

/// `x - tanh(x)`.
pub fn tanhshrink(x: f64) -> f64 {
    x - x.tanh()
}

/// `d/dx tanhshrink(x) = 1 - sech^2(x) = tanh^2(x)`.
pub fn tanhshrink_derivative(x: f64) -> f64 {
    let t = x.tanh();
    t * t
}
