//! Optional volumetric CNN discriminator on the 4D PET itself: four strided
//! 3^3 convolutions with leaky ReLU, then a 1x1 conv to one logit per patch.
//! The patch logits are averaged into a single real-vs-generated score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnDConfig {
    /// Output channels of the strided layers.
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for CnnDConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32, 32],
            leaky_slope: 0.2,
            init_seed: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CnnDiscriminator<T> {
    pub config: CnnDConfig,
    pub params: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl<T: Float> CnnDiscriminator<T> {
    /// `frames` is the PET time dimension, used as input channels.
    pub fn new(config: CnnDConfig, frames: usize) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) || frames == 0 {
            return Err(Error::Config("cnn_d channels must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamStore::new();
        let mut cin = frames;
        let mut layers = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let std = (2.0 / (cin * 27) as f64).sqrt();
            layers.push((
                ps.add_normal(format!("cnn_d.conv{i}.weight"), &[c, cin, 3, 3, 3], std, &mut rng),
                ps.add(format!("cnn_d.conv{i}.bias"), Tensor::zeros(&[c])),
            ));
            cin = c;
        }
        let head = (
            ps.add_normal("cnn_d.head.weight", &[1, cin, 1, 1, 1], (1.0 / cin as f64).sqrt(), &mut rng),
            ps.add("cnn_d.head.bias", Tensor::zeros(&[1])),
        );
        Ok(Self {
            config,
            params: ps,
            layers,
            head,
        })
    }

    pub fn cast<U: Float>(&self) -> CnnDiscriminator<U> {
        CnnDiscriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            head: self.head,
        }
    }

    /// Mean patch logit (scalar) for a `[T, D, H, W]` volume.
    pub fn logit_var<'g>(&self, p: &Bound<'g, T>, pet: Var<'g, T>) -> Var<'g, T> {
        let mut x = pet;
        for &(w, b) in &self.layers {
            x = x.conv3d(p[w], p[b], 2, 1).leaky_relu(self.config.leaky_slope);
        }
        x.conv3d(p[self.head.0], p[self.head.1], 1, 0).mean()
    }
}
