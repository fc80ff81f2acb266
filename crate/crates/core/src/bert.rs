//! Bidirectional transformer discriminator with a real-vs-generated head
//! (read from position 0) and a masked-value head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SteSpec, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{MaskPlan, Segment, TokenSequence, SEQ_LEN, VOCAB_SIZE};

/// NSP class of a real PET sequence.
pub const CLASS_REAL: usize = 0;
/// NSP class of a generated PET sequence.
pub const CLASS_GENERATED: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BertConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub feedforward: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for BertConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 256,
            heads: 4,
            feedforward: 1024,
            vocab_size: VOCAB_SIZE,
            max_len: SEQ_LEN,
            init_std: 0.02,
            init_seed: 1,
        }
    }
}

impl BertConfig {
    /// 12 layers, 768 hidden, 12 heads.
    pub fn base() -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            feedforward: 3072,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.feedforward == 0 {
            return Err(Error::Config("bert sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_len < SEQ_LEN {
            return Err(Error::Config(format!("max_len must be >= {SEQ_LEN}")));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!("vocab_size must be >= {VOCAB_SIZE}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layout {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    nsp: (ParamId, ParamId),
    mlm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct DiscriminatorModel<T> {
    pub config: BertConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Float> DiscriminatorModel<T> {
    pub fn new(config: BertConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut ps = ParamStore::new();
        let (h, f, std) = (config.hidden, config.feedforward, config.init_std);
        let linear = |ps: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize| {
            (
                ps.add_normal(format!("{name}.weight"), &[din, dout], std, rng),
                ps.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
            )
        };
        let ln = |ps: &mut ParamStore<T>, name: &str| {
            (
                ps.add(format!("{name}.gamma"), Tensor::full(&[h], T::one())),
                ps.add(format!("{name}.beta"), Tensor::zeros(&[h])),
            )
        };
        let token = ps.add_normal("embed.token", &[config.vocab_size, h], std, &mut rng);
        let position = ps.add_normal("embed.position", &[config.max_len, h], std, &mut rng);
        let segment = ps.add_normal("embed.segment", &[Segment::COUNT, h], std, &mut rng);
        let emb_ln = ln(&mut ps, "embed.ln");
        let layers = (0..config.layers)
            .map(|i| LayerIds {
                qkv: linear(&mut ps, &mut rng, &format!("layer{i}.qkv"), h, 3 * h),
                out: linear(&mut ps, &mut rng, &format!("layer{i}.out"), h, h),
                ln1: ln(&mut ps, &format!("layer{i}.ln1")),
                ff1: linear(&mut ps, &mut rng, &format!("layer{i}.ff1"), h, f),
                ff2: linear(&mut ps, &mut rng, &format!("layer{i}.ff2"), f, h),
                ln2: ln(&mut ps, &format!("layer{i}.ln2")),
            })
            .collect();
        let nsp = linear(&mut ps, &mut rng, "head.nsp", h, 2);
        let mlm = linear(&mut ps, &mut rng, "head.mlm", h, config.vocab_size);
        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                token,
                position,
                segment,
                ln: emb_ln,
                layers,
                nsp,
                mlm,
            },
        })
    }

    pub fn cast<U: Float>(&self) -> DiscriminatorModel<U> {
        DiscriminatorModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::LengthMismatch {
                expected: self.config.max_len,
                actual: seq.len(),
            });
        }
        match seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Hidden states `[len, hidden]`. With `ste`, the token lookup also
    /// routes gradient into the given continuous values.
    pub fn encode_var<'g>(
        &self,
        p: &Bound<'g, T>,
        seq: &TokenSequence,
        ste: Option<(Var<'g, T>, SteSpec)>,
    ) -> Var<'g, T> {
        let l = &self.layout;
        let ids = seq.ids_usize();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = match ste {
            Some((values, spec)) => p[l.token].embedding_ste(&ids, values, spec),
            None => p[l.token].embedding(&ids),
        };
        let mut x = tok
            .add(p[l.position].embedding(&positions))
            .add(p[l.segment].embedding(&seq.segment_ids()))
            .layer_norm(p[l.ln.0], p[l.ln.1], 1e-12);
        for layer in &l.layers {
            let a = x
                .linear(p[layer.qkv.0], p[layer.qkv.1])
                .attention(self.config.heads)
                .linear(p[layer.out.0], p[layer.out.1]);
            x = x.add(a).layer_norm(p[layer.ln1.0], p[layer.ln1.1], 1e-12);
            let f = x
                .linear(p[layer.ff1.0], p[layer.ff1.1])
                .gelu()
                .linear(p[layer.ff2.0], p[layer.ff2.1]);
            x = x.add(f).layer_norm(p[layer.ln2.0], p[layer.ln2.1], 1e-12);
        }
        x
    }

    /// `[1, 2]` logits from the hidden state at position 0.
    pub fn nsp_logits_var<'g>(&self, p: &Bound<'g, T>, hidden: Var<'g, T>) -> Var<'g, T> {
        let (w, b) = self.layout.nsp;
        hidden.select_rows(&[0]).linear(p[w], p[b])
    }

    /// `[masked, vocab]` logits at the planned positions.
    pub fn mlm_logits_var<'g>(
        &self,
        p: &Bound<'g, T>,
        hidden: Var<'g, T>,
        plan: &MaskPlan,
    ) -> Result<Var<'g, T>> {
        if plan.is_empty() {
            return Err(Error::EmptyMask);
        }
        let (w, b) = self.layout.mlm;
        Ok(hidden.select_rows(&plan.masked_positions).linear(p[w], p[b]))
    }

    /// Inference-only hidden states.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        self.check_ids(seq)?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let h = self.encode_var(&p, seq, None).value();
        Ok((*h).clone())
    }

    pub fn nsp_logits(&self, hidden: &Tensor<T>) -> [T; 2] {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.nsp_logits_var(&p, g.constant(hidden.clone())).value();
        [out.data()[0], out.data()[1]]
    }

    pub fn mlm_logits(&self, hidden: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let out = self.mlm_logits_var(&p, g.constant(hidden.clone()), plan)?.value();
        Ok((*out).clone())
    }

    /// Probability that `seq` carries real PET.
    pub fn p_real(&self, seq: &TokenSequence) -> Result<f64> {
        let h = self.encode(seq)?;
        let [r, gen] = self.nsp_logits(&h).map(|v| v.f64());
        Ok(1.0 / (1.0 + (gen - r).exp()))
    }
}

/// Softmax of a logit row, in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
