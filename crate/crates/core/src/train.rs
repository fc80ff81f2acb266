//! Alternating adversarial training.
//!
//! Each step draws an effective batch of `micro_batch * accumulation_steps`
//! pairs, updates the discriminator(s) once, then the generator once, each
//! with its own Adam state. Gradients are accumulated over micro-batches with
//! every per-sample loss scaled by `1 / effective_batch`.
//!
//! Generator objective, per sample:
//!
//! ```text
//! l_nsp * CE(nsp(seq(G(x))), real)          adversarial
//! + l_mlm * CE(mlm(seq(G(x))), real ids)    through the straight-through lookup
//! + l_l1  * mean |G(x) - y|                 normalized PET space
//! [+ l_nsp * BCE(cnn_d(G(x)), 1)]           optional volumetric discriminator
//! ```
//!
//! All randomness (sample order, real/generated coins, mask plans) is a pure
//! function of `(seed, step, slot)`, so a resumed run needs only the step
//! counter, parameters and optimizer moments.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SteSpec, Var};
use crate::bert::{BertConfig, DiscriminatorModel, CLASS_GENERATED, CLASS_REAL};
use crate::checkpoint::Archive;
use crate::cnn_d::{CnnDConfig, CnnDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{ForwardOptions, GeneratorConfig, GeneratorModel};
use crate::metrics::{MetricsReport, PairMetrics};
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::params::{add_grads, Bound};
use crate::synth::mix_seed;
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{
    self, abs_max_argmax, assemble, plan_mask, Fold, MaskPlan, TokenSequence, PET_OFFSET,
    SEP_POS, SUMMARY_LEN, VALUE_MAX, VALUE_MIN,
};
use crate::volume::{normalize_mri, normalize_pet, restore_pet, Modality, NormalizationStats, PairSample, Volume};

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_COIN: u64 = 2;
const PURPOSE_MASK_D: u64 = 3;
const PURPOSE_MASK_G: u64 = 4;
const PURPOSE_MASK_EVAL: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_nsp: f64,
    pub lambda_mlm: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_nsp: 20.0,
            lambda_mlm: 1.0,
            lambda_l1: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_nsp", self.lambda_nsp),
            ("lambda_mlm", self.lambda_mlm),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of `(nsp, mlm, l1)` component losses.
    pub fn total(&self, nsp: f64, mlm: f64, l1: f64) -> f64 {
        self.lambda_nsp * nsp + self.lambda_mlm * mlm + self.lambda_l1 * l1
    }
}

/// Space in which the L1 term is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Space {
    Normalized,
    /// Original intensity units: the normalized error times `std / 10`.
    Restored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub use_cnn_d: bool,
    pub weights: LossWeights,
    pub l1_space: L1Space,
    /// Weight of the masked-value term in the discriminator's own loss.
    pub d_mlm_weight: f64,
    /// Backward slope of the value -> token-id step in the straight-through
    /// lookup. 1 treats the quantizer as the identity; the literal chain
    /// factor would be `QUANT_SCALE`.
    pub ste_scale: f64,
    /// Save a checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub divergence_factor: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            micro_batch: 2,
            accumulation_steps: 2,
            base_lr: 1e-4,
            warmup_fraction: 0.05,
            total_steps: 300,
            seed: 0,
            use_cnn_d: false,
            weights: LossWeights::default(),
            l1_space: L1Space::Normalized,
            d_mlm_weight: 1.0,
            ste_scale: 1.0,
            checkpoint_every: 0,
            divergence_factor: 1e3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::Config("micro_batch and accumulation_steps must be >= 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(self.ste_scale.is_finite() && self.ste_scale >= 0.0) {
            return Err(Error::Config("ste_scale must be finite and >= 0".into()));
        }
        if !(self.d_mlm_weight >= 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::Config("d_mlm_weight >= 0 and divergence_factor > 1 required".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.base_lr, self.warmup_fraction, self.total_steps)
    }
}

/// A pair in the form the trainer consumes.
#[derive(Clone, Debug)]
pub struct PreparedPair<T> {
    pub id: String,
    /// `[1, D, H, W]`, normalized.
    pub mri: Rc<Tensor<T>>,
    pub mri_summary: Vec<T>,
    pub mri_ids: Vec<u32>,
    /// `[T, D, H, W]`, normalized with the MRI statistics.
    pub pet: Tensor<T>,
    pub pet_ids: Vec<u32>,
    pub stats: NormalizationStats,
    /// Raw PET, for metrics.
    pub real_pet: Volume,
}

impl<T: Float> PreparedPair<T> {
    pub fn new(pair: &PairSample) -> Result<Self> {
        let (mri_n, stats) = normalize_mri(&pair.mri)?;
        let pet_n = normalize_pet(&pair.pet, &stats)?;
        let mri_summary = tokenizer::summarize(&mri_n)?;
        let pet_summary = tokenizer::summarize(&pet_n)?;
        let mut mri_dims = vec![1];
        mri_dims.extend_from_slice(mri_n.dims());
        Ok(Self {
            id: pair.id.clone(),
            mri: Rc::new(Tensor::from_f32(&mri_dims, mri_n.values())?),
            mri_summary: mri_summary.values.iter().map(|&v| T::of(v as f64)).collect(),
            mri_ids: tokenizer::quantize(&mri_summary)?,
            pet: Tensor::from_f32(pet_n.dims(), pet_n.values())?,
            pet_ids: tokenizer::quantize(&pet_summary)?,
            stats,
            real_pet: pair.pet.clone(),
        })
    }

    pub fn mri_volume(&self) -> Result<Volume> {
        Volume::new(Modality::Mri, self.mri.shape()[1..].to_vec(), self.mri.to_f32())
    }
}

pub fn prepare_all<T: Float>(pairs: &[PairSample]) -> Result<Vec<PreparedPair<T>>> {
    pairs.iter().map(PreparedPair::new).collect()
}

#[derive(Clone, Debug)]
pub struct Models<T> {
    pub generator: GeneratorModel<T>,
    pub discriminator: DiscriminatorModel<T>,
    pub cnn_d: Option<CnnDiscriminator<T>>,
}

impl<T: Float> Models<T> {
    pub fn new(
        generator: GeneratorConfig,
        bert: BertConfig,
        cnn_d: Option<CnnDConfig>,
    ) -> Result<Self> {
        let frames = generator.output_dims[0];
        Ok(Self {
            generator: GeneratorModel::new(generator)?,
            discriminator: DiscriminatorModel::new(bert)?,
            cnn_d: cnn_d.map(|c| CnnDiscriminator::new(c, frames)).transpose()?,
        })
    }

    pub fn cast<U: Float>(&self) -> Models<U> {
        Models {
            generator: self.generator.cast(),
            discriminator: self.discriminator.cast(),
            cnn_d: self.cnn_d.as_ref().map(|c| c.cast()),
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub g_total: f64,
    pub g_nsp: f64,
    pub g_mlm: f64,
    pub g_l1: f64,
    pub d_nsp: f64,
    pub d_mlm: f64,
}

pub const CSV_HEADER: &str = "step,lr,g_total,g_nsp,g_mlm,g_l1,d_nsp,d_mlm";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.g_total, self.g_nsp, self.g_mlm, self.g_l1, self.d_nsp, self.d_mlm
        )
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Mean per-sample generator loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenLoss {
    pub total: f64,
    pub nsp: f64,
    pub mlm: f64,
    pub l1: f64,
    pub cnn: f64,
}

/// Mean per-sample discriminator loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscLoss {
    pub nsp: f64,
    pub mlm: f64,
    pub cnn: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Number of completed steps.
    pub step: u64,
    pub models: Models<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub opt_c: Option<Adam<T>>,
    pub history: Vec<LossRecord>,
    pub initial_loss: Option<f64>,
}

impl<T: Float> TrainState<T> {
    pub fn new(models: Models<T>, adam: AdamConfig) -> Self {
        Self {
            step: 0,
            opt_g: Adam::new(adam, &models.generator.params),
            opt_d: Adam::new(adam, &models.discriminator.params),
            opt_c: models.cnn_d.as_ref().map(|c| Adam::new(adam, &c.params)),
            models,
            history: Vec::new(),
            initial_loss: None,
        }
    }

    /// Archive holding parameters, optimizer moments and the loss history;
    /// `run` is stored alongside for provenance and mismatch checks.
    pub fn to_archive(&self, run: serde_json::Value) -> Archive<T> {
        let meta = serde_json::json!({
            "kind": "train_state",
            "step": self.step,
            "adam_t": {
                "generator": self.opt_g.t,
                "discriminator": self.opt_d.t,
                "cnn_d": self.opt_c.as_ref().map(|o| o.t),
            },
            "initial_loss": self.initial_loss,
            "history": self.history,
            "run": run,
        });
        let mut a = Archive::new(meta);
        let m = &self.models;
        a.push_store("generator", &m.generator.params);
        a.push_store("discriminator", &m.discriminator.params);
        push_moments(&mut a, "adam.generator", &self.opt_g, m.generator.params.names());
        push_moments(&mut a, "adam.discriminator", &self.opt_d, m.discriminator.params.names());
        if let (Some(c), Some(o)) = (&m.cnn_d, &self.opt_c) {
            a.push_store("cnn_d", &c.params);
            push_moments(&mut a, "adam.cnn_d", o, c.params.names());
        }
        a
    }

    /// Restores into freshly built `models` (which fix the expected names
    /// and shapes).
    pub fn from_archive(a: &Archive<T>, mut models: Models<T>, adam: AdamConfig) -> Result<Self> {
        let kind = a.meta.get("kind").and_then(|k| k.as_str());
        if kind != Some("train_state") {
            return Err(Error::CheckpointMismatch("not a training-state checkpoint".into()));
        }
        a.load_store("generator", &mut models.generator.params)?;
        a.load_store("discriminator", &mut models.discriminator.params)?;
        let has_cnn = a.tensors.iter().any(|(n, _)| n.starts_with("cnn_d/"));
        if has_cnn != models.cnn_d.is_some() {
            return Err(Error::CheckpointMismatch("CNN discriminator presence differs".into()));
        }
        if let Some(c) = &mut models.cnn_d {
            a.load_store("cnn_d", &mut c.params)?;
        }
        let meta_u64 = |path: &[&str]| -> Result<u64> {
            let mut v = &a.meta;
            for p in path {
                v = &v[*p];
            }
            v.as_u64()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {}", path.join("."))))
        };
        let mut state = Self::new(models, adam);
        state.step = meta_u64(&["step"])?;
        state.opt_g.t = meta_u64(&["adam_t", "generator"])?;
        state.opt_d.t = meta_u64(&["adam_t", "discriminator"])?;
        load_moments(a, "adam.generator", &mut state.opt_g, state.models.generator.params.names())?;
        load_moments(a, "adam.discriminator", &mut state.opt_d, state.models.discriminator.params.names())?;
        if let (Some(c), Some(o)) = (&state.models.cnn_d, &mut state.opt_c) {
            o.t = meta_u64(&["adam_t", "cnn_d"])?;
            load_moments(a, "adam.cnn_d", o, c.params.names())?;
        }
        state.initial_loss = a.meta["initial_loss"].as_f64();
        state.history = serde_json::from_value(a.meta["history"].clone())?;
        if state.history.len() as u64 != state.step {
            return Err(Error::CheckpointMismatch("loss history length differs from step".into()));
        }
        Ok(state)
    }
}

fn push_moments<T: Float>(a: &mut Archive<T>, prefix: &str, opt: &Adam<T>, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        a.push(format!("{prefix}.m/{name}"), opt.m[i].clone());
        a.push(format!("{prefix}.v/{name}"), opt.v[i].clone());
    }
}

fn load_moments<T: Float>(a: &Archive<T>, prefix: &str, opt: &mut Adam<T>, names: &[String]) -> Result<()> {
    for (i, name) in names.iter().enumerate() {
        for (kind, buf) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let key = format!("{prefix}.{kind}/{name}");
            let t = a
                .get(&key)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {key}")))?;
            if t.shape() != buf.shape() {
                return Err(Error::CheckpointMismatch(format!("{key}: shape {:?}", t.shape())));
            }
            *buf = t.clone();
        }
    }
    Ok(())
}

/// Indices into a dataset of `n` pairs for the `batch` slots of `step`
/// (1-based). Each epoch is a fresh seeded permutation.
pub fn batch_indices(seed: u64, n: usize, step: u64, batch: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let c = (step - 1) * batch as u64 + j as u64;
            let epoch = c / n as u64;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, PURPOSE_SHUFFLE])));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[(c % n as u64) as usize]
        })
        .collect()
}

/// Whether the discriminator sees the real PET in batch slot `slot` of
/// `step`.
pub fn coin_is_real(seed: u64, step: u64, slot: usize) -> bool {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step, slot as u64, PURPOSE_COIN])).random_bool(0.5)
}

fn mask_seed(seed: u64, step: u64, slot: usize, purpose: u64) -> u64 {
    mix_seed(&[seed, step, slot as u64, purpose])
}

/// MLM targets: the real MRI ids at MRI slots, the real PET ids at PET
/// slots.
pub fn mlm_targets(plan: &MaskPlan, mri_ids: &[u32], real_pet_ids: &[u32]) -> Vec<usize> {
    plan.masked_positions
        .iter()
        .map(|&p| {
            if p < SEP_POS {
                mri_ids[p - 1] as usize
            } else {
                real_pet_ids[p - PET_OFFSET] as usize
            }
        })
        .collect()
}

/// Token ids and fold kinds of a generated `[T, D, H, W]` tensor.
pub fn generated_ids<T: Float>(pet: &Tensor<T>) -> Result<Vec<(u32, Fold)>> {
    let s = pet.shape();
    let winners = abs_max_argmax(pet.data(), [s[0], s[1], s[2], s[3]])?;
    let vals: Vec<T> = winners.iter().map(|&i| pet.data()[i]).collect();
    tokenizer::quantize_detailed(&vals)
}

/// Generator output for one pair without recording gradients.
pub fn generate<T: Float>(generator: &GeneratorModel<T>, pair: &PreparedPair<T>) -> Tensor<T> {
    let g = Graph::new();
    let p = generator.params.bind(&g, false);
    let x = g.constant_rc(pair.mri.clone());
    let out = generator.forward_var(&p, x, &pair.mri_summary, ForwardOptions::default()).value();
    (*out).clone()
}

/// Generated PET for `pair` in original intensity units.
pub fn generate_restored<T: Float>(generator: &GeneratorModel<T>, pair: &PreparedPair<T>) -> Result<Volume> {
    let out = generate(generator, pair);
    let norm = Volume::new(Modality::Pet, out.shape().to_vec(), out.to_f32())?;
    restore_pet(&norm, &pair.stats)
}

/// Per-pair and mean metrics of the generator on `pairs`.
pub fn evaluate<T: Float>(generator: &GeneratorModel<T>, pairs: &[PreparedPair<T>]) -> Result<MetricsReport> {
    let per = pairs
        .iter()
        .map(|p| PairMetrics::compute(p.id.clone(), &p.real_pet, &generate_restored(generator, p)?))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_pairs(per)
}

/// Mean normalized-space L1 of the generator on `pairs`.
pub fn mean_l1<T: Float>(generator: &GeneratorModel<T>, pairs: &[PreparedPair<T>]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let out = generate(generator, p);
            out.data()
                .iter()
                .zip(p.pet.data())
                .map(|(a, b)| (a.f64() - b.f64()).abs())
                .sum::<f64>()
                / out.len() as f64
        })
        .sum();
    total / pairs.len() as f64
}

struct SampleCtx<'a, T> {
    pair: &'a PreparedPair<T>,
    mask_seed: u64,
}

/// Generator loss of one sample inside graph `g`; the discriminators enter
/// as constants.
#[allow(clippy::too_many_arguments)]
fn generator_sample_loss<'g, T: Float>(
    g: &'g Graph<T>,
    models: &Models<T>,
    pg: &Bound<'g, T>,
    pd: Option<&Bound<'g, T>>,
    pc: Option<&Bound<'g, T>>,
    s: &SampleCtx<'_, T>,
    cfg: &TrainConfig,
) -> Result<(Var<'g, T>, GenLoss)> {
    let w = cfg.weights;
    let gen = models.generator.forward_var(
        pg,
        g.constant_rc(s.pair.mri.clone()),
        &s.pair.mri_summary,
        ForwardOptions::default(),
    );
    let l1_scale = match cfg.l1_space {
        L1Space::Normalized => 1.0,
        L1Space::Restored => s.pair.stats.pet_affine().1,
    };
    let l1 = gen.l1_loss(&s.pair.pet).scale(l1_scale);
    let mut parts = GenLoss {
        l1: l1.item().f64(),
        ..Default::default()
    };
    let mut total = l1.scale(w.lambda_l1);

    if let Some(pd) = pd {
        let summary = gen.summarize();
        let detailed = tokenizer::quantize_detailed(summary.value().data())?;
        let gen_ids: Vec<u32> = detailed.iter().map(|&(id, _)| id).collect();
        let seq = assemble(&s.pair.mri_ids, &gen_ids)?;
        let (masked, plan) = plan_mask(&seq, s.mask_seed);
        let active = detailed
            .iter()
            .enumerate()
            .map(|(j, &(_, fold))| fold == Fold::None && !plan.is_masked(PET_OFFSET + j))
            .collect();
        let spec = SteSpec {
            offset: PET_OFFSET,
            active,
            scale: cfg.ste_scale,
            band: (VALUE_MIN as usize, VALUE_MAX as usize),
        };
        let d = &models.discriminator;
        let hidden = d.encode_var(pd, &masked, Some((summary, spec)));
        let nsp = d.nsp_logits_var(pd, hidden).cross_entropy(&[CLASS_REAL]);
        let targets = mlm_targets(&plan, &s.pair.mri_ids, &s.pair.pet_ids);
        let mlm = d.mlm_logits_var(pd, hidden, &plan)?.cross_entropy(&targets);
        parts.nsp = nsp.item().f64();
        parts.mlm = mlm.item().f64();
        total = total.add(nsp.scale(w.lambda_nsp)).add(mlm.scale(w.lambda_mlm));
    }
    if let (Some(pc), Some(c)) = (pc, &models.cnn_d) {
        let adv = c.logit_var(pc, gen).bce_with_logits(1.0);
        parts.cnn = adv.item().f64();
        total = total.add(adv.scale(w.lambda_nsp));
    }
    parts.total = total.item().f64();
    Ok((total, parts))
}

fn check_finite(step: u64, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what}: {values:?}"),
        })
    }
}

fn uses_bert(w: &LossWeights) -> bool {
    w.lambda_nsp != 0.0 || w.lambda_mlm != 0.0
}

/// Accumulated generator gradients over `indices` in chunks of
/// `micro_batch`, each sample weighted `1 / indices.len()`. Skips the
/// transformer entirely when both of its weights are zero.
pub fn generator_gradients<T: Float>(
    models: &Models<T>,
    data: &[PreparedPair<T>],
    indices: &[usize],
    step: u64,
    cfg: &TrainConfig,
    micro_batch: usize,
) -> Result<(Vec<Tensor<T>>, GenLoss)> {
    let batch = indices.len() as f64;
    let mut acc: Option<Vec<Tensor<T>>> = None;
    let mut mean = GenLoss::default();
    for (chunk_no, chunk) in indices.chunks(micro_batch.max(1)).enumerate() {
        let g = Graph::new();
        let pg = models.generator.params.bind(&g, true);
        let pd = uses_bert(&cfg.weights).then(|| models.discriminator.params.bind(&g, false));
        let pc = models
            .cnn_d
            .as_ref()
            .filter(|_| cfg.use_cnn_d)
            .map(|c| c.params.bind(&g, false));
        let mut loss: Option<Var<'_, T>> = None;
        for (k, &idx) in chunk.iter().enumerate() {
            let slot = chunk_no * micro_batch + k;
            let ctx = SampleCtx {
                pair: &data[idx],
                mask_seed: mask_seed(cfg.seed, step, slot, PURPOSE_MASK_G),
            };
            let (l, parts) = generator_sample_loss(&g, models, &pg, pd.as_ref(), pc.as_ref(), &ctx, cfg)?;
            check_finite(step, "generator loss", &[parts.total, parts.nsp, parts.mlm, parts.l1, parts.cnn])?;
            mean.total += parts.total / batch;
            mean.nsp += parts.nsp / batch;
            mean.mlm += parts.mlm / batch;
            mean.l1 += parts.l1 / batch;
            mean.cnn += parts.cnn / batch;
            let l = l.scale(1.0 / batch);
            loss = Some(match loss {
                Some(acc) => acc.add(l),
                None => l,
            });
        }
        let Some(loss) = loss else { continue };
        let mut grads = g.backward(loss);
        let gs = pg.grads(&mut grads);
        match &mut acc {
            Some(a) => add_grads(a, &gs),
            None => acc = Some(gs),
        }
    }
    let acc = acc.ok_or(Error::NoData)?;
    Ok((acc, mean))
}

/// Accumulated gradients of the transformer (and, if present, the CNN)
/// discriminator. Each slot sees real or generated PET by a seeded coin;
/// the CNN discriminator sees both.
pub fn discriminator_gradients<T: Float>(
    models: &Models<T>,
    data: &[PreparedPair<T>],
    indices: &[usize],
    step: u64,
    cfg: &TrainConfig,
    micro_batch: usize,
) -> Result<(Vec<Tensor<T>>, Option<Vec<Tensor<T>>>, DiscLoss)> {
    let batch = indices.len() as f64;
    let use_cnn = cfg.use_cnn_d && models.cnn_d.is_some();
    let mut acc_d: Option<Vec<Tensor<T>>> = None;
    let mut acc_c: Option<Vec<Tensor<T>>> = None;
    let mut mean = DiscLoss::default();
    let d = &models.discriminator;
    for (chunk_no, chunk) in indices.chunks(micro_batch.max(1)).enumerate() {
        let g = Graph::new();
        let pd = d.params.bind(&g, true);
        let pc = models.cnn_d.as_ref().filter(|_| use_cnn).map(|c| c.params.bind(&g, true));
        let mut loss_d: Option<Var<'_, T>> = None;
        let mut loss_c: Option<Var<'_, T>> = None;
        for (k, &idx) in chunk.iter().enumerate() {
            let slot = chunk_no * micro_batch + k;
            let pair = &data[idx];
            let real = coin_is_real(cfg.seed, step, slot);
            let generated = (!real || use_cnn).then(|| generate(&models.generator, pair));
            let pet_ids = match (&generated, real) {
                (Some(gen), false) => generated_ids(gen)?.into_iter().map(|(id, _)| id).collect(),
                _ => pair.pet_ids.clone(),
            };
            let seq = assemble(&pair.mri_ids, &pet_ids)?;
            let (masked, plan) = plan_mask(&seq, mask_seed(cfg.seed, step, slot, PURPOSE_MASK_D));
            let hidden = d.encode_var(&pd, &masked, None);
            let label = if real { CLASS_REAL } else { CLASS_GENERATED };
            let nsp = d.nsp_logits_var(&pd, hidden).cross_entropy(&[label]);
            let mut l = nsp;
            let mut mlm_v = 0.0;
            if cfg.d_mlm_weight != 0.0 {
                let targets = mlm_targets(&plan, &pair.mri_ids, &pair.pet_ids);
                let mlm = d.mlm_logits_var(&pd, hidden, &plan)?.cross_entropy(&targets);
                mlm_v = mlm.item().f64();
                l = l.add(mlm.scale(cfg.d_mlm_weight));
            }
            let nsp_v = nsp.item().f64();
            check_finite(step, "discriminator loss", &[nsp_v, mlm_v])?;
            mean.nsp += nsp_v / batch;
            mean.mlm += mlm_v / batch;
            let l = l.scale(1.0 / batch);
            loss_d = Some(match loss_d {
                Some(a) => a.add(l),
                None => l,
            });
            if let (Some(pc), Some(c), Some(gen)) = (&pc, &models.cnn_d, generated) {
                let real_logit = c.logit_var(pc, g.constant(pair.pet.clone()));
                let fake_logit = c.logit_var(pc, g.constant(gen));
                let lc = real_logit.bce_with_logits(1.0).add(fake_logit.bce_with_logits(0.0));
                let v = lc.item().f64();
                check_finite(step, "cnn discriminator loss", &[v])?;
                mean.cnn += v / batch;
                let lc = lc.scale(1.0 / batch);
                loss_c = Some(match loss_c {
                    Some(a) => a.add(lc),
                    None => lc,
                });
            }
        }
        let Some(loss_d) = loss_d else { continue };
        let total = match loss_c {
            Some(lc) => loss_d.add(lc),
            None => loss_d,
        };
        let mut grads = g.backward(total);
        let gd = pd.grads(&mut grads);
        match &mut acc_d {
            Some(a) => add_grads(a, &gd),
            None => acc_d = Some(gd),
        }
        if let Some(pc) = &pc {
            let gc = pc.grads(&mut grads);
            match &mut acc_c {
                Some(a) => add_grads(a, &gc),
                None => acc_c = Some(gc),
            }
        }
    }
    Ok((acc_d.ok_or(Error::NoData)?, acc_c, mean))
}

/// One discriminator update at `step` (1-based); the generator is untouched.
pub fn discriminator_update<T: Float>(
    state: &mut TrainState<T>,
    data: &[PreparedPair<T>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<DiscLoss> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let indices = batch_indices(cfg.seed, data.len(), step, cfg.effective_batch());
    let (gd, gc, loss) = discriminator_gradients(&state.models, data, &indices, step, cfg, cfg.micro_batch)?;
    let lr = cfg.lr(step);
    state.opt_d.step(&mut state.models.discriminator.params, &gd, lr);
    if let (Some(gc), Some(c), Some(o)) = (gc, &mut state.models.cnn_d, &mut state.opt_c) {
        o.step(&mut c.params, &gc, lr);
    }
    Ok(loss)
}

/// One generator update at `step`; the discriminators are untouched.
pub fn generator_update<T: Float>(
    state: &mut TrainState<T>,
    data: &[PreparedPair<T>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<GenLoss> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    let indices = batch_indices(cfg.seed, data.len(), step, cfg.effective_batch());
    let (gg, loss) = generator_gradients(&state.models, data, &indices, step, cfg, cfg.micro_batch)?;
    state.opt_g.step(&mut state.models.generator.params, &gg, cfg.lr(step));
    Ok(loss)
}

/// A full step: discriminator update, then generator update.
pub fn train_step<T: Float>(
    state: &mut TrainState<T>,
    data: &[PreparedPair<T>],
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let step = state.step + 1;
    let d = discriminator_update(state, data, cfg, step)?;
    let g = generator_update(state, data, cfg, step)?;
    let initial = *state.initial_loss.get_or_insert(g.total);
    if initial > 0.0 && g.total > cfg.divergence_factor * initial {
        return Err(Error::Diverged {
            step,
            loss: g.total,
            initial,
        });
    }
    let rec = LossRecord {
        step,
        lr: cfg.lr(step),
        g_total: g.total,
        g_nsp: g.nsp,
        g_mlm: g.mlm,
        g_l1: g.l1,
        d_nsp: d.nsp,
        d_mlm: d.mlm,
    };
    state.step = step;
    state.history.push(rec.clone());
    Ok(rec)
}

/// Token sequence of `pair` with either its real PET or `generated`.
pub fn pair_sequence<T: Float>(pair: &PreparedPair<T>, generated: Option<&Tensor<T>>) -> Result<TokenSequence> {
    match generated {
        Some(g) => {
            let ids: Vec<u32> = generated_ids(g)?.into_iter().map(|(id, _)| id).collect();
            assemble(&pair.mri_ids, &ids)
        }
        None => assemble(&pair.mri_ids, &pair.pet_ids),
    }
}

/// Fraction of real and generated sequences (one each per pair, masked as
/// in training) that the NSP head classifies correctly.
pub fn nsp_accuracy<T: Float>(models: &Models<T>, pairs: &[PreparedPair<T>], seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::NoData);
    }
    let mut correct = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let gen = generate(&models.generator, pair);
        for (label, seq) in [
            (CLASS_REAL, pair_sequence(pair, None)?),
            (CLASS_GENERATED, pair_sequence(pair, Some(&gen))?),
        ] {
            let (masked, _) = plan_mask(&seq, mask_seed(seed, label as u64, i, PURPOSE_MASK_EVAL));
            let h = models.discriminator.encode(&masked)?;
            let [r, g] = models.discriminator.nsp_logits(&h);
            let pred = if r >= g { CLASS_REAL } else { CLASS_GENERATED };
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / (2 * pairs.len()) as f64)
}

/// Checks that the generator and data agree on shapes.
pub fn check_data<T: Float>(models: &Models<T>, data: &[PreparedPair<T>]) -> Result<()> {
    let gc = &models.generator.config;
    for p in data {
        if p.mri.shape()[1..] != gc.input_dims || p.pet.shape() != gc.output_dims {
            return Err(Error::ShapeMismatch {
                expected: gc.input_dims.iter().chain(&gc.output_dims).copied().collect(),
                actual: p.mri.shape()[1..].iter().chain(p.pet.shape()).copied().collect(),
            });
        }
        debug_assert_eq!(p.mri_summary.len(), SUMMARY_LEN);
    }
    Ok(())
}
