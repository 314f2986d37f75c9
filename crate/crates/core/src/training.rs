//! Adversarial training: augmentation, the two objectives with their
//! gradients, Adam updates and the seeded epoch schedule.
//!
//! Every random draw is keyed by `(seed, stream, epoch, sample)` through
//! [`derive_seed`], so a run resumed from an epoch boundary replays exactly
//! the batches and augmentations of an uninterrupted run.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::dataset::PairedSample;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::generator::{FusionMode, Generator, GeneratorConfig, GeneratorTrace};
use crate::losses::{
    adv_loss_d, adv_loss_g, bce_logit_grad, cls_loss, l1_grad, l1_loss, log_prob_logit_grad, total_d, total_g,
    LossReport, LossWeights,
};
use crate::nn::{Adam, Params, Scalar};
use crate::schema::AttributeSchema;
use crate::seed::derive_seed;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub depth: usize,
    pub base_filters: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub fusion: FusionMode,
    pub disc_blocks: usize,
    pub disc_base_filters: usize,
    pub disc_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            depth: 5,
            base_filters: 32,
            hidden_dim: 256,
            embedding_dim: 16,
            fusion: FusionMode::Bottleneck,
            disc_blocks: 4,
            disc_base_filters: 32,
            disc_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn generator(&self, schema: &AttributeSchema) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            channels: 3,
            depth: self.depth,
            base_filters: self.base_filters,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            attribute_blocks: schema.block_sizes(),
            fusion: self.fusion,
            leaky_slope: 0.2,
        }
    }

    pub fn discriminator(&self, schema: &AttributeSchema) -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: self.image_size,
            channels: 3,
            blocks: self.disc_blocks,
            base_filters: self.disc_base_filters,
            hidden: self.disc_hidden,
            slots: schema.slot_count(),
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
    pub max_rotation_deg: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip: true, rotate: true, max_rotation_deg: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Overrides `learning_rate` for the generator.
    pub learning_rate_g: Option<f64>,
    /// Overrides `learning_rate` for the discriminator.
    pub learning_rate_d: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u64,
    /// Probability of hiding each attribute type from the generator for one
    /// sample (classification targets keep the full labels).
    pub attr_dropout: f64,
    /// Train the attribute head on generated rather than real portraits.
    pub classify_fakes_in_d: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 2e-4,
            learning_rate_g: None,
            learning_rate_d: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            augment: AugmentConfig::default(),
            checkpoint_every: 10,
            attr_dropout: 0.0,
            classify_fakes_in_d: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 600 epochs of batch 32.
    pub fn full() -> Self {
        Self { epochs: 600, batch_size: 32, checkpoint_every: 50, ..Self::default() }
    }

    /// Small networks and short schedule for the 64×64 toy dataset.
    pub fn toy() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 5e-4,
            checkpoint_every: 5,
            model: ModelConfig { base_filters: 8, hidden_dim: 64, disc_base_filters: 8, ..ModelConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        for (name, lr) in [
            ("learning_rate", Some(self.learning_rate)),
            ("learning_rate_g", self.learning_rate_g),
            ("learning_rate_d", self.learning_rate_d),
        ] {
            if let Some(lr) = lr {
                if !lr.is_finite() || lr < 0.0 {
                    return bad(format!("{name} must be finite and ≥ 0"));
                }
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.attr_dropout) {
            return bad("attr_dropout must lie in [0, 1]".into());
        }
        if !(self.augment.max_rotation_deg >= 0.0 && self.augment.max_rotation_deg < 90.0) {
            return bad("max_rotation_deg must lie in [0, 90)".into());
        }
        self.weights.validate()
    }

    pub fn lr_g(&self) -> f64 {
        self.learning_rate_g.unwrap_or(self.learning_rate)
    }

    pub fn lr_d(&self) -> f64 {
        self.learning_rate_d.unwrap_or(self.learning_rate)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Geometric transform shared by a photo and its portrait.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub angle_deg: f32,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { flip: false, angle_deg: 0.0 };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip && rng.gen_bool(0.5);
        let angle_deg = if cfg.rotate && cfg.max_rotation_deg > 0.0 {
            rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        Self { flip, angle_deg }
    }

    /// Applies the flip, then a rotation about the centre with bilinear
    /// sampling and edge padding.
    pub fn apply(&self, img: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = img.dim();
        let mut out = if self.flip { flip_horizontal(img) } else { img.clone() };
        if self.angle_deg != 0.0 {
            let src = out;
            let (sin, cos) = self.angle_deg.to_radians().sin_cos();
            let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
            out = Array3::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                    let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f32);
                    let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f32);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                    for ch in 0..c {
                        let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
                        let bottom = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
                        out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
                    }
                }
            }
        }
        out
    }
}

pub fn flip_horizontal(img: &Array3<f32>) -> Array3<f32> {
    img.slice(ndarray::s![.., .., ..;-1]).to_owned()
}

/// Maps `[0, 1]` to `[-1, 1]`.
pub fn normalize(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| 2.0 * v - 1.0)
}

/// Maps `[-1, 1]` back to `[0, 1]`.
pub fn denormalize(img: &Array3<f32>) -> Array3<f32> {
    img.mapv(|v| (v + 1.0) / 2.0)
}

/// Random flip and rotation followed by normalization.
pub fn augment(img: &Array3<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Array3<f32> {
    normalize(&Augmentation::sample(cfg, rng).apply(img))
}

/// One training sample in network units.
#[derive(Debug, Clone)]
pub struct Example<F> {
    pub photo: Array3<F>,
    pub portrait: Array3<F>,
    /// Attribute values shown to the generator.
    pub selection: Vec<Option<usize>>,
    /// Full one-hot labels used as classification targets.
    pub target: Array1<F>,
}

impl Example<f32> {
    /// Unaugmented example with every labelled attribute visible.
    pub fn plain(sample: &PairedSample, schema: &AttributeSchema) -> Result<Self> {
        Ok(Self {
            photo: normalize(&sample.photo),
            portrait: normalize(&sample.portrait),
            selection: schema.resolve(&sample.attrs)?,
            target: Array1::from_iter(schema.encode_onehot(&sample.attrs)?.0.iter().map(|&v| v as f32)),
        })
    }

    /// The example for `sample` (dataset position `index`) in `epoch`.
    pub fn prepare(
        sample: &PairedSample,
        index: usize,
        epoch: u64,
        config: &TrainConfig,
        schema: &AttributeSchema,
    ) -> Result<Self> {
        let mut ex = Self::plain(sample, schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_AUGMENT, epoch, index as u64]));
        let aug = Augmentation::sample(&config.augment, &mut rng);
        ex.photo = normalize(&aug.apply(&sample.photo));
        ex.portrait = normalize(&aug.apply(&sample.portrait));
        if config.attr_dropout > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_DROPOUT, epoch, index as u64]));
            for sel in ex.selection.iter_mut() {
                if rng.gen_bool(config.attr_dropout) {
                    *sel = None;
                }
            }
        }
        Ok(ex)
    }

    pub fn cast<F: Scalar>(&self) -> Example<F> {
        let c = |v: &f32| F::of(*v as f64);
        Example {
            photo: self.photo.map(c),
            portrait: self.portrait.map(c),
            selection: self.selection.clone(),
            target: self.target.map(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorTerms<F> {
    pub adv: F,
    pub cls: F,
    pub total: F,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorTerms<F> {
    pub adv: F,
    pub cls: F,
    pub l1: F,
    pub total: F,
}

/// Discriminator objective on fresh fakes (no gradient reaches `g`) and its
/// gradient with respect to every discriminator parameter.
pub fn discriminator_objective<F: Scalar>(
    g: &Generator<F>,
    d: &Discriminator<F>,
    batch: &[Example<F>],
    weights: &LossWeights,
    classify_fakes: bool,
) -> Result<(DiscriminatorTerms<F>, Discriminator<F>)> {
    discriminator_objective_on(d, batch, &generate_batch(g, batch)?, weights, classify_fakes)
}

type Fakes<F> = Vec<(Array3<F>, GeneratorTrace<F>)>;

fn generate_batch<F: Scalar>(g: &Generator<F>, batch: &[Example<F>]) -> Result<Fakes<F>> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    batch.iter().map(|ex| g.forward(&ex.photo, &ex.selection)).collect()
}

fn discriminator_objective_on<F: Scalar>(
    d: &Discriminator<F>,
    batch: &[Example<F>],
    fakes: &Fakes<F>,
    weights: &LossWeights,
    classify_fakes: bool,
) -> Result<(DiscriminatorTerms<F>, Discriminator<F>)> {
    let inv_b = F::one() / F::of(batch.len() as f64);
    let lambda3 = F::of(weights.lambda3);
    let mut grad = d.zeros_like();
    let (mut p_fake, mut p_real) = (Vec::new(), Vec::new());
    let (mut probs, mut targets) = (Vec::new(), Vec::new());
    for (ex, (fake, _)) in batch.iter().zip(fakes) {
        let (out_f, trace_f) = d.forward(fake)?;
        let (out_r, trace_r) = d.forward(&ex.portrait)?;
        let (pf, pr) = (out_f.realness(), out_r.realness());
        let classified = if classify_fakes { &out_f } else { &out_r };
        let v_hat = classified.attribute_probs();
        let d_attr = ndarray::Zip::from(&v_hat)
            .and(&ex.target)
            .map_collect(|&p, &t| lambda3 * inv_b * bce_logit_grad(p, t));
        let zeros = Array1::zeros(v_hat.len());
        let (attr_f, attr_r) = if classify_fakes { (&d_attr, &zeros) } else { (&zeros, &d_attr) };
        d.backward(&trace_f, inv_b * log_prob_logit_grad(pf), attr_f, &mut grad);
        d.backward(&trace_r, -inv_b * log_prob_logit_grad(pr), attr_r, &mut grad);
        p_fake.push(pf);
        p_real.push(pr);
        probs.push(v_hat);
        targets.push(ex.target.clone());
    }
    let adv = adv_loss_d(&p_fake, &p_real)?;
    let cls = cls_loss(&probs, &targets)?;
    Ok((DiscriminatorTerms { adv, cls, total: total_d(adv, cls, weights) }, grad))
}

/// Generator objective against a fixed discriminator and its gradient with
/// respect to every generator parameter, embeddings included.
pub fn generator_objective<F: Scalar>(
    g: &Generator<F>,
    d: &Discriminator<F>,
    batch: &[Example<F>],
    weights: &LossWeights,
) -> Result<(GeneratorTerms<F>, Generator<F>)> {
    generator_objective_on(g, d, batch, &generate_batch(g, batch)?, weights)
}

fn generator_objective_on<F: Scalar>(
    g: &Generator<F>,
    d: &Discriminator<F>,
    batch: &[Example<F>],
    fakes: &Fakes<F>,
    weights: &LossWeights,
) -> Result<(GeneratorTerms<F>, Generator<F>)> {
    let inv_b = F::one() / F::of(batch.len() as f64);
    let (lambda1, lambda2) = (F::of(weights.lambda1), F::of(weights.lambda2));
    let mut grad = g.zeros_like();
    let mut scratch = d.zeros_like();
    let (mut p_fake, mut probs, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    let mut l1 = F::zero();
    for (ex, (fake, g_trace)) in batch.iter().zip(fakes) {
        let (out, d_trace) = d.forward(fake)?;
        let p = out.realness();
        let v_hat = out.attribute_probs();
        let d_attr = ndarray::Zip::from(&v_hat)
            .and(&ex.target)
            .map_collect(|&q, &t| lambda1 * inv_b * bce_logit_grad(q, t));
        let mut dx = d.backward(&d_trace, -inv_b * log_prob_logit_grad(p), &d_attr, &mut scratch);
        dx.scaled_add(lambda2 * inv_b, &l1_grad(&ex.portrait, fake));
        g.backward(g_trace, &dx, &mut grad);
        l1 += l1_loss(&ex.portrait, fake)?;
        p_fake.push(p);
        probs.push(v_hat);
        targets.push(ex.target.clone());
    }
    let adv = adv_loss_g(&p_fake)?;
    let cls = cls_loss(&probs, &targets)?;
    let l1 = l1 * inv_b;
    Ok((GeneratorTerms { adv, cls, l1, total: total_g(adv, cls, l1, weights) }, grad))
}

/// Networks, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
}

impl ModelState {
    /// Fresh networks seeded from `config.seed`; generator embeddings are
    /// copied from `table` when given.
    pub fn init(config: &TrainConfig, schema: &AttributeSchema, table: Option<&EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let g_cfg = config.model.generator(schema);
        let g_seed = derive_seed(config.seed, &[STREAM_INIT, 0]);
        let generator = match table {
            Some(t) => Generator::with_embeddings(g_cfg, g_seed, t, schema)?,
            None => Generator::new(g_cfg, g_seed)?,
        };
        let discriminator = Discriminator::new(config.model.discriminator(schema), derive_seed(config.seed, &[STREAM_INIT, 1]))?;
        Ok(Self {
            opt_g: Adam::new(&generator, config.lr_g(), config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(&discriminator, config.lr_d(), config.adam_beta1, config.adam_beta2),
            generator,
            discriminator,
            epoch: 0,
            step: 0,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.generator.all_finite() && self.discriminator.all_finite()
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut ModelState, batch: &[Example<f32>], config: &TrainConfig) -> Result<LossReport> {
    let w = &config.weights;
    // the generator is unchanged by the discriminator update, so both
    // objectives share one set of fakes
    let fakes = generate_batch(&state.generator, batch)?;
    let (d_terms, d_grad) = discriminator_objective_on(&state.discriminator, batch, &fakes, w, config.classify_fakes_in_d)?;
    let d_report = LossReport {
        adv_d: d_terms.adv as f64,
        cls_d: d_terms.cls as f64,
        total_d: d_terms.total as f64,
        ..LossReport::default()
    };
    if !d_report.is_finite() || !d_grad.all_finite() {
        return Err(non_finite(state, &d_report));
    }
    state.opt_d.step(&mut state.discriminator, &d_grad);

    let (g_terms, g_grad) = generator_objective_on(&state.generator, &state.discriminator, batch, &fakes, w)?;
    let report = LossReport {
        adv_g: g_terms.adv as f64,
        cls_g: g_terms.cls as f64,
        l1: g_terms.l1 as f64,
        total_g: g_terms.total as f64,
        ..d_report
    };
    if !report.is_finite() || !g_grad.all_finite() {
        return Err(non_finite(state, &report));
    }
    state.opt_g.step(&mut state.generator, &g_grad);
    state.step += 1;
    Ok(report)
}

fn non_finite(state: &ModelState, report: &LossReport) -> Error {
    Error::NonFiniteLoss {
        epoch: state.epoch,
        step: state.step,
        report: serde_json::to_string(report).unwrap_or_default(),
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Sample order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch])));
    order
}

/// Runs one epoch (the one after `state.epoch`), reporting each step.
pub fn train_epoch(
    state: &mut ModelState,
    data: &[PairedSample],
    schema: &AttributeSchema,
    config: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let epoch = state.epoch;
    let order = epoch_order(data.len(), config.seed, epoch);
    let mut records = Vec::with_capacity(order.len().div_ceil(config.batch_size));
    for chunk in order.chunks(config.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| Example::prepare(&data[i], i, epoch, config, schema))
            .collect::<Result<Vec<_>>>()?;
        let losses = train_step(state, &batch, config)?;
        let rec = LogRecord { epoch, step: state.step - 1, losses };
        on_step(&rec);
        records.push(rec);
    }
    state.epoch += 1;
    Ok(records)
}

/// Trains until `config.epochs` epochs are complete. With `out`, appends
/// every step to `out/train_log.jsonl`, saves `out/checkpoint-epoch-NNNN`
/// at the configured cadence and `out/checkpoint` at the end.
pub fn train(
    state: &mut ModelState,
    data: &[PairedSample],
    schema: &AttributeSchema,
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    config.validate()?;
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut all = Vec::new();
    while state.epoch < config.epochs {
        let records = train_epoch(state, data, schema, config, &mut on_step)?;
        if let Some((f, path)) = log_file.as_mut() {
            let mut buf = Vec::new();
            for r in &records {
                serde_json::to_writer(&mut buf, r)?;
                buf.push(b'\n');
            }
            f.write_all(&buf).map_err(|e| Error::io(&*path, e))?;
        }
        all.extend(records);
        if !state.all_finite() {
            let last = all.last().map(|r| r.losses).unwrap_or_default();
            return Err(non_finite(state, &last));
        }
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0 {
                save_checkpoint(state, config, schema, dir.join(format!("checkpoint-epoch-{:04}", state.epoch)))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(state, config, schema, dir.join("checkpoint"))?;
    }
    Ok(all)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
