//! Dual-head discriminator: a shared convolutional trunk with a realness
//! head (one logit) and a multi-label attribute head (one logit per slot).

use ndarray::{Array1, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::EncoderBlock;
use crate::nn::layers::{leaky_relu, leaky_relu_backward, sigmoid, NormCache};
use crate::nn::params::{ParamSink, ParamSinkMut};
use crate::nn::{Conv2d, Dense, InstanceNorm, Params, Scalar};
use crate::schema::{AttributeSchema, AttributeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Number of stride-2 convolution blocks in the trunk.
    pub blocks: usize,
    pub base_filters: usize,
    /// Width of the fully connected layer feeding both heads.
    pub hidden: usize,
    /// Attribute slots K.
    pub slots: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn for_schema(schema: &AttributeSchema) -> Self {
        Self {
            image_size: 64,
            channels: 3,
            blocks: 4,
            base_filters: 32,
            hidden: 64,
            slots: schema.slot_count(),
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || !self.image_size.is_power_of_two() || self.image_size < (1 << self.blocks) {
            return Err(Error::InvalidConfig(
                "discriminator needs ≥ 1 block and a power-of-two image_size ≥ 2^blocks".into(),
            ));
        }
        if self.hidden == 0 || self.slots == 0 || self.base_filters == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("discriminator widths must be positive".into()));
        }
        Ok(())
    }

    fn block_channels(&self, i: usize) -> usize {
        self.base_filters << i.min(3)
    }

    fn flat_len(&self) -> usize {
        let s = self.image_size >> self.blocks;
        self.block_channels(self.blocks - 1) * s * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<F> {
    pub config: DiscriminatorConfig,
    pub trunk: Vec<EncoderBlock<F>>,
    pub hidden: Dense<F>,
    pub realness: Dense<F>,
    pub attributes: Dense<F>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<F> {
    pub realness_logit: F,
    pub attribute_logits: Array1<F>,
    /// Penultimate-layer activations.
    pub features: Array1<F>,
}

impl<F: Scalar> DiscriminatorOutput<F> {
    pub fn realness(&self) -> F {
        sigmoid(self.realness_logit)
    }

    pub fn attribute_probs(&self) -> Array1<F> {
        self.attribute_logits.mapv(sigmoid)
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorTrace<F> {
    inputs: Vec<Array3<F>>,
    outputs: Vec<Array3<F>>,
    norms: Vec<Option<NormCache<F>>>,
    flat: Array1<F>,
    features: Array1<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(config.blocks);
        let mut in_ch = config.channels;
        for i in 0..config.blocks {
            let out = config.block_channels(i);
            let conv = Conv2d::new(&mut rng, in_ch, out, 4, 2, 1);
            trunk.push(EncoderBlock {
                conv: if i > 0 { conv.without_bias() } else { conv },
                norm: (i > 0).then(|| InstanceNorm::new(out)),
            });
            in_ch = out;
        }
        let hidden = Dense::new(&mut rng, config.flat_len(), config.hidden);
        let realness = Dense::new(&mut rng, config.hidden, 1);
        let attributes = Dense::new(&mut rng, config.hidden, config.slots);
        Ok(Self { config, trunk, hidden, realness, attributes })
    }

    pub fn zeros_like(&self) -> Self {
        let mut d = self.clone();
        d.zero();
        d
    }

    pub fn cast<G: Scalar>(&self) -> Discriminator<G> {
        let mut out = Discriminator::<G>::new(self.config.clone(), 0).expect("validated config");
        let src = self.named_tensors("");
        for (mut dst, (_, s)) in out.tensors_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, &v| *d = G::of(v.as_f64()));
        }
        out
    }

    pub fn forward(&self, img: &Array3<F>) -> Result<(DiscriminatorOutput<F>, DiscriminatorTrace<F>)> {
        let c = &self.config;
        let expected = (c.channels, c.image_size, c.image_size);
        if img.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.2],
                actual: img.shape().to_vec(),
            });
        }
        let slope = F::of(c.leaky_slope);
        let mut inputs = Vec::with_capacity(c.blocks);
        let mut outputs = Vec::with_capacity(c.blocks);
        let mut norms = Vec::with_capacity(c.blocks);
        let mut a = img.clone();
        for block in &self.trunk {
            let mut z = block.conv.forward(&a);
            let cache = block.norm.as_ref().map(|n| {
                let (y, cache) = n.forward(&z);
                z = y;
                cache
            });
            leaky_relu(&mut z, slope);
            norms.push(cache);
            inputs.push(std::mem::replace(&mut a, z.clone()));
            outputs.push(z);
        }
        let flat = Array1::from_iter(a.iter().copied());
        let mut features = self.hidden.forward(flat.view());
        leaky_relu(&mut features, slope);
        let realness_logit = self.realness.forward(features.view())[0];
        let attribute_logits = self.attributes.forward(features.view());
        Ok((
            DiscriminatorOutput { realness_logit, attribute_logits, features: features.clone() },
            DiscriminatorTrace { inputs, outputs, norms, flat, features },
        ))
    }

    /// Realness probability and per-slot attribute probabilities.
    pub fn discriminate(&self, img: &Array3<F>) -> Result<(F, Array1<F>)> {
        let (out, _) = self.forward(img)?;
        Ok((out.realness(), out.attribute_probs()))
    }

    /// Argmax readout of the attribute head per schema type.
    pub fn classify_attributes(&self, img: &Array3<F>, schema: &AttributeSchema) -> Result<AttributeSet> {
        if schema.slot_count() != self.config.slots {
            return Err(Error::LengthMismatch { expected: self.config.slots, actual: schema.slot_count() });
        }
        let (_, probs) = self.discriminate(img)?;
        let probs: Vec<f64> = probs.iter().map(|p| p.as_f64()).collect();
        schema.decode_onehot(&probs)
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input image.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<F>,
        d_realness_logit: F,
        d_attribute_logits: &Array1<F>,
        grad: &mut Self,
    ) -> Array3<F> {
        let slope = F::of(self.config.leaky_slope);
        let d_r = Array1::from_elem(1, d_realness_logit);
        let mut d_feat = self.realness.backward(trace.features.view(), d_r.view(), &mut grad.realness);
        d_feat += &self
            .attributes
            .backward(trace.features.view(), d_attribute_logits.view(), &mut grad.attributes);
        leaky_relu_backward(&trace.features, &mut d_feat, slope);
        let d_flat = self.hidden.backward(trace.flat.view(), d_feat.view(), &mut grad.hidden);
        let last = trace.outputs.last().expect("≥ 1 block");
        let mut d = d_flat.into_shape_with_order(last.raw_dim()).expect("trunk shape");
        for i in (0..self.trunk.len()).rev() {
            leaky_relu_backward(&trace.outputs[i], &mut d, slope);
            if let (Some(n), Some(c)) = (&self.trunk[i].norm, &trace.norms[i]) {
                d = n.backward(c, &d, grad.trunk[i].norm.as_mut().expect("grad mirrors params"));
            }
            d = self.trunk[i].conv.backward(&trace.inputs[i], &d, &mut grad.trunk[i].conv);
        }
        d
    }
}

impl<F: Scalar> Params<F> for Discriminator<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        self.trunk.collect(&format!("{prefix}trunk"), out);
        self.hidden.collect(&format!("{prefix}hidden"), out);
        self.realness.collect(&format!("{prefix}realness"), out);
        self.attributes.collect(&format!("{prefix}attributes"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        self.trunk.collect_mut(out);
        self.hidden.collect_mut(out);
        self.realness.collect_mut(out);
        self.attributes.collect_mut(out);
    }
}
