//! Attribute-aware UNet generator.
//!
//! The photo is encoded by stride-2 convolution blocks whose outputs double
//! as skip connections. The deepest map is projected to a hidden vector `h`
//! and fused with the attribute vector `v` as `hᵃ = ReLU(W_h h + W_v v + b)`;
//! `hᵃ` is projected back to the deepest map shape and decoded by transposed
//! convolutions. In attention mode the deepest map instead attends over the
//! per-attribute embeddings and the attended context is stacked onto it.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, leaky_relu, leaky_relu_backward, outer_acc, relu_backward, split_channels, NormCache,
};
use crate::nn::params::{ParamSink, ParamSinkMut};
use crate::nn::{Conv2d, ConvTranspose2d, Dense, InstanceNorm, Params, Scalar};
use crate::schema::{AttributeSchema, AttributeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Bottleneck,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub base_filters: usize,
    /// Length of the bottleneck vector `h`.
    pub hidden_dim: usize,
    /// Embedding length per attribute pair.
    pub embedding_dim: usize,
    /// Number of values of each attribute type, in schema order.
    pub attribute_blocks: Vec<usize>,
    pub fusion: FusionMode,
    pub leaky_slope: f64,
}

impl GeneratorConfig {
    /// Desk-scale defaults for a schema.
    pub fn for_schema(schema: &AttributeSchema) -> Self {
        Self {
            image_size: 64,
            channels: 3,
            depth: 5,
            base_filters: 32,
            hidden_dim: 256,
            embedding_dim: 16,
            attribute_blocks: schema.block_sizes(),
            fusion: FusionMode::Bottleneck,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.depth == 0 {
            return bad("generator depth must be ≥ 1");
        }
        if !self.image_size.is_power_of_two() || self.image_size < (1 << self.depth) {
            return bad("image_size must be a power of two ≥ 2^depth");
        }
        if self.hidden_dim == 0 || self.embedding_dim == 0 || self.base_filters == 0 || self.channels == 0 {
            return bad("hidden_dim, embedding_dim, base_filters and channels must be positive");
        }
        if self.attribute_blocks.is_empty() || self.attribute_blocks.iter().any(|&n| n < 2) {
            return bad("every attribute type needs at least two values");
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return bad("leaky_slope must be in [0, 1)");
        }
        Ok(())
    }

    /// Channels produced by encoder level `level`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_filters << level.min(3)
    }

    /// Spatial size of the deepest encoder map.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.depth
    }

    pub fn slot_count(&self) -> usize {
        self.attribute_blocks.iter().sum()
    }

    /// Length of the concatenated attribute vector `v`.
    pub fn attribute_dim(&self) -> usize {
        self.attribute_blocks.len() * self.embedding_dim
    }

    fn offsets(&self) -> Vec<usize> {
        self.attribute_blocks
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<F> {
    pub conv: Conv2d<F>,
    pub norm: Option<InstanceNorm<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<F> {
    pub conv: ConvTranspose2d<F>,
    pub norm: Option<InstanceNorm<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams<F> {
    Bottleneck {
        to_hidden: Dense<F>,
        w_h: Array2<F>,
        w_v: Array2<F>,
        bias: Array1<F>,
        from_hidden: Dense<F>,
    },
    /// `w_q` maps an attribute embedding into the deepest map's channel space.
    Attention { w_q: Array2<F> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator<F> {
    pub config: GeneratorConfig,
    /// Trainable attribute embeddings, one row per schema slot.
    pub embeddings: Array2<F>,
    pub encoder: Vec<EncoderBlock<F>>,
    pub fusion: FusionParams<F>,
    /// Indexed by level; `decoder[0]` produces the image.
    pub decoder: Vec<DecoderBlock<F>>,
}

/// Encoder output: bottleneck vector (bottleneck mode only) and one skip map
/// per level.
#[derive(Debug, Clone)]
pub struct Encoding<F> {
    pub hidden: Option<Array1<F>>,
    pub skips: Vec<Array3<F>>,
    norm_caches: Vec<Option<NormCache<F>>>,
    input: Array3<F>,
    flat: Array1<F>,
}

/// Attention weights and projected attributes for one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput<F> {
    /// `[h; p]` stacked channel-wise.
    pub stacked: Array3<F>,
    /// Region × attribute softmax weights β.
    pub beta: Array2<F>,
    /// Projected attributes q(c), one row per attribute.
    pub projected: Array2<F>,
}

/// `hᵃ = ReLU(W_h h + W_v v + b)`.
pub fn fuse_hidden<F: Scalar>(
    h: &Array1<F>,
    v: &Array1<F>,
    w_h: &Array2<F>,
    w_v: &Array2<F>,
    bias: &Array1<F>,
) -> Result<Array1<F>> {
    let d_h = bias.len();
    if w_h.dim() != (d_h, h.len()) || h.len() != d_h {
        return Err(Error::ShapeMismatch { expected: vec![d_h, d_h], actual: vec![w_h.nrows(), h.len()] });
    }
    if w_v.dim() != (d_h, v.len()) {
        return Err(Error::ShapeMismatch { expected: vec![d_h, w_v.ncols()], actual: vec![w_v.nrows(), v.len()] });
    }
    let pre = w_h.dot(h) + w_v.dot(v) + bias;
    Ok(pre.mapv(|x| x.max(F::zero())))
}

/// Inter-modal attention of image regions over attribute embeddings.
///
/// `features` is a `[C, H, W]` map whose `H·W` positions are the regions;
/// `attributes` holds one embedding per row; `w_q` is `[C, d_w]`.
pub fn attention_fuse<F: Scalar>(
    features: &Array3<F>,
    attributes: &Array2<F>,
    w_q: &Array2<F>,
) -> Result<AttentionOutput<F>> {
    if attributes.nrows() == 0 {
        return Err(Error::Empty("attribute list for attention"));
    }
    let (c, h, w) = features.dim();
    if w_q.dim() != (c, attributes.ncols()) {
        return Err(Error::ShapeMismatch {
            expected: vec![c, attributes.ncols()],
            actual: w_q.shape().to_vec(),
        });
    }
    let regions = regions_of(features);
    let projected = attributes.dot(&w_q.t());
    let scores = regions.dot(&projected.t());
    let beta = softmax_rows(&scores);
    let context = beta.dot(&projected);
    let context_map = context
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("context shape");
    Ok(AttentionOutput { stacked: concat_channels(features, &context_map), beta, projected })
}

fn regions_of<F: Scalar>(features: &Array3<F>) -> Array2<F> {
    let (c, h, w) = features.dim();
    features
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous features")
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
}

fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

#[derive(Debug, Clone)]
enum FusionTrace<F> {
    Bottleneck { v: Array1<F>, fused: Array1<F> },
    Attention { attention: Option<AttentionOutput<F>>, rows: Array2<F> },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorTrace<F> {
    encoding: Encoding<F>,
    fusion: FusionTrace<F>,
    selection: Vec<Option<usize>>,
    dec_inputs: Vec<Array3<F>>,
    dec_norms: Vec<Option<NormCache<F>>>,
    dec_outputs: Vec<Array3<F>>,
}

impl<F: Scalar> Generator<F> {
    /// Random initialization; embeddings use the skip-gram initial scale.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_w = config.embedding_dim;
        let bound = 0.5 / d_w as f64;
        let embeddings = Array2::from_shape_fn((config.slot_count(), d_w), |_| F::of(rng.gen_range(-bound..=bound)));
        let mut encoder = Vec::with_capacity(config.depth);
        let mut in_ch = config.channels;
        for level in 0..config.depth {
            let out = config.level_channels(level);
            let normalized = level > 0 && level + 1 < config.depth;
            let conv = Conv2d::new(&mut rng, in_ch, out, 4, 2, 1);
            encoder.push(EncoderBlock {
                conv: if normalized { conv.without_bias() } else { conv },
                norm: normalized.then(|| InstanceNorm::new(out)),
            });
            in_ch = out;
        }
        let deep_ch = config.level_channels(config.depth - 1);
        let s = config.bottleneck_size();
        let fusion = match config.fusion {
            FusionMode::Bottleneck => {
                let d_h = config.hidden_dim;
                let bound_h = 1.0 / (d_h as f64).sqrt();
                let bound_v = 1.0 / (config.attribute_dim() as f64).sqrt();
                FusionParams::Bottleneck {
                    to_hidden: Dense::new(&mut rng, deep_ch * s * s, d_h),
                    w_h: Array2::from_shape_fn((d_h, d_h), |_| F::of(rng.gen_range(-bound_h..=bound_h))),
                    w_v: Array2::from_shape_fn((d_h, config.attribute_dim()), |_| {
                        F::of(rng.gen_range(-bound_v..=bound_v))
                    }),
                    bias: Array1::from_shape_fn(d_h, |_| F::of(rng.gen_range(0.0..=bound_h))),
                    from_hidden: Dense::new(&mut rng, d_h, deep_ch * s * s),
                }
            }
            FusionMode::Attention => {
                let bound_q = 1.0 / (d_w as f64).sqrt();
                FusionParams::Attention {
                    w_q: Array2::from_shape_fn((deep_ch, d_w), |_| F::of(rng.gen_range(-bound_q..=bound_q))),
                }
            }
        };
        let mut decoder = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let in_ch = 2 * config.level_channels(level);
            let out = if level == 0 { config.channels } else { config.level_channels(level - 1) };
            let conv = ConvTranspose2d::new(&mut rng, in_ch, out, 4, 2, 1);
            decoder.push(DecoderBlock {
                conv: if level > 0 { conv.without_bias() } else { conv },
                norm: (level > 0).then(|| InstanceNorm::new(out)),
            });
        }
        Ok(Self { config, embeddings, encoder, fusion, decoder })
    }

    /// Random network weights with embeddings copied from a trained table.
    pub fn with_embeddings(
        config: GeneratorConfig,
        seed: u64,
        table: &EmbeddingTable,
        schema: &AttributeSchema,
    ) -> Result<Self> {
        if table.dim() != config.embedding_dim {
            return Err(Error::InvalidConfig(format!(
                "embedding table dim {} ≠ generator embedding_dim {}",
                table.dim(),
                config.embedding_dim
            )));
        }
        if schema.block_sizes() != config.attribute_blocks {
            return Err(Error::InvalidConfig("schema layout does not match generator config".into()));
        }
        let mut g = Self::new(config, seed)?;
        let rows = table.slot_matrix(schema)?;
        for (dst, &src) in g.embeddings.iter_mut().zip(&rows) {
            *dst = F::of(src as f64);
        }
        Ok(g)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Scalar>(&self) -> Generator<G> {
        let mut out = Generator::<G>::new(self.config.clone(), 0).expect("validated config");
        let src = self.named_tensors("");
        for (mut dst, (_, s)) in out.tensors_mut().into_iter().zip(src) {
            dst.zip_mut_with(&s, |d, &v| *d = G::of(v.as_f64()));
        }
        out
    }

    fn check_image(&self, x: &Array3<F>) -> Result<()> {
        let c = &self.config;
        let expected = (c.channels, c.image_size, c.image_size);
        if x.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.2],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the encoder, returning the bottleneck vector and skip maps.
    pub fn encode(&self, x: &Array3<F>) -> Result<Encoding<F>> {
        self.check_image(x)?;
        let slope = F::of(self.config.leaky_slope);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut norm_caches = Vec::with_capacity(self.config.depth);
        let mut a = x.clone();
        for block in &self.encoder {
            let mut z = block.conv.forward(&a);
            let cache = block.norm.as_ref().map(|n| {
                let (y, c) = n.forward(&z);
                z = y;
                c
            });
            leaky_relu(&mut z, slope);
            norm_caches.push(cache);
            skips.push(z.clone());
            a = z;
        }
        let flat = Array1::from_iter(a.iter().copied());
        let hidden = match &self.fusion {
            FusionParams::Bottleneck { to_hidden, .. } => Some(to_hidden.forward(flat.view())),
            FusionParams::Attention { .. } => None,
        };
        Ok(Encoding { hidden, skips, norm_caches, input: x.clone(), flat })
    }

    /// Bottleneck fusion with this generator's parameters.
    pub fn fuse(&self, h: &Array1<F>, v: &Array1<F>) -> Result<Array1<F>> {
        match &self.fusion {
            FusionParams::Bottleneck { w_h, w_v, bias, .. } => fuse_hidden(h, v, w_h, w_v, bias),
            FusionParams::Attention { .. } => {
                Err(Error::InvalidConfig("fuse requires bottleneck fusion mode".into()))
            }
        }
    }

    /// Decodes a fused bottleneck vector with the given skip maps.
    pub fn decode(&self, fused: &Array1<F>, skips: &[Array3<F>]) -> Result<Array3<F>> {
        let from_hidden = match &self.fusion {
            FusionParams::Bottleneck { from_hidden, .. } => from_hidden,
            FusionParams::Attention { .. } => {
                return Err(Error::InvalidConfig("decode from a vector requires bottleneck fusion mode".into()))
            }
        };
        if fused.len() != from_hidden.inputs() {
            return Err(Error::LengthMismatch { expected: from_hidden.inputs(), actual: fused.len() });
        }
        self.check_skips(skips)?;
        let deep = skips.last().expect("depth ≥ 1");
        let up = from_hidden
            .forward(fused.view())
            .into_shape_with_order(deep.raw_dim())
            .expect("deep shape");
        Ok(self.decode_stacked(concat_channels(&up, deep), skips).0)
    }

    fn check_skips(&self, skips: &[Array3<F>]) -> Result<()> {
        let c = &self.config;
        if skips.len() != c.depth {
            return Err(Error::LengthMismatch { expected: c.depth, actual: skips.len() });
        }
        for (level, skip) in skips.iter().enumerate() {
            let size = c.image_size >> (level + 1);
            let expected = (c.level_channels(level), size, size);
            if skip.dim() != expected {
                return Err(Error::ShapeMismatch {
                    expected: vec![expected.0, expected.1, expected.2],
                    actual: skip.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn decode_stacked(
        &self,
        stacked: Array3<F>,
        skips: &[Array3<F>],
    ) -> (Array3<F>, Vec<Array3<F>>, Vec<Option<NormCache<F>>>, Vec<Array3<F>>) {
        let depth = self.config.depth;
        let mut inputs = vec![Array3::zeros((0, 0, 0)); depth];
        let mut norms = vec![None; depth];
        let mut outputs = vec![Array3::zeros((0, 0, 0)); depth];
        let mut input = stacked;
        for level in (0..depth).rev() {
            let block = &self.decoder[level];
            let mut z = block.conv.forward(&input);
            if let Some(n) = &block.norm {
                let (y, c) = n.forward(&z);
                z = y;
                norms[level] = Some(c);
            }
            if level == 0 {
                z.mapv_inplace(|v| v.tanh());
            } else {
                z.mapv_inplace(|v| v.max(F::zero()));
            }
            let next = (level > 0).then(|| concat_channels(&z, &skips[level - 1]));
            inputs[level] = std::mem::replace(&mut input, next.unwrap_or_else(|| Array3::zeros((0, 0, 0))));
            outputs[level] = z;
        }
        (outputs[0].clone(), inputs, norms, outputs)
    }

    /// Validates `attrs` against `schema` and resolves value indices.
    pub fn selection(&self, attrs: &AttributeSet, schema: &AttributeSchema) -> Result<Vec<Option<usize>>> {
        if schema.block_sizes() != self.config.attribute_blocks {
            return Err(Error::InvalidConfig("schema layout does not match generator config".into()));
        }
        schema.resolve(attrs)
    }

    /// The concatenated attribute vector `v` (zero blocks for unspecified types).
    pub fn attribute_vector(&self, selection: &[Option<usize>]) -> Array1<F> {
        let d = self.config.embedding_dim;
        let mut v = Array1::zeros(self.config.attribute_dim());
        for ((t, sel), off) in selection.iter().enumerate().zip(self.config.offsets()) {
            if let Some(k) = sel {
                v.slice_mut(s![t * d..(t + 1) * d]).assign(&self.embeddings.row(off + k));
            }
        }
        v
    }

    fn attribute_rows(&self, selection: &[Option<usize>]) -> Array2<F> {
        let d = self.config.embedding_dim;
        let offsets = self.config.offsets();
        let rows: Vec<usize> = selection
            .iter()
            .zip(&offsets)
            .filter_map(|(sel, off)| sel.map(|k| off + k))
            .collect();
        let mut out = Array2::zeros((rows.len(), d));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.embeddings.row(*r));
        }
        out
    }

    pub fn generate(&self, x: &Array3<F>, attrs: &AttributeSet, schema: &AttributeSchema) -> Result<Array3<F>> {
        let selection = self.selection(attrs, schema)?;
        Ok(self.forward(x, &selection)?.0)
    }

    /// Forward pass keeping everything needed for [`Generator::backward`].
    pub fn forward(&self, x: &Array3<F>, selection: &[Option<usize>]) -> Result<(Array3<F>, GeneratorTrace<F>)> {
        if selection.len() != self.config.attribute_blocks.len() {
            return Err(Error::LengthMismatch {
                expected: self.config.attribute_blocks.len(),
                actual: selection.len(),
            });
        }
        let encoding = self.encode(x)?;
        let deep = encoding.skips.last().expect("depth ≥ 1");
        let (stacked, fusion) = match &self.fusion {
            FusionParams::Bottleneck { from_hidden, .. } => {
                let v = self.attribute_vector(selection);
                let h = encoding.hidden.as_ref().expect("bottleneck mode");
                let fused = self.fuse(h, &v)?;
                let up = from_hidden
                    .forward(fused.view())
                    .into_shape_with_order(deep.raw_dim())
                    .expect("deep shape");
                (concat_channels(&up, deep), FusionTrace::Bottleneck { v, fused })
            }
            FusionParams::Attention { w_q } => {
                let rows = self.attribute_rows(selection);
                if rows.nrows() == 0 {
                    (
                        concat_channels(deep, &Array3::zeros(deep.raw_dim())),
                        FusionTrace::Attention { attention: None, rows },
                    )
                } else {
                    let att = attention_fuse(deep, &rows, w_q)?;
                    (att.stacked.clone(), FusionTrace::Attention { attention: Some(att), rows })
                }
            }
        };
        let (y, dec_inputs, dec_norms, dec_outputs) = self.decode_stacked(stacked, &encoding.skips);
        Ok((
            y,
            GeneratorTrace {
                encoding,
                fusion,
                selection: selection.to_vec(),
                dec_inputs,
                dec_norms,
                dec_outputs,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dy` on the
    /// generated image.
    pub fn backward(&self, trace: &GeneratorTrace<F>, dy: &Array3<F>, grad: &mut Self) {
        let depth = self.config.depth;
        let slope = F::of(self.config.leaky_slope);
        let mut dskips: Vec<Array3<F>> = trace.encoding.skips.iter().map(|s| Array3::zeros(s.raw_dim())).collect();

        // decoder, outermost level first
        let mut d_out = dy.clone();
        let mut d_stacked = None;
        for level in 0..depth {
            let out = &trace.dec_outputs[level];
            if level == 0 {
                ndarray::Zip::from(&mut d_out).and(out).for_each(|d, &y| *d *= F::one() - y * y);
            } else {
                relu_backward(out, &mut d_out);
            }
            let block = &self.decoder[level];
            let gblock = &mut grad.decoder[level];
            if let (Some(n), Some(c)) = (&block.norm, &trace.dec_norms[level]) {
                d_out = n.backward(c, &d_out, gblock.norm.as_mut().expect("grad mirrors params"));
            }
            let d_in = block.conv.backward(&trace.dec_inputs[level], &d_out, &mut gblock.conv);
            if level + 1 < depth {
                let (d_next, d_skip) = split_channels(&d_in, self.config.level_channels(level));
                dskips[level] += &d_skip;
                d_out = d_next;
            } else {
                d_stacked = Some(d_in);
            }
        }
        let d_stacked = d_stacked.expect("depth ≥ 1");
        let deep_ch = self.config.level_channels(depth - 1);
        let deep = trace.encoding.skips.last().expect("depth ≥ 1");
        let offsets = self.config.offsets();
        let d_w = self.config.embedding_dim;

        match (&self.fusion, &mut grad.fusion, &trace.fusion) {
            (
                FusionParams::Bottleneck { to_hidden, w_h, w_v, from_hidden, .. },
                FusionParams::Bottleneck {
                    to_hidden: g_to,
                    w_h: g_wh,
                    w_v: g_wv,
                    bias: g_b,
                    from_hidden: g_from,
                },
                FusionTrace::Bottleneck { v, fused },
            ) => {
                let (d_up, d_deep) = split_channels(&d_stacked, deep_ch);
                dskips[depth - 1] += &d_deep;
                let d_up = Array1::from_iter(d_up.iter().copied());
                let mut d_pre = from_hidden.backward(fused.view(), d_up.view(), g_from);
                relu_backward(fused, &mut d_pre);
                let h = trace.encoding.hidden.as_ref().expect("bottleneck mode");
                outer_acc(g_wh, d_pre.view(), h.view());
                outer_acc(g_wv, d_pre.view(), v.view());
                *g_b += &d_pre;
                let dh = w_h.t().dot(&d_pre);
                let dv = w_v.t().dot(&d_pre);
                for ((t, sel), off) in trace.selection.iter().enumerate().zip(&offsets) {
                    if let Some(k) = sel {
                        let mut row = grad.embeddings.row_mut(off + k);
                        row += &dv.slice(s![t * d_w..(t + 1) * d_w]);
                    }
                }
                let d_flat = to_hidden.backward(trace.encoding.flat.view(), dh.view(), g_to);
                let d_flat = d_flat.into_shape_with_order(deep.raw_dim()).expect("deep shape");
                dskips[depth - 1] += &d_flat;
            }
            (FusionParams::Attention { w_q }, FusionParams::Attention { w_q: g_wq }, FusionTrace::Attention { attention, rows }) => {
                let (d_deep, d_ctx) = split_channels(&d_stacked, deep_ch);
                dskips[depth - 1] += &d_deep;
                if let Some(att) = attention {
                    let regions = regions_of(deep);
                    // d_ctx is [C, H, W]; regions are rows of the transposed map
                    let d_p = regions_of(&d_ctx);
                    let q = &att.projected;
                    let beta = &att.beta;
                    let d_beta = d_p.dot(&q.t());
                    let mut d_q = beta.t().dot(&d_p);
                    let row_dot = (&d_beta * beta).sum_axis(Axis(1));
                    let mut d_scores = d_beta;
                    for ((mut ds, b), &rd) in d_scores.outer_iter_mut().zip(beta.outer_iter()).zip(row_dot.iter()) {
                        ds.zip_mut_with(&b, |d, &bv| *d = bv * (*d - rd));
                    }
                    let d_regions = d_scores.dot(q);
                    d_q += &d_scores.t().dot(&regions);
                    *g_wq += &d_q.t().dot(rows);
                    let d_rows = d_q.dot(w_q);
                    let (c, h, w) = deep.dim();
                    let d_map = d_regions
                        .reversed_axes()
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((c, h, w))
                        .expect("deep shape");
                    dskips[depth - 1] += &d_map;
                    let mut r = 0;
                    for (sel, off) in trace.selection.iter().zip(&offsets) {
                        if let Some(k) = sel {
                            let mut row = grad.embeddings.row_mut(off + k);
                            row += &d_rows.row(r);
                            r += 1;
                        }
                    }
                }
            }
            _ => unreachable!("gradient struct mirrors parameters"),
        }

        // encoder, deepest level first
        for level in (0..depth).rev() {
            let mut dz = std::mem::replace(&mut dskips[level], Array3::zeros((0, 0, 0)));
            leaky_relu_backward(&trace.encoding.skips[level], &mut dz, slope);
            let block = &self.encoder[level];
            let gblock = &mut grad.encoder[level];
            if let (Some(n), Some(c)) = (&block.norm, &trace.encoding.norm_caches[level]) {
                dz = n.backward(c, &dz, gblock.norm.as_mut().expect("grad mirrors params"));
            }
            let input = if level == 0 { &trace.encoding.input } else { &trace.encoding.skips[level - 1] };
            let d_in = block.conv.backward(input, &dz, &mut gblock.conv);
            if level > 0 {
                dskips[level - 1] += &d_in;
            }
        }
    }
}

impl<F: Scalar> Params<F> for EncoderBlock<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        self.conv.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

impl<F: Scalar> Params<F> for DecoderBlock<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.norm.collect(&format!("{prefix}.norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        self.conv.collect_mut(out);
        self.norm.collect_mut(out);
    }
}

impl<F: Scalar> Params<F> for FusionParams<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        match self {
            FusionParams::Bottleneck { to_hidden, w_h, w_v, bias, from_hidden } => {
                to_hidden.collect(&format!("{prefix}.to_hidden"), out);
                out.push((format!("{prefix}.w_h"), w_h.view().into_dyn()));
                out.push((format!("{prefix}.w_v"), w_v.view().into_dyn()));
                out.push((format!("{prefix}.b"), bias.view().into_dyn()));
                from_hidden.collect(&format!("{prefix}.from_hidden"), out);
            }
            FusionParams::Attention { w_q } => out.push((format!("{prefix}.w_q"), w_q.view().into_dyn())),
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        match self {
            FusionParams::Bottleneck { to_hidden, w_h, w_v, bias, from_hidden } => {
                to_hidden.collect_mut(out);
                out.push(w_h.view_mut().into_dyn());
                out.push(w_v.view_mut().into_dyn());
                out.push(bias.view_mut().into_dyn());
                from_hidden.collect_mut(out);
            }
            FusionParams::Attention { w_q } => out.push(w_q.view_mut().into_dyn()),
        }
    }
}

impl<F: Scalar> Params<F> for Generator<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamSink<'a, F>) {
        out.push((format!("{prefix}embeddings"), self.embeddings.view().into_dyn()));
        self.encoder.collect(&format!("{prefix}enc"), out);
        self.fusion.collect(&format!("{prefix}fusion"), out);
        self.decoder.collect(&format!("{prefix}dec"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut ParamSinkMut<'a, F>) {
        out.push(self.embeddings.view_mut().into_dyn());
        self.encoder.collect_mut(out);
        self.fusion.collect_mut(out);
        self.decoder.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradients, check_gradients_filtered, GradCheck};
    use ndarray::array;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn micro(fusion: FusionMode) -> GeneratorConfig {
        GeneratorConfig {
            image_size: 2,
            channels: 3,
            depth: 1,
            base_filters: 2,
            hidden_dim: 4,
            embedding_dim: 3,
            attribute_blocks: vec![2, 2],
            fusion,
            leaky_slope: 0.2,
        }
    }

    fn small(fusion: FusionMode) -> GeneratorConfig {
        GeneratorConfig { image_size: 8, depth: 3, base_filters: 2, hidden_dim: 5, ..micro(fusion) }
    }

    fn image(seed: u64, size: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, size, size), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fuse_hand_case() {
        let out = fuse_hidden(&array![1.0], &array![1.0, 1.0], &array![[2.0]], &array![[1.0, 0.0]], &array![-1.0]).unwrap();
        assert_eq!(out, array![2.0]);
        let dead = fuse_hidden(&array![1.0], &array![1.0, 1.0], &array![[-2.0]], &array![[1.0, 0.0]], &array![-1.0]).unwrap();
        assert_eq!(dead, array![0.0]);
        assert!(fuse_hidden(&array![1.0, 2.0], &array![1.0], &array![[2.0]], &array![[1.0]], &array![0.0]).is_err());
    }

    #[test]
    fn zero_attributes_leave_only_image_path() {
        let w_h = array![[0.5, -0.2], [0.1, 0.3]];
        let b = array![0.1, 0.0];
        let h = array![1.0, 2.0];
        let v = Array1::zeros(4);
        let a = fuse_hidden(&h, &v, &w_h, &Array2::from_elem((2, 4), 3.0), &b).unwrap();
        let c = fuse_hidden(&h, &v, &w_h, &Array2::from_elem((2, 4), -7.0), &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn attention_hand_case() {
        let features = Array3::from_elem((1, 1, 1), 1.0f64);
        let out = attention_fuse(&features, &array![[1.0], [0.0]], &array![[1.0]]).unwrap();
        assert!((out.beta[[0, 0]] - 0.731_058_578_6).abs() < 1e-9);
        assert!((out.beta[[0, 1]] - 0.268_941_421_4).abs() < 1e-9);
        assert!((out.stacked[[1, 0, 0]] - 0.731_058_578_6).abs() < 1e-9);
        assert_eq!(out.stacked[[0, 0, 0]], 1.0);

        let single = attention_fuse(&image(1, 2), &array![[0.3f64, -0.1]], &Array2::from_elem((3, 2), 0.4)).unwrap();
        assert!(single.beta.iter().all(|&b| (b - 1.0).abs() < 1e-12));
        assert!(attention_fuse(&image(1, 2), &Array2::zeros((0, 2)), &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_and_ignore_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let features = image(2, 4);
        let rows = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let w_q = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let out = attention_fuse(&features, &rows, &w_q).unwrap();
        assert_eq!(out.beta.dim(), (16, 4));
        for row in out.beta.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let scores: Array2<f64> = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-5.0..5.0));
        let shifted = &scores + 100.0;
        let (a, b) = (softmax_rows(&scores), softmax_rows(&shifted));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn default_shapes_and_range() {
        let schema = AttributeSchema::toy();
        let cfg = GeneratorConfig { base_filters: 4, hidden_dim: 16, ..GeneratorConfig::for_schema(&schema) };
        let g = Generator::<f32>::new(cfg, 0).unwrap();
        let x = image(3, 64).mapv(|v| v as f32);
        let enc = g.encode(&x).unwrap();
        let sizes: Vec<usize> = enc.skips.iter().map(|s| s.dim().1).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        let attrs = AttributeSet::new().with("HairColor", "Black");
        let y = g.generate(&x, &attrs, &schema).unwrap();
        assert_eq!(y.dim(), (3, 64, 64));
        assert!(y.iter().all(|v| v.abs() < 1.0));
        assert_eq!(y, g.generate(&x, &attrs, &schema).unwrap());
        assert_eq!(Generator::<f32>::new(g.config.clone(), 0).unwrap(), g);
        assert!(g.generate(&Array3::zeros((3, 32, 32)), &attrs, &schema).is_err());
        let bad = AttributeSet::new().with("HairColor", "Green");
        assert!(g.generate(&x, &bad, &schema).is_err());
    }

    #[test]
    fn decode_matches_forward_in_bottleneck_mode() {
        let g = Generator::<f64>::new(small(FusionMode::Bottleneck), 4).unwrap();
        let x = image(5, 8);
        let sel = vec![Some(1), None];
        let enc = g.encode(&x).unwrap();
        let fused = g.fuse(enc.hidden.as_ref().unwrap(), &g.attribute_vector(&sel)).unwrap();
        let y = g.decode(&fused, &enc.skips).unwrap();
        assert_eq!(y, g.forward(&x, &sel).unwrap().0);
        assert!(g.decode(&fused, &enc.skips[1..]).is_err());
        let att = Generator::<f64>::new(small(FusionMode::Attention), 4).unwrap();
        assert!(att.decode(&fused, &enc.skips).is_err());
    }

    #[test]
    fn attribute_vector_layout() {
        let g = Generator::<f64>::new(micro(FusionMode::Bottleneck), 1).unwrap();
        let v = g.attribute_vector(&[None, Some(1)]);
        assert_eq!(v.len(), 6);
        assert!(v.slice(s![0..3]).iter().all(|&x| x == 0.0));
        assert_eq!(v.slice(s![3..6]), g.embeddings.row(3));
    }

    #[test]
    fn decoder_weights_double_encoder_per_level() {
        let schema = AttributeSchema::portrait_default();
        let g = Generator::<f32>::new(GeneratorConfig { base_filters: 4, ..GeneratorConfig::for_schema(&schema) }, 0).unwrap();
        for level in 0..g.config.depth {
            assert_eq!(g.decoder[level].conv.weight.len(), 2 * g.encoder[level].conv.weight.len());
        }
        assert_eq!(g.embeddings.dim(), (82, 16));
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let g = Generator::<f32>::new(small(FusionMode::Attention), 2).unwrap();
        assert_eq!(g.cast::<f64>().cast::<f32>(), g);
    }

    fn check_generator(fusion: FusionMode, selection: Vec<Option<usize>>, seed: u64) -> GradCheck {
        let g = Generator::<f64>::new(small(fusion), seed).unwrap();
        let x = image(seed + 10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
        let r = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let (_, trace) = g.forward(&x, &selection).unwrap();
        let mut grad = g.zeros_like();
        g.backward(&trace, &r, &mut grad);
        let loss = |net: &Generator<f64>| (net.forward(&x, &selection).unwrap().0 * &r).sum();
        check_gradients(&g, &grad, 1e-6, loss)
    }

    #[test]
    fn bottleneck_gradients_match_finite_differences() {
        check_generator(FusionMode::Bottleneck, vec![Some(0), Some(1)], 1).assert_below(1e-4);
        check_generator(FusionMode::Bottleneck, vec![None, Some(0)], 2).assert_below(1e-4);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        check_generator(FusionMode::Attention, vec![Some(1), Some(0)], 3).assert_below(1e-4);
        check_generator(FusionMode::Attention, vec![Some(1), None], 4).assert_below(1e-4);
        check_generator(FusionMode::Attention, vec![None, None], 5).assert_below(1e-4);
    }

    #[test]
    fn unselected_embeddings_get_no_gradient() {
        let g = Generator::<f64>::new(small(FusionMode::Bottleneck), 6).unwrap();
        let (y, trace) = g.forward(&image(7, 8), &[Some(1), None]).unwrap();
        let mut grad = g.zeros_like();
        g.backward(&trace, &Array3::ones(y.raw_dim()), &mut grad);
        for row in [0, 2, 3] {
            assert!(grad.embeddings.row(row).iter().all(|&v| v == 0.0));
        }
        assert!(grad.embeddings.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn micro_model_fusion_gradients() {
        let g = Generator::<f64>::new(micro(FusionMode::Bottleneck), 8).unwrap();
        let x = image(9, 2);
        let sel = vec![Some(0), Some(1)];
        let (y, trace) = g.forward(&x, &sel).unwrap();
        let mut grad = g.zeros_like();
        g.backward(&trace, &y, &mut grad);
        let loss = |net: &Generator<f64>| 0.5 * net.forward(&x, &sel).unwrap().0.mapv(|v| v * v).sum();
        check_gradients_filtered(&g, &grad, 1e-6, loss, |n| n.starts_with("fusion") || n == "embeddings")
            .assert_below(1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn random_configs_produce_bounded_images(
            depth in 1usize..4,
            extra in 0usize..2,
            base in 1usize..4,
            hidden in 1usize..6,
            d_w in 1usize..4,
            attention in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let cfg = GeneratorConfig {
                image_size: 1 << (depth + extra),
                channels: 3,
                depth,
                base_filters: base,
                hidden_dim: hidden,
                embedding_dim: d_w,
                attribute_blocks: vec![2, 3],
                fusion: if attention { FusionMode::Attention } else { FusionMode::Bottleneck },
                leaky_slope: 0.2,
            };
            let g = Generator::<f32>::new(cfg.clone(), seed).unwrap();
            let x = Array3::from_elem((3, cfg.image_size, cfg.image_size), 0.5f32);
            let (y, _) = g.forward(&x, &[Some(1), Some(2)]).unwrap();
            prop_assert_eq!(y.dim(), (3, cfg.image_size, cfg.image_size));
            prop_assert!(y.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
}
