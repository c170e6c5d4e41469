//! UV-space generator: identity and expression pyramid encoders, a
//! skip-concatenating decoder emitting 59 raw channels per texel, and the
//! activation layer turning raw channels into valid primitives.

mod activation;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningBundle;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::head_model::{HeadModel, UvChart};
use crate::image::Image;
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub use activation::{activate_and_split, activation_backward, ActivationConfig};

/// Number of pyramid levels.
pub const LEVELS: usize = 6;
/// Raw output channels per texel.
pub const CHANNELS: usize = 59;
pub const CH_OFFSET: usize = 0;
pub const CH_OPACITY: usize = 3;
pub const CH_ROTATION: usize = 4;
pub const CH_SCALE: usize = 8;
pub const CH_SH: usize = 11;
/// Identity input: RGB texture plus validity.
pub const IDENTITY_INPUT: usize = 4;
/// Expression input: offset map plus mouth map.
pub const EXPRESSION_INPUT: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Name of the last decoder convolution (fine-tuned during enrollment).
pub const FINAL_LAYER: &str = "dec.out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Input and output UV resolution; a multiple of 64.
    pub resolution: usize,
    /// Channel widths of the six pyramid levels, coarsest first.
    pub widths: Vec<usize>,
    /// Channels of the full-resolution block before the output layer.
    pub head_width: usize,
    /// Group-norm group count (clamped to each layer's width).
    pub groups: usize,
    /// Multiplier applied to the expression offset map on input.
    pub offset_scale: f64,
    pub activation: ActivationConfig,
    /// Bias of the output quaternion's real channel, so zero-initialised
    /// rotations start at identity instead of the degenerate fallback.
    pub rotation_bias: f64,
}

impl GeneratorConfig {
    /// Defaults sized to a head model and UV chart.
    pub fn for_model(model: &HeadModel, chart: &UvChart) -> Self {
        let edge = model.mean_edge_length();
        GeneratorConfig {
            resolution: chart.resolution,
            widths: vec![128, 128, 64, 64, 32, 16],
            head_width: 32,
            groups: 8,
            offset_scale: 1.0 / edge,
            activation: ActivationConfig::for_model(model, chart),
            rotation_bias: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 64 != 0 {
            return Err(Error::Config(format!("generator resolution {} is not a multiple of 64", self.resolution)));
        }
        if self.widths.len() != LEVELS || self.widths.iter().any(|&w| w == 0) || self.head_width == 0 {
            return Err(Error::Config(format!("generator needs {LEVELS} positive widths, got {:?}", self.widths)));
        }
        if self.groups == 0 || !(self.offset_scale.is_finite() && self.offset_scale > 0.0) {
            return Err(Error::Config("generator groups and offset scale must be positive".into()));
        }
        self.activation.validate()
    }

    /// Width of pyramid level `l` (0 = finest).
    pub fn width(&self, l: usize) -> usize {
        self.widths[LEVELS - 1 - l]
    }

    /// `(channels, side)` of every pyramid level, finest first.
    pub fn level_shapes(&self) -> [(usize, usize); LEVELS] {
        std::array::from_fn(|l| (self.width(l), self.resolution >> (l + 1)))
    }
}

fn groups_for(width: usize, groups: usize) -> usize {
    (1..=groups.min(width)).rev().find(|g| width % g == 0).unwrap_or(1)
}

/// Ids of one conv + group-norm block.
#[derive(Clone, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
    g: ParamId,
    beta: ParamId,
    groups: usize,
}

/// The dual-encoder, skip-concatenating decoder network.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub store: ParamStore<T>,
    trainable: Vec<bool>,
    enc_id: Vec<[Block; 2]>,
    enc_exp: Vec<[Block; 2]>,
    dec_up: Vec<Block>,
    dec_head: Block,
    out_w: ParamId,
    out_b: ParamId,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut store = ParamStore::new();
        let block = |store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R| {
            let (w, b) = store.add_conv(name, cout, cin, 3, gain, rng);
            let (g, beta) = store.add_norm(&format!("{name}.n"), cout);
            Block { w, b, g, beta, groups: groups_for(cout, config.groups) }
        };
        let encoder = |store: &mut ParamStore<T>, prefix: &str, cin: usize, rng: &mut R| {
            let mut blocks = Vec::with_capacity(LEVELS);
            let mut c = cin;
            for l in 0..LEVELS {
                let w = config.width(l);
                let down = block(store, &format!("{prefix}.{l}.down"), c, w, rng);
                let conv = block(store, &format!("{prefix}.{l}.conv"), w, w, rng);
                blocks.push([down, conv]);
                c = w;
            }
            blocks
        };
        let enc_id = encoder(&mut store, "enc_id", IDENTITY_INPUT, rng);
        let enc_exp = encoder(&mut store, "enc_exp", EXPRESSION_INPUT, rng);
        let mut dec_up = Vec::with_capacity(LEVELS - 1);
        let mut c = 2 * config.width(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            let w = config.width(l);
            dec_up.push(block(&mut store, &format!("dec.{l}.up"), c, w, rng));
            c = 3 * w;
        }
        let dec_head = block(&mut store, "dec.head", c, config.head_width, rng);
        let (out_w, out_b) = store.add_conv(FINAL_LAYER, CHANNELS, config.head_width, 1, 0.1, rng);
        store.get_mut(out_b).data[CH_ROTATION] = T::of(config.rotation_bias);
        let trainable = vec![true; store.len()];
        Ok(Generator { config, store, trainable, enc_id, enc_exp, dec_up, dec_head, out_w, out_b })
    }

    /// Marks parameters trainable by name.
    pub fn set_trainable(&mut self, f: impl Fn(&str) -> bool) {
        self.trainable = self.store.names().iter().map(|n| f(n)).collect();
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    /// Ids of the output layer's weight and bias.
    pub fn final_layer(&self) -> [ParamId; 2] {
        [self.out_w, self.out_b]
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.store, id, self.trainable[id])
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, b: &Block, stride: usize) -> Var {
        let (w, bias, gamma, beta) = (self.p(g, b.w), self.p(g, b.b), self.p(g, b.g), self.p(g, b.beta));
        let h = g.conv(x, w, Some(bias), stride, 1);
        let h = g.group_norm(h, gamma, beta, b.groups);
        g.leaky_relu(h, LEAKY_SLOPE)
    }

    fn encode(&self, g: &mut Graph<T>, x: Var, blocks: &[[Block; 2]], channels: usize) -> Result<Vec<Var>> {
        let s = g.value(x).shape;
        let r = self.config.resolution;
        if s[1] != channels || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("encoder input {s:?}, expected [n, {channels}, {r}, {r}]")));
        }
        let mut h = x;
        let mut out = Vec::with_capacity(LEVELS);
        for [down, conv] in blocks {
            h = self.apply(g, h, down, 2);
            h = self.apply(g, h, conv, 1);
            out.push(h);
        }
        Ok(out)
    }

    /// Identity pyramid from `[n, 4, R, R]` (texture + validity), finest first.
    pub fn encode_identity(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        self.encode(g, x, &self.enc_id, IDENTITY_INPUT)
    }

    /// Expression pyramid from `[n, 6, R, R]` (scaled offsets + mouth map).
    pub fn encode_expression(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        self.encode(g, x, &self.enc_exp, EXPRESSION_INPUT)
    }

    /// Raw `[n, 59, R, R]` parameter map from the two pyramids.
    pub fn decode(&self, g: &mut Graph<T>, f_id: &[Var], f_exp: &[Var]) -> Result<Var> {
        if f_id.len() != LEVELS || f_exp.len() != LEVELS {
            return Err(Error::Shape(format!("decode needs {LEVELS} levels per pyramid")));
        }
        let shapes = self.config.level_shapes();
        for (l, &(c, side)) in shapes.iter().enumerate() {
            for v in [f_id[l], f_exp[l]] {
                let s = g.value(v).shape;
                if s[1] != c || s[2] != side || s[3] != side || s[0] != g.value(f_id[0]).shape[0] {
                    return Err(Error::Shape(format!("pyramid level {l}: {s:?}, expected [n, {c}, {side}, {side}]")));
                }
            }
        }
        let mut h = g.concat(&[f_id[LEVELS - 1], f_exp[LEVELS - 1]]);
        for (b, l) in self.dec_up.iter().zip((0..LEVELS - 1).rev()) {
            let up = g.upsample(h);
            let y = self.apply(g, up, b, 1);
            h = g.concat(&[y, f_id[l], f_exp[l]]);
        }
        let up = g.upsample(h);
        let y = self.apply(g, up, &self.dec_head, 1);
        let (w, b) = (self.p(g, self.out_w), self.p(g, self.out_b));
        Ok(g.conv(y, w, Some(b), 1, 0))
    }

    /// Full forward pass from conditioning tensors.
    pub fn forward(&self, g: &mut Graph<T>, identity: Var, expression: Var) -> Result<Var> {
        let f_id = self.encode_identity(g, identity)?;
        let f_exp = self.encode_expression(g, expression)?;
        self.decode(g, &f_id, &f_exp)
    }

    /// SHA-256 of every parameter, by name.
    pub fn digests(&self) -> Vec<(String, String)> {
        (0..self.store.len()).map(|i| (self.store.name(i).to_string(), self.store.digest(i))).collect()
    }

    pub fn write(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.set_meta(&format!("{prefix}config"), serde_json::to_string(&self.config)?);
        c.set_meta(&format!("{prefix}dtype"), T::NAME);
        self.store.write(c, prefix)
    }

    /// Rebuilds a generator from [`Generator::write`] output.
    pub fn read(c: &Container, prefix: &str) -> Result<Self> {
        let config: GeneratorConfig = serde_json::from_str(c.meta(&format!("{prefix}config"))?)?;
        let dtype = c.meta(&format!("{prefix}dtype"))?;
        if dtype != T::NAME {
            return Err(Error::Container(format!("generator stored as {dtype}, requested {}", T::NAME)));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Self::new(config, &mut rng)?;
        g.store.read(c, prefix)?;
        Ok(g)
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        let mut store = ParamStore::new();
        for i in 0..self.store.len() {
            store.add(self.store.name(i), self.store.get(i).cast());
        }
        Generator {
            config: self.config.clone(),
            store,
            trainable: self.trainable.clone(),
            enc_id: self.enc_id.clone(),
            enc_exp: self.enc_exp.clone(),
            dec_up: self.dec_up.clone(),
            dec_head: self.dec_head.clone(),
            out_w: self.out_w,
            out_b: self.out_b,
        }
    }
}


fn hwc_to_chw<T: Real>(img: &Image, out: &mut Vec<T>, scale: f64) {
    let hw = img.height * img.width;
    for ch in 0..img.channels {
        out.extend((0..hw).map(|p| T::of(img.data[p * img.channels + ch] * scale)));
    }
}

/// `[1, 4, R, R]` identity input: `M_id` and its validity.
pub fn identity_input<T: Real>(bundle: &ConditioningBundle) -> Tensor<T> {
    let r = bundle.m_id.height;
    let mut data = Vec::with_capacity(4 * r * r);
    hwc_to_chw(&bundle.m_id, &mut data, 1.0);
    data.extend(bundle.id_valid.iter().map(|&v| if v { T::ONE } else { T::ZERO }));
    Tensor { shape: [1, IDENTITY_INPUT, r, r], data }
}

/// `[1, 6, R, R]` expression input: scaled `Δp` and `M_mouth`.
pub fn expression_input<T: Real>(bundle: &ConditioningBundle, offset_scale: f64) -> Tensor<T> {
    let r = bundle.delta_p.height;
    let mut data = Vec::with_capacity(6 * r * r);
    hwc_to_chw(&bundle.delta_p, &mut data, offset_scale);
    hwc_to_chw(&bundle.m_mouth, &mut data, 1.0);
    Tensor { shape: [1, EXPRESSION_INPUT, r, r], data }
}
