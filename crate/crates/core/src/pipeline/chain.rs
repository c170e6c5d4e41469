use crate::error::Result;
use crate::generator::{activate_and_split, activation_backward, ActivationConfig};
use crate::head_model::{FlameParams, HeadModel, UvChart};
use crate::image::Image;
use crate::losses::{image_loss, primitive_regularizers, regularizer_backward, ImageCritics, LossComponents, LossWeights};
use crate::nn::Real;
use crate::render::{render, render_backward, Camera, RenderSettings, Rendered};
use crate::splat::{deform_backward, deform_with, texel_transports, CovarianceTransport, GaussianPrimitive, GaussianSet, TexelTransport};

use super::color::ColorAffine;

/// Raw parameter map → activated primitives → posed Gaussians → image, with
/// the matching backward pass.
#[derive(Clone, Debug)]
pub struct SplatChain<'a> {
    pub model: &'a HeadModel,
    pub chart: &'a UvChart,
    pub activation: ActivationConfig,
    pub transport: CovarianceTransport,
    pub settings: RenderSettings,
    valid: Vec<bool>,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ChainPass {
    pub prims: Vec<GaussianPrimitive>,
    pub transports: Vec<TexelTransport>,
    pub set: GaussianSet,
    pub rendered: Rendered,
}

/// Result of [`SplatChain::loss_step`].
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub components: LossComponents,
    /// Gradient of the weighted loss w.r.t. the raw map.
    pub d_raw: Vec<T>,
    /// The image the loss saw (after any colour transform).
    pub render: Image,
    /// Gradient w.r.t. the colour transform's top three rows.
    pub d_color: Option<[[f64; 4]; 3]>,
}

impl<'a> SplatChain<'a> {
    pub fn new(model: &'a HeadModel, chart: &'a UvChart, activation: ActivationConfig) -> Self {
        let valid = (0..chart.n_texels()).map(|t| chart.is_valid(t)).collect();
        SplatChain {
            model,
            chart,
            activation,
            transport: CovarianceTransport::default(),
            settings: RenderSettings::default(),
            valid,
        }
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn transports(&self, params: &FlameParams) -> Result<Vec<TexelTransport>> {
        let anchors = self.model.uv_surface_anchors(params, self.chart)?;
        Ok(texel_transports(&anchors, self.transport))
    }

    /// Forward pass of one `[59, texels]` raw map (channel-major).
    pub fn forward<T: Real>(&self, raw: &[T], transports: Vec<TexelTransport>, cam: &Camera) -> Result<ChainPass> {
        let prims = activate_and_split(raw, &self.activation);
        let set = deform_with(&prims, &transports);
        let rendered = render(&set, cam, &self.settings)?;
        Ok(ChainPass { prims, transports, set, rendered })
    }

    /// Gradient w.r.t. the raw map given `∂L/∂image`, optionally adding the
    /// weighted primitive regularisers.
    pub fn backward<T: Real>(
        &self,
        raw: &[T],
        pass: &ChainPass,
        cam: &Camera,
        d_image: &Image,
        regularizers: Option<(f64, f64)>,
    ) -> Result<Vec<T>> {
        let world = render_backward(&pass.set, cam, &pass.rendered, d_image, None, &self.settings)?;
        let mut grads = deform_backward(&pass.prims, &pass.transports, &world);
        if let Some((w_pos, w_scal)) = regularizers {
            let neutral = self.activation.neutral_scale();
            regularizer_backward(&pass.prims, &self.valid, neutral, w_pos, w_scal, &mut grads);
        }
        Ok(activation_backward(raw, &grads, &self.activation))
    }

    /// `(L_pos, L_scal)` of a pass.
    pub fn regularizers(&self, pass: &ChainPass) -> (f64, f64) {
        primitive_regularizers(&pass.prims, &self.valid, self.activation.neutral_scale())
    }

    /// Loss of one raw map against a target view and its gradient: photometric
    /// (+ adversarial) terms on the optionally colour-transformed render plus
    /// the primitive regularisers.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_step<T: Real>(
        &self,
        raw: &[T],
        params: &FlameParams,
        cam: &Camera,
        target: &Image,
        weights: &LossWeights,
        critics: &ImageCritics<T>,
        color: Option<&ColorAffine>,
    ) -> Result<StepOutput<T>> {
        let pass = self.forward(raw, self.transports(params)?, cam)?;
        let rendered = &pass.rendered.image;
        let shown = match color {
            Some(c) => c.apply(rendered),
            None => rendered.clone(),
        };
        let (mut components, d_shown) = image_loss(&shown, target, weights, critics)?;
        let (d_image, d_color) = match color {
            Some(c) => {
                let (d_in, d_m) = c.backward(rendered, &d_shown);
                (d_in, Some(d_m))
            }
            None => (d_shown, None),
        };
        let (pos, scal) = self.regularizers(&pass);
        components.pos = pos;
        components.scal = scal;
        let d_raw = self.backward(raw, &pass, cam, &d_image, Some((weights.pos, weights.scal)))?;
        Ok(StepOutput { components, d_raw, render: shown, d_color })
    }
}
