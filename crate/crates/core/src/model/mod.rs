//! Same-padding convolutional segmentation network with hand-written
//! reverse-mode gradients.

mod adam;
mod conv;
mod loss;

pub use adam::{adam_step, OptimizerState, BETA1, BETA2, EPSILON};
pub use loss::{dice_loss, dice_loss_grad, DICE_SMOOTH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Grid, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub height: usize,
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            hidden_channels: vec![8, 16, 8],
            kernel_size: 3,
            height: 32,
            width: 32,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("model.kernel must be odd"));
        }
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(Error::config("model.hidden needs at least one non-empty layer"));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("model input shape must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut in_ch = self.in_channels;
        let k = self.kernel_size;
        for &out_ch in self.hidden_channels.iter().chain(std::iter::once(&1)) {
            let weights = out_ch * in_ch * k * k;
            layers.push(LayerShape {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: k,
                weight_offset: offset,
                bias_offset: offset + weights,
            });
            offset += weights + out_ch;
            in_ch = out_ch;
        }
        Layout { layers, len: offset }
    }
}

/// Where one convolution's weights and biases live in the flat vector.
/// Weights are stored `[out][in][ky][kx]`, followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerShape>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ModelParams {
    pub fn zeros(layout: Layout) -> Self {
        ModelParams {
            values: vec![0.0; layout.len],
            layout,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(layout: Layout, rng: &mut R) -> Self {
        let mut params = Self::zeros(layout);
        for layer in params.layout.layers.clone() {
            let kk = (layer.kernel * layer.kernel) as f64;
            let fan = (layer.in_channels as f64 + layer.out_channels as f64) * kk;
            let bound = (6.0 / fan).sqrt();
            let span = layer.weight_offset..layer.weight_offset + layer.weight_len();
            for w in &mut params.values[span] {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Coordinatewise convex combination, reduced in list order.
pub fn params_interp(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params
        .first()
        .ok_or_else(|| Error::Aggregation("no parameter vectors to combine".into()))?;
    if params.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} parameter vectors but {} weights",
            params.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Aggregation(format!("negative or NaN weight in {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Aggregation(format!("weights sum to {total}, not 1")));
    }
    if params.iter().any(|p| p.layout != first.layout) {
        return Err(Error::Aggregation("parameter layouts differ".into()));
    }
    let mut out = ModelParams::zeros(first.layout.clone());
    for (p, &w) in params.iter().zip(weights) {
        for (o, &v) in out.values.iter_mut().zip(&p.values) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input of every layer (the image for layer 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of every hidden layer.
    pre: Vec<Vec<f64>>,
    prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    config: ModelConfig,
    layout: Layout,
}

impl SegNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(SegNet { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn plane(&self) -> Dims {
        Dims::plane(self.config.height, self.config.width)
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::shape(
                format!("{} parameters", self.layout.len),
                format!("{} parameters with a different layout", params.len()),
            ));
        }
        Ok(())
    }

    fn check_image(&self, len: usize, dims: Dims) -> Result<()> {
        let want = Dims::new(
            self.config.in_channels,
            self.config.height,
            self.config.width,
        );
        if dims.len() != want.len() || len != want.len() {
            return Err(Error::shape(want, dims));
        }
        Ok(())
    }

    fn run(&self, params: &ModelParams, image: &[f32], keep: bool) -> Trace {
        let (h, w) = (self.config.height, self.config.width);
        let plane = h * w;
        let mut act: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let last = self.layout.layers.len() - 1;
        for (li, layer) in self.layout.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_channels * plane];
            conv::forward(layer, &params.values, &act, &mut out, h, w);
            if li < last {
                let slope = self.config.leaky_slope;
                let post: Vec<f64> = out.iter().map(|&z| if z > 0.0 { z } else { slope * z }).collect();
                if keep {
                    pre.push(out);
                    inputs.push(std::mem::replace(&mut act, post));
                } else {
                    act = post;
                }
            } else {
                if keep {
                    inputs.push(std::mem::take(&mut act));
                }
                act = out.iter().map(|&z| sigmoid(z)).collect();
            }
        }
        Trace {
            inputs,
            pre,
            prob: act,
        }
    }

    /// Which hidden pre-activations are positive. The loss is smooth in the
    /// parameters wherever this pattern does not change.
    pub fn activation_pattern(&self, params: &ModelParams, image: &Grid<f32>) -> Result<Vec<bool>> {
        self.check_params(params)?;
        self.check_image(image.as_slice().len(), image.dims())?;
        let trace = self.run(params, image.as_slice(), true);
        Ok(trace.pre.iter().flatten().map(|&z| z > 0.0).collect())
    }

    /// Per-pixel foreground probabilities for one slice.
    pub fn forward(&self, params: &ModelParams, image: &Grid<f32>) -> Result<Grid<f64>> {
        self.check_params(params)?;
        self.check_image(image.as_slice().len(), image.dims())?;
        let prob = self.run(params, image.as_slice(), false).prob;
        Ok(Grid::from_vec(self.plane(), prob))
    }

    /// Forward pass on a raw slice, for callers that already validated shapes.
    pub(crate) fn forward_raw(&self, params: &ModelParams, image: &[f32]) -> Vec<f64> {
        self.run(params, image, false).prob
    }

    /// Dice loss of one slice and its gradient with respect to every parameter.
    pub fn backward(
        &self,
        params: &ModelParams,
        image: &Grid<f32>,
        target: &Mask,
        smooth: f64,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        self.check_image(image.as_slice().len(), image.dims())?;
        if target.dims().len() != self.plane().len() {
            return Err(Error::shape(self.plane(), target.dims()));
        }
        let mut grad = vec![0.0; self.layout.len];
        let loss = self.accumulate_grad(params, image.as_slice(), target.as_slice(), smooth, 1.0, &mut grad);
        Ok((loss, grad))
    }

    /// Adds `scale * dL/dθ` into `grad` and returns the loss.
    pub(crate) fn accumulate_grad(
        &self,
        params: &ModelParams,
        image: &[f32],
        target: &[u8],
        smooth: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let (h, w) = (self.config.height, self.config.width);
        let trace = self.run(params, image, true);
        let (loss, dprob) = dice_loss_grad(&trace.prob, target, smooth);
        // Through the sigmoid.
        let mut delta: Vec<f64> = dprob
            .iter()
            .zip(&trace.prob)
            .map(|(&g, &p)| scale * g * p * (1.0 - p))
            .collect();
        for li in (0..self.layout.layers.len()).rev() {
            let layer = &self.layout.layers[li];
            let input = &trace.inputs[li];
            let mut dinput = if li > 0 { vec![0.0; input.len()] } else { Vec::new() };
            conv::backward(layer, &params.values, input, &delta, grad, (li > 0).then_some(&mut dinput[..]), h, w);
            if li > 0 {
                let slope = self.config.leaky_slope;
                for (d, &z) in dinput.iter_mut().zip(&trace.pre[li - 1]) {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                }
                delta = dinput;
            }
        }
        loss
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(h: usize, w: usize, hidden: Vec<usize>, k: usize) -> SegNet {
        SegNet::new(ModelConfig {
            hidden_channels: hidden,
            kernel_size: k,
            height: h,
            width: w,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn default_layout_size() {
        let layout = ModelConfig::default().layout();
        // 1→8, 8→16, 16→8, 8→1 with 3x3 kernels
        assert_eq!(layout.len, 80 + 1168 + 1160 + 73);
        assert_eq!(layout.layers.len(), 4);
    }

    #[test]
    fn zero_params_give_one_half() {
        let net = SegNet::new(ModelConfig::default()).unwrap();
        let params = ModelParams::zeros(net.layout().clone());
        let img = Grid::from_vec(net.plane(), vec![0.7f32; 32 * 32]);
        let out = net.forward(&params, &img).unwrap();
        assert!(out.as_slice().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = SegNet::new(ModelConfig::default()).unwrap();
        let params = ModelParams::init(net.layout().clone(), &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Grid::from_vec(net.plane(), (0..1024).map(|_| rng.gen::<f32>()).collect());
        let a = net.forward(&params, &img).unwrap();
        let b = net.forward(&params, &img).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn pointwise_network_closed_form() {
        // hidden [1] with 1x1 kernels: sigmoid(w2 * leaky(w1 c + b1) + b2)
        let net = tiny(3, 3, vec![1], 1);
        let mut params = ModelParams::zeros(net.layout().clone());
        params.values.copy_from_slice(&[2.0, -0.5, 1.5, 0.25]);
        let c = 0.6f32;
        let img = Grid::from_vec(net.plane(), vec![c; 9]);
        let hidden = 2.0 * 0.6f64 - 0.5;
        let expected = 1.0 / (1.0 + (-(1.5 * hidden + 0.25)).exp());
        let out = net.forward(&params, &img).unwrap();
        for &p in out.as_slice() {
            assert!((p - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = SegNet::new(ModelConfig::default()).unwrap();
        let params = ModelParams::zeros(net.layout().clone());
        let img = Grid::from_vec(Dims::plane(16, 16), vec![0.0f32; 256]);
        assert!(matches!(net.forward(&params, &img), Err(Error::Shape { .. })));
    }

    #[test]
    fn interp_basics() {
        let layout = Layout {
            layers: vec![],
            len: 1,
        };
        let a = ModelParams {
            values: vec![0.0],
            layout: layout.clone(),
        };
        let b = ModelParams {
            values: vec![4.0],
            layout,
        };
        assert_eq!(params_interp(&[&a, &b], &[0.25, 0.75]).unwrap().values, vec![3.0]);
        assert_eq!(params_interp(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        assert!(params_interp(&[&a, &b], &[0.5, 0.6]).is_err());
        assert!(params_interp(&[], &[]).is_err());
    }

    #[test]
    fn interp_of_identical_vectors_is_fixed_point() {
        let net = tiny(4, 4, vec![2], 3);
        let p = ModelParams::init(net.layout().clone(), &mut ChaCha8Rng::seed_from_u64(1));
        let out = params_interp(&[&p, &p, &p], &[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in out.values.iter().zip(&p.values) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let net = tiny(5, 4, vec![3, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModelParams::init(net.layout().clone(), &mut rng);
        let img = Grid::from_vec(net.plane(), (0..20).map(|_| rng.gen()).collect());
        let target = Grid::from_vec(net.plane(), (0..20).map(|i| u8::from(i % 3 == 0)).collect());
        let (_, grad) = net.backward(&params, &img, &target, DICE_SMOOTH).unwrap();
        let h = 1e-5;
        for j in 0..params.len() {
            let mut up = params.clone();
            let mut dn = params.clone();
            up.values[j] += h;
            dn.values[j] -= h;
            let lu = dice_loss(net.forward(&up, &img).unwrap().as_slice(), target.as_slice(), DICE_SMOOTH);
            let ld = dice_loss(net.forward(&dn, &img).unwrap().as_slice(), target.as_slice(), DICE_SMOOTH);
            let fd = (lu - ld) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-4f64.max(1e-3 * grad[j].abs()), "coord {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn doubled_sample_doubles_gradient() {
        let net = tiny(6, 6, vec![3, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(net.layout().clone(), &mut rng);
        let img: Vec<f32> = (0..36).map(|_| rng.gen()).collect();
        let target: Vec<u8> = (0..36).map(|i| u8::from(i % 5 == 0)).collect();
        let mut once = vec![0.0; params.len()];
        net.accumulate_grad(&params, &img, &target, DICE_SMOOTH, 1.0, &mut once);
        let mut twice = vec![0.0; params.len()];
        net.accumulate_grad(&params, &img, &target, DICE_SMOOTH, 1.0, &mut twice);
        net.accumulate_grad(&params, &img, &target, DICE_SMOOTH, 1.0, &mut twice);
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }
}
