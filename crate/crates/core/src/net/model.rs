use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, maxpool2x2, relu, relu_backward, softmax_per_pixel, unpool2x2,
    unpool2x2_backward, PoolIndices,
};
use super::tensor::Tensor;
use crate::balance::ClassWeights;
use crate::error::{Error, Result};
use crate::imgcore::class;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub kernel: usize,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        BlockConfig { channels, kernel: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_blocks: Vec<BlockConfig>,
    pub pool_factor: usize,
    pub seed: u64,
    pub class_weights: ClassWeights,
    /// Per-channel input standardization `(x - mean) / std`; empty means
    /// inputs are used as given.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            num_classes: class::COUNT,
            encoder_blocks: vec![BlockConfig::new(16), BlockConfig::new(32)],
            pool_factor: 2,
            seed: 0,
            class_weights: ClassWeights::uniform(),
            input_mean: Vec::new(),
            input_std: Vec::new(),
        }
    }
}

impl NetworkConfig {
    pub fn with_in_channels(mut self, in_channels: usize) -> Self {
        self.in_channels = in_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be at least 1".into()));
        }
        if self.num_classes != class::COUNT {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be {}, got {}",
                class::COUNT,
                self.num_classes
            )));
        }
        if self.pool_factor != 2 {
            return Err(Error::InvalidConfig(format!(
                "only 2x2 pooling is supported, got factor {}",
                self.pool_factor
            )));
        }
        if self.encoder_blocks.is_empty() {
            return Err(Error::InvalidConfig("at least one encoder block is required".into()));
        }
        for b in &self.encoder_blocks {
            if b.channels == 0 || b.kernel % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "encoder block needs channels >= 1 and an odd kernel, got {b:?}"
                )));
            }
        }
        let norm_ok = (self.input_mean.is_empty() && self.input_std.is_empty())
            || (self.input_mean.len() == self.in_channels
                && self.input_std.len() == self.in_channels
                && self.input_mean.iter().all(|m| m.is_finite())
                && self.input_std.iter().all(|s| s.is_finite() && *s > 0.0));
        if !norm_ok {
            return Err(Error::InvalidConfig(format!(
                "input normalization needs {} finite means and positive stds",
                self.in_channels
            )));
        }
        if self.class_weights.w.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("class weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn required_multiple(&self) -> usize {
        1 << self.encoder_blocks.len()
    }

    /// `(out_channels, in_channels, kernel)` of every convolution in
    /// execution order: encoder, mirrored decoder, classifier.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        let blocks = &self.encoder_blocks;
        let mut shapes = Vec::with_capacity(2 * blocks.len() + 1);
        let mut cin = self.in_channels;
        for b in blocks {
            shapes.push((b.channels, cin, b.kernel));
            cin = b.channels;
        }
        for i in (0..blocks.len()).rev() {
            let out = blocks[i.saturating_sub(1)].channels;
            shapes.push((out, blocks[i].channels, blocks[i].kernel));
        }
        shapes.push((self.num_classes, blocks[0].channels, blocks[0].kernel));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

enum Step {
    Conv { layer: usize, input: Tensor },
    Relu { input: Tensor },
    Pool { slot: usize },
    Unpool { slot: usize },
}

/// Activations recorded by [`Network::forward_train`] for the backward pass.
pub struct Tape {
    steps: Vec<Step>,
    pools: Vec<PoolIndices>,
}

/// Encoder-decoder with index-linked unpooling.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<LayerParams>,
}

impl Network {
    /// He-uniform weights from `config.seed`, zero biases.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(cout, cin, k)| {
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                LayerParams {
                    weight: Tensor::from_fn([cout, cin, k, k], |_| rng.gen_range(-bound..bound)),
                    bias: vec![0.0; cout],
                }
            })
            .collect();
        Ok(Network { config, layers })
    }

    pub fn from_layers(config: NetworkConfig, layers: Vec<LayerParams>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Shape(format!(
                "config describes {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((cout, cin, k), l)) in shapes.iter().zip(&layers).enumerate() {
            l.weight
                .ensure_shape([*cout, *cin, *k, *k], &format!("layer {i} weight"))?;
            if l.bias.len() != *cout {
                return Err(Error::Shape(format!(
                    "layer {i} bias: expected {cout}, got {}",
                    l.bias.len()
                )));
            }
        }
        Ok(Network { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn set_class_weights(&mut self, weights: ClassWeights) {
        self.config.class_weights = weights;
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        let m = self.config.required_multiple();
        if !x.height().is_multiple_of(m) || !x.width().is_multiple_of(m) {
            return Err(Error::DimensionMismatch(format!(
                "input {}x{} must have both dims divisible by {m}",
                x.width(),
                x.height()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        if self.config.input_mean.is_empty() {
            return out;
        }
        let plane = x.height() * x.width();
        for n in 0..x.batch() {
            let item = out.item_mut(n);
            for (c, chunk) in item.chunks_exact_mut(plane).enumerate() {
                let (m, s) = (self.config.input_mean[c], self.config.input_std[c]);
                for v in chunk {
                    *v = (*v - m) / s;
                }
            }
        }
        out
    }

    fn run(&self, x: &Tensor, mut tape: Option<&mut Tape>) -> Result<Tensor> {
        self.check_input(x)?;
        let nb = self.config.encoder_blocks.len();
        let mut pools = Vec::with_capacity(nb);
        let mut cur = self.normalize(x);
        let record = |step: Step, tape: &mut Option<&mut Tape>| {
            if let Some(t) = tape.as_deref_mut() {
                t.steps.push(step);
            }
        };
        let conv = |layer: usize, input: &Tensor| {
            let l = &self.layers[layer];
            conv2d_forward(input, &l.weight, &l.bias)
        };

        for b in 0..nb {
            let pre = conv(b, &cur)?;
            record(Step::Conv { layer: b, input: cur }, &mut tape);
            let act = relu(&pre);
            record(Step::Relu { input: pre }, &mut tape);
            let (pooled, idx) = maxpool2x2(&act)?;
            record(Step::Pool { slot: b }, &mut tape);
            pools.push(idx);
            cur = pooled;
        }
        for (d, b) in (0..nb).rev().enumerate() {
            let up = unpool2x2(&cur, &pools[b])?;
            record(Step::Unpool { slot: b }, &mut tape);
            let layer = nb + d;
            let pre = conv(layer, &up)?;
            record(Step::Conv { layer, input: up }, &mut tape);
            cur = relu(&pre);
            record(Step::Relu { input: pre }, &mut tape);
        }
        let logits = conv(2 * nb, &cur)?;
        record(Step::Conv { layer: 2 * nb, input: cur }, &mut tape);
        if let Some(t) = tape {
            t.pools = pools;
        }
        Ok(logits)
    }

    /// Raw class scores before softmax.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        let mut tape = Tape {
            steps: Vec::new(),
            pools: Vec::new(),
        };
        let logits = self.run(x, Some(&mut tape))?;
        Ok((logits, tape))
    }

    /// Per-pixel class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_per_pixel(&self.forward(x)?))
    }

    /// Parameter gradients given the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, tape: Tape, grad_logits: &Tensor) -> Result<Vec<LayerParams>> {
        let mut grads: Vec<LayerParams> = self.layers.iter().map(LayerParams::zeros_like).collect();
        let mut g = grad_logits.clone();
        for step in tape.steps.into_iter().rev() {
            g = match step {
                Step::Conv { layer, input } => {
                    let (gx, gw, gb) = conv2d_backward(&input, &self.layers[layer].weight, &g)?;
                    grads[layer] = LayerParams {
                        weight: gw,
                        bias: gb,
                    };
                    gx
                }
                Step::Relu { input } => relu_backward(&input, &g)?,
                Step::Pool { slot } => unpool2x2(&g, &tape.pools[slot])?,
                Step::Unpool { slot } => unpool2x2_backward(&g, &tape.pools[slot])?,
            };
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::layers::weighted_cross_entropy;

    fn tiny_config(in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            encoder_blocks: vec![BlockConfig::new(3), BlockConfig::new(4)],
            seed: 11,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_layer_shapes_mirror_the_encoder() {
        let shapes = NetworkConfig::default().layer_shapes();
        assert_eq!(
            shapes,
            vec![(16, 3, 3), (32, 16, 3), (16, 32, 3), (16, 16, 3), (3, 16, 3)]
        );
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::new(tiny_config(3)).unwrap();
        let b = Network::new(tiny_config(3)).unwrap();
        assert_eq!(a, b);
        let c = Network::new(NetworkConfig {
            seed: 12,
            ..tiny_config(3)
        })
        .unwrap();
        assert_ne!(a, c);
        for (l, (_, cin, k)) in a.layers().iter().zip(a.config().layer_shapes()) {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn any_channel_count_runs() {
        for c in 1..=3 {
            let net = Network::new(tiny_config(c)).unwrap();
            let x = Tensor::from_fn([2, c, 8, 4], |i| (i as f64 * 0.37).sin());
            let p = net.predict(&x).unwrap();
            assert_eq!(p.shape(), [2, 3, 8, 4]);
            assert!(p.is_finite());
        }
    }

    #[test]
    fn input_validation() {
        let net = Network::new(tiny_config(2)).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros([1, 3, 8, 8])),
            Err(Error::Shape(_))
        ));
        let err = net.forward(&Tensor::zeros([1, 2, 8, 6])).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"));
    }

    #[test]
    fn rejects_mismatched_layers() {
        let net = Network::new(tiny_config(3)).unwrap();
        let mut layers = net.layers().to_vec();
        layers.pop();
        assert!(Network::from_layers(tiny_config(3), layers).is_err());
        assert!(Network::from_layers(tiny_config(1), net.layers().to_vec()).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(Network::new(tiny_config(0)).is_err());
        let mut cfg = tiny_config(1);
        cfg.pool_factor = 3;
        assert!(Network::new(cfg).is_err());
        let mut cfg = tiny_config(1);
        cfg.encoder_blocks.clear();
        assert!(Network::new(cfg).is_err());
    }

    /// End-to-end gradient of the weighted loss against central differences.
    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut cfg = tiny_config(2);
        cfg.class_weights.w = [0.5, 1.0, 2.0];
        let mut net = Network::new(cfg.clone()).unwrap();
        // zero biases would leave pre-activations exactly on the ReLU kink
        // wherever the sparse unpooled input is empty
        for (li, l) in net.layers_mut().iter_mut().enumerate() {
            for (bi, b) in l.bias.iter_mut().enumerate() {
                *b = 0.05 + 0.01 * ((li * 3 + bi) % 5) as f64;
            }
        }
        let x = Tensor::from_fn([2, 2, 4, 4], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.3);
        let targets: Vec<u8> = (0..32).map(|i| ((i * 5) % 3) as u8).collect();
        let w = cfg.class_weights.w;
        let loss = |n: &Network| {
            let p = n.predict(&x).unwrap();
            weighted_cross_entropy(&p, &targets, &w).unwrap().0
        };
        let (logits, tape) = net.forward_train(&x).unwrap();
        let (_, g) = weighted_cross_entropy(&softmax_per_pixel(&logits), &targets, &w).unwrap();
        let grads = net.backward(tape, &g).unwrap();

        let eps = 1e-5;
        let mut checked = 0;
        for li in 0..net.layers().len() {
            for wi in (0..net.layers()[li].weight.len()).step_by(5) {
                let mut plus = net.clone();
                plus.layers_mut()[li].weight.data_mut()[wi] += eps;
                let mut minus = net.clone();
                minus.layers_mut()[li].weight.data_mut()[wi] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = grads[li].weight.data()[wi];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-3, "layer {li} w{wi}: {fd} vs {an}");
                checked += 1;
            }
            for bi in 0..net.layers()[li].bias.len() {
                let mut plus = net.clone();
                plus.layers_mut()[li].bias[bi] += eps;
                let mut minus = net.clone();
                minus.layers_mut()[li].bias[bi] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = grads[li].bias[bi];
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-3, "layer {li} b{bi}: {fd} vs {an}");
            }
        }
        assert!(checked > 20);
    }
}
