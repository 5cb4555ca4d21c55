use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{softmax_per_pixel, weighted_cross_entropy};
use super::model::{Network, NetworkConfig};
use super::optim::{Sgd, TrainConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imgcore::{class, compute_ndvi, Band, BandImage, LabelMask, MultispectralFrame, ProbabilityMap};

/// Bands fed to a network with `in_channels` inputs, in channel order.
pub fn input_bands(in_channels: usize) -> Result<Vec<Band>> {
    match in_channels {
        1 => Ok(vec![Band::Nir]),
        2 => Ok(vec![Band::Nir, Band::Red]),
        3 => Ok(vec![Band::Nir, Band::Red, Band::Ndvi]),
        n => Err(Error::InvalidConfig(format!(
            "no band layout for {n} input channels (expected 1, 2 or 3)"
        ))),
    }
}

fn band_or_ndvi(frame: &MultispectralFrame, band: &Band) -> Result<BandImage> {
    if let Some(b) = frame.band(band) {
        return Ok(b.clone());
    }
    let missing = |b: &Band| Error::BandMismatch {
        expected: b.name().to_string(),
        found: format!("frame {} has no such band", frame.frame_id()),
    };
    if *band == Band::Ndvi {
        let nir = frame.band(&Band::Nir).ok_or_else(|| missing(&Band::Nir))?;
        let red = frame.band(&Band::Red).ok_or_else(|| missing(&Band::Red))?;
        return compute_ndvi(nir, red);
    }
    Err(missing(band))
}

/// `(1, in_channels, h, w)` network input; NDVI is derived when absent.
pub fn frame_to_tensor(frame: &MultispectralFrame, in_channels: usize) -> Result<Tensor> {
    let bands = input_bands(in_channels)?;
    let (w, h) = frame.dims();
    let mut data = Vec::with_capacity(bands.len() * (w * h) as usize);
    for b in &bands {
        data.extend_from_slice(band_or_ndvi(frame, b)?.data());
    }
    Tensor::new([1, bands.len(), h as usize, w as usize], data)
}

/// Converts one item of a softmax output into a validated map.
pub fn tensor_to_probability_map(probs: &Tensor, item: usize) -> Result<ProbabilityMap> {
    let [_, c, h, w] = probs.shape();
    let hw = h * w;
    let src = probs.item(item);
    let mut pixel_major = Vec::with_capacity(c * hw);
    for p in 0..hw {
        for k in 0..c {
            pixel_major.push(src[k * hw + p]);
        }
    }
    ProbabilityMap::new(w as u32, h as u32, c, pixel_major)
}

pub fn infer(frame: &MultispectralFrame, network: &Network) -> Result<ProbabilityMap> {
    let x = frame_to_tensor(frame, network.config().in_channels)?;
    tensor_to_probability_map(&network.predict(&x)?, 0)
}

pub fn argmax_labels(pm: &ProbabilityMap) -> LabelMask {
    pm.argmax_labels()
}

/// Training inputs stacked once up front.
pub struct TrainingSet {
    inputs: Vec<Tensor>,
    targets: Vec<Vec<u8>>,
}

impl TrainingSet {
    pub fn new(samples: &[(MultispectralFrame, LabelMask)], in_channels: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or(Error::EmptyInput("training set has no frames"))?;
        let dims = first.0.dims();
        let mut inputs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for (frame, mask) in samples {
            if frame.dims() != dims || mask.dims() != dims {
                return Err(Error::DimensionMismatch(format!(
                    "frame {} is {:?} with mask {:?}; training frames must all be {:?}",
                    frame.frame_id(),
                    frame.dims(),
                    mask.dims(),
                    dims
                )));
            }
            inputs.push(frame_to_tensor(frame, in_channels)?);
            targets.push(mask.labels().to_vec());
        }
        Ok(TrainingSet { inputs, targets })
    }

    /// Per-channel mean and standard deviation over every training pixel.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.inputs[0].channels();
        let plane = self.inputs[0].height() * self.inputs[0].width();
        let count = (plane * self.inputs.len()) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for t in &self.inputs {
            for (k, chunk) in t.data().chunks_exact(plane).enumerate() {
                mean[k] += chunk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for t in &self.inputs {
            for (k, chunk) in t.data().chunks_exact(plane).enumerate() {
                var[k] += chunk.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>();
            }
        }
        // a constant channel keeps unit scale
        let std = var
            .iter()
            .map(|v| (v / count).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        (mean, std)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Mean per-class pixel accuracy over the classes present in the batch.
    pub class_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<TrainRecord>,
}

impl TrainOutcome {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }

    pub fn class_accuracy_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.class_accuracy).collect()
    }
}

fn mean_class_accuracy(probs: &Tensor, targets: &[u8]) -> f64 {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut hit = [0u64; class::COUNT];
    let mut seen = [0u64; class::COUNT];
    for i in 0..n {
        let p = probs.item(i);
        for px in 0..hw {
            let y = targets[i * hw + px] as usize;
            let mut best = 0;
            for k in 1..c {
                if p[k * hw + px] > p[best * hw + px] {
                    best = k;
                }
            }
            seen[y] += 1;
            hit[y] += (best == y) as u64;
        }
    }
    let present: Vec<f64> = (0..class::COUNT)
        .filter(|&k| seen[k] > 0)
        .map(|k| hit[k] as f64 / seen[k] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

/// Minibatch SGD. Batches are drawn from a per-epoch shuffle seeded by
/// `seed`; a batch that runs past the end of an epoch continues into the
/// next shuffle. The final iteration is always recorded.
pub fn train(
    data: &TrainingSet,
    net_cfg: &NetworkConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set has no frames"));
    }
    if data.inputs[0].channels() != net_cfg.in_channels {
        return Err(Error::Shape(format!(
            "training inputs have {} channels, network expects {}",
            data.inputs[0].channels(),
            net_cfg.in_channels
        )));
    }
    let mut net_cfg = net_cfg.clone();
    if net_cfg.input_mean.is_empty() {
        (net_cfg.input_mean, net_cfg.input_std) = data.channel_stats();
    }
    let mut network = Network::new(net_cfg.clone())?;
    let mut sgd = Sgd::new(train_cfg.clone(), network.layers())?;
    let weights = net_cfg.class_weights.w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::new();

    for it in 1..=train_cfg.max_iterations {
        let mut picked = Vec::with_capacity(train_cfg.batch_size);
        while picked.len() < train_cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let x = Tensor::stack(&picked.iter().map(|&i| &data.inputs[i]).collect::<Vec<_>>())?;
        let targets: Vec<u8> = picked
            .iter()
            .flat_map(|&i| data.targets[i].iter().copied())
            .collect();

        let (logits, tape) = network.forward_train(&x)?;
        let probs = softmax_per_pixel(&logits);
        let (loss, grad) = weighted_cross_entropy(&probs, &targets, &weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        if it % train_cfg.log_every == 0 || it == train_cfg.max_iterations {
            history.push(TrainRecord {
                iteration: it,
                loss,
                class_accuracy: mean_class_accuracy(&probs, &targets),
            });
        }
        let grads = network.backward(tape, &grad)?;
        sgd.step(network.layers_mut(), &grads);
    }
    Ok(TrainOutcome { network, history })
}
