//! Mini-batch SGD with momentum, loss logging, and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoding::{decode_prediction, Decoded, GridEncoding};
use super::loss::{loss, LossWeights};
use super::net::{ArchConfig, Scalar, TinyNet};
use super::DetectorError;
use crate::image::{ColorSpace, ImageBuffer};
use crate::scene::{sample_rng, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Seeds both the weight init and the per-epoch shuffles.
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch: 16,
            seed: 17,
            weights: LossWeights::default(),
        }
    }
}

/// Mean per-sample loss parts over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_b: f64,
    pub l_d: f64,
    pub l_dbar: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub input: Vec<T>,
    pub encoding: GridEncoding,
}

/// Network input from an image of the configured size: gray or RGB planes.
pub fn image_to_input<T: Scalar>(img: &ImageBuffer, arch: &ArchConfig) -> Result<Vec<T>, DetectorError> {
    if img.width() != arch.input_size || img.height() != arch.input_size {
        return Err(DetectorError::ShapeMismatch {
            expected: arch.input_size * arch.input_size,
            got: img.width() * img.height(),
        });
    }
    let planes = match arch.in_channels {
        1 => img.to_gray(),
        3 if img.color_space() == ColorSpace::Rgb => img.clone(),
        3 => {
            let g = img.to_gray();
            ImageBuffer::from_planar(
                img.width(),
                img.height(),
                3,
                ColorSpace::Rgb,
                [g.data(), g.data(), g.data()].concat(),
            )?
        }
        c => return Err(DetectorError::InvalidArch(format!("{c} input channels"))),
    };
    Ok(planes
        .data()
        .iter()
        .map(|v| T::from_f64(*v).expect("representable"))
        .collect())
}

/// Loss and parameter gradient for one sample, accumulated into `grads`.
pub fn accumulate_sample<T: Scalar>(
    net: &TinyNet<T>,
    sample: &TrainSample<T>,
    weights: &LossWeights,
    grads: &mut [T],
) -> Result<super::loss::LossOutput, DetectorError> {
    let trace = net.forward_trace(&sample.input)?;
    let pred: Vec<f64> = trace.output.iter().map(|v| (*v).into()).collect();
    let out = loss(&pred, &sample.encoding, weights)?;
    let g: Vec<T> = out.grad.iter().map(|v| T::from_f64(*v).expect("finite")).collect();
    net.backward(&trace, &g, grads);
    Ok(out)
}

/// Train in place. Samples are visited in a seeded shuffle per epoch and
/// batch gradients are summed in that fixed order, so runs are reproducible.
pub fn train<T: Scalar>(
    net: &mut TinyNet<T>,
    samples: &[TrainSample<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(DetectorError::InvalidTrainConfig(format!("{cfg:?}")));
    }
    let n = samples.len();
    let mut velocity = vec![T::zero(); net.param_count()];
    let mut grads = vec![T::zero(); net.param_count()];
    let lr = T::from_f64(cfg.lr).expect("finite");
    let mu = T::from_f64(cfg.momentum).expect("finite");
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64));
        let (mut l_b, mut l_d, mut l_dbar, mut total) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            grads.iter_mut().for_each(|g| *g = T::zero());
            for &i in batch {
                let out = accumulate_sample(net, &samples[i], &cfg.weights, &mut grads)?;
                l_b += out.l_b;
                l_d += out.l_d;
                l_dbar += out.l_dbar;
                total += out.total;
            }
            if !total.is_finite() {
                return Err(DetectorError::DivergenceDetected(epoch));
            }
            let scale = T::from_f64(1.0 / batch.len() as f64).expect("finite");
            for ((p, v), g) in net.params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v = mu * *v + *g * scale;
                *p = *p - lr * *v;
            }
        }
        if net.params.iter().any(|p| !p.is_finite()) {
            return Err(DetectorError::DivergenceDetected(epoch));
        }
        let m = n as f64;
        let log = EpochLog {
            epoch,
            l_b: l_b / m,
            l_d: l_d / m,
            l_dbar: l_dbar / m,
            total: total / m,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

pub fn write_loss_csv(path: &Path, logs: &[EpochLog]) -> Result<(), DetectorError> {
    let mut out = String::from("epoch,l_B,l_d,l_dbar,total\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.l_b, l.l_d, l.l_dbar, l.total));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Decode the highest-confidence box for one image.
pub fn detect<T: Scalar>(net: &TinyNet<T>, img: &ImageBuffer) -> Result<Decoded, DetectorError> {
    let input = image_to_input(img, net.arch())?;
    let out = net.forward(&input)?;
    Ok(decode_prediction(&out, net.arch().grid))
}

/// Serialized network: architecture plus the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: ArchConfig,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_net<T: Scalar>(net: &TinyNet<T>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            arch: net.arch().clone(),
            params: net.params.iter().map(|p| (*p).into() as f32).collect(),
        }
    }

    pub fn to_net<T: Scalar>(&self) -> Result<TinyNet<T>, DetectorError> {
        let mut net = TinyNet::<T>::new(self.arch.clone())?;
        if net.param_count() != self.params.len() {
            return Err(DetectorError::ShapeMismatch {
                expected: net.param_count(),
                got: self.params.len(),
            });
        }
        for (p, v) in net.params.iter_mut().zip(&self.params) {
            *p = T::from_f32(*v).expect("representable");
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let f = fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let f = fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(DetectorError::SchemaVersion(ck.schema_version));
        }
        Ok(ck)
    }
}
