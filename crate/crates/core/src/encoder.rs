//! Compact dilated convolutional encoder.
//!
//! Four `conv3×3 → relu` blocks. The default strides `[2, 2, 2, 1]` reduce
//! the spatial extent by 8, and the last two blocks are dilated so their
//! receptive field grows without further downsampling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const KERNEL_SIZE: usize = 3;
pub const REDUCTION: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub feature_dim: usize,
    pub block_channels: [usize; 4],
    pub dilations: [usize; 4],
    pub strides: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            feature_dim: 64,
            block_channels: [16, 32, 64, 64],
            dilations: [1, 1, 2, 4],
            strides: [2, 2, 2, 1],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.block_channels.contains(&0) {
            return Err(Error::invalid("encoder channel counts must be positive"));
        }
        if self.block_channels[3] != self.feature_dim {
            return Err(Error::invalid(format!(
                "last block has {} channels but feature_dim is {}",
                self.block_channels[3], self.feature_dim
            )));
        }
        if self.dilations.contains(&0) || self.strides.contains(&0) {
            return Err(Error::invalid("encoder strides and dilations must be ≥ 1"));
        }
        let reduction: usize = self.strides.iter().product();
        if reduction != REDUCTION {
            return Err(Error::invalid(format!(
                "encoder strides reduce by {reduction}, expected {REDUCTION}"
            )));
        }
        Ok(())
    }

    fn block_inputs(&self) -> [usize; 4] {
        let c = self.block_channels;
        [self.in_channels, c[0], c[1], c[2]]
    }

    /// Total number of scalar parameters (kernels plus biases).
    pub fn parameter_count(&self) -> usize {
        self.block_inputs()
            .iter()
            .zip(&self.block_channels)
            .map(|(&ci, &co)| co * ci * KERNEL_SIZE * KERNEL_SIZE + co)
            .sum()
    }
}

/// Named encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub config: EncoderConfig,
    params: BTreeMap<String, Tensor<T>>,
}

fn weight_name(block: usize) -> String {
    format!("block{block}.weight")
}

fn bias_name(block: usize) -> String {
    format!("block{block}.bias")
}

/// Kaiming-uniform kernels (bound `sqrt(6 / fan_in)`) and zero biases,
/// fully determined by `seed`.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (b, (&ci, &co)) in config.block_inputs().iter().zip(&config.block_channels).enumerate() {
        let fan_in = ci * KERNEL_SIZE * KERNEL_SIZE;
        let bound = (6.0 / fan_in as f64).sqrt();
        let kernel = Tensor::from_fn(&[co, ci, KERNEL_SIZE, KERNEL_SIZE], |_| {
            rng.gen_range(-bound..bound) as f32
        });
        params.insert(weight_name(b), kernel);
        params.insert(bias_name(b), Tensor::zeros(&[co]));
    }
    Ok(EncoderWeights {
        config: config.clone(),
        params,
    })
}

impl<T: Scalar> EncoderWeights<T> {
    /// Builds weights from named tensors, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} encoder parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => return Err(Error::invalid(format!("parameter {name} is not finite"))),
                Some(_) => {}
            }
        }
        Ok(EncoderWeights { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Records the weights on `tape`, as trainable parameters or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundEncoder {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundEncoder {
            config: self.config.clone(),
            vars,
        }
    }
}

fn expected_shapes(config: &EncoderConfig) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (b, (&ci, &co)) in config.block_inputs().iter().zip(&config.block_channels).enumerate() {
        out.insert(weight_name(b), vec![co, ci, KERNEL_SIZE, KERNEL_SIZE]);
        out.insert(bias_name(b), vec![co]);
    }
    out
}

/// Encoder parameters recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    config: EncoderConfig,
    vars: BTreeMap<String, Var>,
}

impl BoundEncoder {
    /// Wraps variables already on a tape; names and shapes are checked.
    pub fn from_vars<T: Scalar>(tape: &Tape<T>, config: EncoderConfig, vars: BTreeMap<String, Var>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if vars.len() != expected.len() {
            return Err(Error::shape(format!(
                "expected {} encoder parameters, got {}",
                expected.len(),
                vars.len()
            )));
        }
        for (name, shape) in &expected {
            let v = vars
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing encoder parameter {name}")))?;
            if tape.shape(*v) != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    tape.shape(*v)
                )));
            }
        }
        Ok(BoundEncoder { config, vars })
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Maps an image `[C, S, S']` to features `[D, S/8, S'/8]`.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::shape(format!(
                "encoder expects [{}, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        if !shape[1].is_multiple_of(REDUCTION) || !shape[2].is_multiple_of(REDUCTION) {
            return Err(Error::shape(format!(
                "image extent {}×{} is not divisible by {REDUCTION}",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        for b in 0..4 {
            let d = self.config.dilations[b];
            let pad = d * (KERNEL_SIZE - 1) / 2;
            x = tape.conv2d(x, self.vars[&weight_name(b)], self.config.strides[b], pad, d)?;
            x = tape.add_channel_bias(x, self.vars[&bias_name(b)])?;
            x = tape.relu(x);
        }
        Ok(x)
    }
}

/// One-shot forward pass without gradient tracking.
pub fn encode<T: Scalar>(weights: &EncoderWeights<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let y = bound.encode(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
