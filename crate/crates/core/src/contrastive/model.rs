//! Convolutional encoder and MLP projector.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Tape, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each conv block; the last one is the representation size.
    pub channels: Vec<usize>,
    /// Input images must be `resolution x resolution`.
    pub resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![32, 64, 128, 256],
            resolution: 32,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid encoder channels {:?}", self.channels)));
        }
        if self.resolution % (1 << self.channels.len()) != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{} for {} downsampling blocks",
                self.resolution,
                self.channels.len(),
                self.channels.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            output: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, differentiable.
    Train,
    /// Running statistics, deterministic.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ConvBlock<F: Element> {
    pub weight: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Encoder<F: Element = f32> {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock<F>>,
}

fn he_normal<F: Element, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| F::c(dist.sample(rng))).collect()).expect("shape matches")
}

impl<F: Element> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            blocks.push(ConvBlock {
                weight: he_normal(rng, &[cout, cin, 3, 3], cin * 9),
                gamma: Tensor::ones(&[cout]),
                beta: Tensor::zeros(&[cout]),
                running_mean: vec![F::zero(); cout],
                running_var: vec![F::one(); cout],
            });
            cin = cout;
        }
        Ok(Self { config, blocks })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight, &b.gamma, &b.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.gamma, &mut b.beta])
            .collect()
    }

    /// Copy whose trainable tensors are leaves on `tape`.
    pub fn attach(&self, tape: &Tape<F>) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            *p = tape.leaf(&p.detach());
        }
        out
    }

    fn check_input(&self, images: &Tensor<F>) -> Result<()> {
        let c = &self.config;
        match images.shape() {
            [_, ch, h, w] if *ch == c.in_channels && *h == c.resolution && *w == c.resolution => Ok(()),
            s => Err(Error::shape(
                "encode",
                s,
                &[0, c.in_channels, c.resolution, c.resolution],
            )),
        }
    }

    /// `[N, C, R, R] -> [N, d]`. Train mode also returns each block's batch statistics.
    pub fn forward(&self, images: &Tensor<F>, mode: Mode) -> Result<(Tensor<F>, Vec<BatchStats<F>>)> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut stats = Vec::new();
        for b in &self.blocks {
            let y = x.conv2d(&b.weight, None, 1, 1)?;
            let y = match mode {
                Mode::Train => {
                    let (y, s) = y.batch_norm_train(&b.gamma, &b.beta, F::c(BN_EPS))?;
                    stats.push(s);
                    y
                }
                Mode::Eval => y.batch_norm_eval(&b.gamma, &b.beta, &b.running_mean, &b.running_var, F::c(BN_EPS))?,
            };
            x = y.relu().avg_pool2d(2)?;
        }
        let z = x.mean_axes(&[2, 3], false)?;
        Ok((z, stats))
    }

    /// Eval-mode representations, off any tape.
    pub fn encode(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward(&images.detach(), Mode::Eval)?.0)
    }

    /// Encodes in chunks to bound memory.
    pub fn encode_batched(&self, images: &Tensor<F>, chunk: usize) -> Result<Tensor<F>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            parts.push(self.encode(&images.narrow(start, len)?)?);
            start += len;
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, self.output_dim()]));
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>())
    }

    /// Exponential moving average of the batch statistics of a forward pass
    /// over `batch` images (variance unbiased).
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>], batch: usize, momentum: f64) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::invalid("batch statistics do not match the encoder blocks"));
        }
        let counts = self.stat_counts(batch);
        for ((b, s), count) in self.blocks.iter_mut().zip(stats).zip(counts) {
            let bessel = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for (c, (rm, rv)) in b.running_mean.iter_mut().zip(b.running_var.iter_mut()).enumerate() {
                *rm = F::c((1.0 - momentum) * rm.f64() + momentum * s.mean[c].f64());
                *rv = F::c((1.0 - momentum) * rv.f64() + momentum * s.var[c].f64() * bessel);
            }
        }
        Ok(())
    }

    fn stat_counts(&self, batch: usize) -> Vec<usize> {
        let mut side = self.config.resolution;
        self.blocks
            .iter()
            .map(|_| {
                let n = batch * side * side;
                side /= 2;
                n
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F: Element> {
    /// `[in, out]`.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Linear<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let n = input * output;
        let w = (0..n).map(|_| F::c(rng.random_range(-bound..bound))).collect();
        let b = (0..output).map(|_| F::c(rng.random_range(-bound..bound))).collect();
        Self {
            weight: Tensor::new(&[input, output], w).expect("shape matches"),
            bias: Tensor::new(&[output], b).expect("shape matches"),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Projector<F: Element = f32> {
    pub config: ProjectorConfig,
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

impl<F: Element> Projector<F> {
    pub fn new<R: Rng + ?Sized>(input: usize, config: ProjectorConfig, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(rng, input, config.hidden),
            output: Linear::new(rng, config.hidden, config.output),
            config,
        }
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        vec![&self.hidden.weight, &self.hidden.bias, &self.output.weight, &self.output.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    pub fn attach(&self, tape: &Tape<F>) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            *p = tape.leaf(&p.detach());
        }
        out
    }

    /// Unnormalised MLP output.
    pub fn forward_raw(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.output.forward(&self.hidden.forward(z)?.relu())
    }

    /// Unit-norm embeddings.
    pub fn project(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.forward_raw(z)?.l2_normalize(1, F::c(1e-12))
    }
}

/// Encoder plus projector.
#[derive(Debug, Clone)]
pub struct SimClr<F: Element = f32> {
    pub encoder: Encoder<F>,
    pub projector: Projector<F>,
}

impl<F: Element> SimClr<F> {
    pub fn new<R: Rng + ?Sized>(encoder: EncoderConfig, projector: ProjectorConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(encoder, rng)?;
        let projector = Projector::new(encoder.output_dim(), projector, rng);
        Ok(Self { encoder, projector })
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut p = self.encoder.params();
        p.extend(self.projector.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.projector.params_mut());
        p
    }

    pub fn attach(&self, tape: &Tape<F>) -> Self {
        Self {
            encoder: self.encoder.attach(tape),
            projector: self.projector.attach(tape),
        }
    }

    /// Flat copy of every parameter and running statistic, for equality checks.
    pub fn state_vector(&self) -> Vec<F> {
        let mut v: Vec<F> = self.params().iter().flat_map(|p| p.data().to_vec()).collect();
        for b in &self.encoder.blocks {
            v.extend_from_slice(&b.running_mean);
            v.extend_from_slice(&b.running_var);
        }
        v
    }

    pub fn all_finite(&self) -> bool {
        self.state_vector().iter().all(|v| v.is_finite())
    }
}
