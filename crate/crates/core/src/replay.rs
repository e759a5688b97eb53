//! Replay schemes: a FIFO bank of stored sample batches, and a VAE trained
//! on bank contents that replays by decoding fresh latents.
//!
//! The bank stores whole subsets as slots; eviction is strictly
//! first-in-first-out once `capacity` slots are full. Replay batches are
//! drawn with replacement from the pooled rows of every slot, so old and new
//! slots mix.
//!
//! The generative path trains at most `max_steps_per_epoch` VAE steps per
//! epoch (the budget resets at each epoch boundary) and never stores raw
//! samples beyond the bank it learns from.

use std::collections::VecDeque;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::nets::{sample_noise, ForwardMode, NetKind, Network};
use crate::optim::Adam;
use crate::param::{grads_to_vector, ParamNodes};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    slots: VecDeque<ArrayD<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "bank capacity must be positive");
        Self {
            capacity,
            slots: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_samples(&self) -> usize {
        self.slots.iter().map(|s| s.shape()[0]).sum()
    }

    pub fn slots(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.slots.iter()
    }

    pub fn restore_slots(&mut self, slots: Vec<ArrayD<f64>>) {
        assert!(slots.len() <= self.capacity);
        self.slots = slots.into();
    }

    /// Stores a subset of `batch` rows (chosen without replacement) as one
    /// slot, evicting the oldest slot when full.
    pub fn push_subset(
        &mut self,
        batch: &ArrayD<f64>,
        subset: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let n = batch.shape()[0];
        if subset == 0 || subset > n {
            return Err(Error::Config(format!(
                "bank subset size {subset} invalid for batch of {n}"
            )));
        }
        let idx = rand::seq::index::sample(rng, n, subset).into_vec();
        let slot = crate::data::gather_rows(batch, &idx);
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(slot);
        Ok(())
    }

    /// Draws `n` rows with replacement from the pooled slot contents;
    /// `None` while the bank is empty.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<ArrayD<f64>> {
        if self.slots.is_empty() || n == 0 {
            return None;
        }
        let counts: Vec<usize> = self.slots.iter().map(|s| s.shape()[0]).collect();
        let total: usize = counts.iter().sum();
        let sample_shape = self.slots[0].shape()[1..].to_vec();
        let sample_len: usize = sample_shape.iter().product();
        let mut out = Vec::with_capacity(n * sample_len);
        for _ in 0..n {
            let mut k = rng.random_range(0..total);
            let mut slot = 0;
            while k >= counts[slot] {
                k -= counts[slot];
                slot += 1;
            }
            let flat = self.slots[slot].as_slice().expect("contiguous slot");
            out.extend_from_slice(&flat[k * sample_len..(k + 1) * sample_len]);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&sample_shape);
        Some(ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap())
    }
}

/// Reparameterized latent draw `mu + exp(logvar / 2) * eps`.
pub fn reparam_node(g: &mut Graph, mu: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
    let half = g.scale(logvar, 0.5);
    let sigma = g.exp(half);
    let scaled = g.mul(sigma, eps);
    g.add(mu, scaled)
}

/// Gaussian-prior KL term, batch mean of
/// `-0.5 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn vae_kl_node(g: &mut Graph, mu: NodeId, logvar: NodeId) -> NodeId {
    let n = g.shape(mu)[0];
    let one_plus = g.add_scalar(logvar, 1.0);
    let musq = g.mul(mu, mu);
    let a = g.sub(one_plus, musq);
    let ev = g.exp(logvar);
    let b = g.sub(a, ev);
    let s = g.sum_all(b);
    g.scale(s, -0.5 / n as f64)
}

pub struct ElboNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
}

/// Builds the negative ELBO (reconstruction MSE plus prior KL) for a batch
/// `x` under fixed reparameterization noise `eps`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_nodes(
    g: &mut Graph,
    encoder: &Network,
    enc_p: &ParamNodes,
    decoder: &Network,
    dec_p: &ParamNodes,
    x: &ArrayD<f64>,
    eps: &ArrayD<f64>,
    mode: ForwardMode,
) -> Result<ElboNodes> {
    let n = x.shape()[0];
    let xn = g.leaf(x.clone());
    let (mu, logvar) = encoder.forward_gauss_nodes(g, enc_p, xn, mode)?;
    let epsn = g.leaf(eps.clone());
    let z = reparam_node(g, mu, logvar, epsn);
    let recon = decoder.forward_nodes(g, dec_p, z, mode)?;
    let d = g.sub(recon, xn);
    let sq = g.mul(d, d);
    let ssum = g.sum_all(sq);
    let recon_loss = g.scale(ssum, 1.0 / n as f64);
    let kl = vae_kl_node(g, mu, logvar);
    let total = g.add(recon_loss, kl);
    Ok(ElboNodes {
        total,
        recon: recon_loss,
        kl,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct VaeStepStats {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

pub struct GenerativeReplay {
    pub encoder: Network,
    pub decoder: Network,
    pub enc_opt: Adam,
    pub dec_opt: Adam,
    steps_this_epoch: usize,
    max_steps_per_epoch: usize,
}

impl GenerativeReplay {
    pub fn new(
        encoder: Network,
        decoder: Network,
        lr: f64,
        max_steps_per_epoch: usize,
    ) -> Result<Self> {
        if encoder.spec.kind != NetKind::VaeEncoder || decoder.spec.kind != NetKind::Generator {
            return Err(Error::Config(
                "generative replay needs a vae_encoder and a generator-shaped decoder".into(),
            ));
        }
        if encoder.spec.output_dim != decoder.spec.noise_dim {
            return Err(Error::Config(format!(
                "encoder latent {} must match decoder input {}",
                encoder.spec.output_dim, decoder.spec.noise_dim
            )));
        }
        if encoder.spec.input_shape != decoder.spec.input_shape {
            return Err(Error::Config(
                "encoder and decoder must agree on the sample shape".into(),
            ));
        }
        let enc_opt = Adam::new(encoder.layout.clone(), lr);
        let dec_opt = Adam::new(decoder.layout.clone(), lr);
        Ok(Self {
            encoder,
            decoder,
            enc_opt,
            dec_opt,
            steps_this_epoch: 0,
            max_steps_per_epoch,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.spec.noise_dim
    }

    /// Resets the per-epoch training budget.
    pub fn begin_epoch(&mut self) {
        self.steps_this_epoch = 0;
    }

    pub fn can_train(&self) -> bool {
        self.steps_this_epoch < self.max_steps_per_epoch
    }

    pub fn steps_this_epoch(&self) -> usize {
        self.steps_this_epoch
    }

    /// One ELBO descent step on `x`. Fails when the epoch budget is spent;
    /// callers gate on [`GenerativeReplay::can_train`].
    pub fn train_step(&mut self, x: &ArrayD<f64>, rng: &mut ChaCha8Rng) -> Result<VaeStepStats> {
        if !self.can_train() {
            return Err(Error::Config(
                "generative replay budget for this epoch is spent".into(),
            ));
        }
        let n = x.shape()[0];
        let eps = sample_noise(n, self.latent_dim(), rng);
        let mut g = Graph::new();
        let enc_p = self.encoder.inject_params(&mut g);
        let dec_p = self.decoder.inject_params(&mut g);
        let elbo = elbo_nodes(
            &mut g,
            &self.encoder,
            &enc_p,
            &self.decoder,
            &dec_p,
            x,
            &eps,
            ForwardMode::Train { update_state: true },
        )?;
        let mut wrt = enc_p.nodes.clone();
        wrt.extend_from_slice(&dec_p.nodes);
        let grads = g.grad(elbo.total, &wrt);
        let (enc_grads, dec_grads) = grads.split_at(enc_p.nodes.len());
        let enc_gv = grads_to_vector(&g, &self.encoder.layout, enc_grads);
        let dec_gv = grads_to_vector(&g, &self.decoder.layout, dec_grads);
        let stats = VaeStepStats {
            total: g.scalar_value(elbo.total),
            recon: g.scalar_value(elbo.recon),
            kl: g.scalar_value(elbo.kl),
        };
        if !stats.total.is_finite() {
            return Err(Error::Numeric(format!(
                "vae objective diverged: {}",
                stats.total
            )));
        }
        self.enc_opt.step(&mut self.encoder.params, &enc_gv);
        self.dec_opt.step(&mut self.decoder.params, &dec_gv);
        self.steps_this_epoch += 1;
        Ok(stats)
    }

    /// Decodes `n` fresh latents into replay samples.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<ArrayD<f64>> {
        let z = sample_noise(n, self.latent_dim(), rng);
        self.decoder.forward_values(
            &z,
            ForwardMode::Train {
                update_state: false,
            },
        )
    }
}
