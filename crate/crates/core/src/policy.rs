//! Diagonal-Gaussian policies with a feed-forward mean network.

use std::f64::consts::PI;

use metaadapt_autodiff::{Array, Bindings, Graph, NodeId};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Ordered `(name, shape)` list describing a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, Vec<usize>)>,
}

impl Manifest {
    pub fn new(entries: Vec<(String, Vec<usize>)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// A parameter snapshot: manifest plus flat values in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    manifest: Manifest,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn unflatten(manifest: Manifest, values: Vec<f64>) -> Result<Self> {
        if manifest.total_len() != values.len() {
            return Err(Error::Shape(format!(
                "manifest needs {} values, got {}",
                manifest.total_len(),
                values.len()
            )));
        }
        Ok(Self { manifest, values })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(name, shape, values)` per tensor.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        let mut offset = 0;
        self.manifest.entries.iter().map(move |(name, shape)| {
            let n: usize = shape.iter().product();
            let slice = &self.values[offset..offset + n];
            offset += n;
            (name.as_str(), shape.as_slice(), slice)
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors().find(|(n, _, _)| *n == name).map(|(_, _, v)| v)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::unflatten(self.manifest.clone(), values)
    }

    /// Hex SHA-256 over the manifest and the bit patterns of the values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape) in self.manifest.entries() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// One parameter node per tensor, bound to this snapshot.
    pub fn bind(&self, graph: &mut Graph, bindings: &mut Bindings) -> Result<Vec<NodeId>> {
        let mut nodes = Vec::with_capacity(self.manifest.entries.len());
        for (name, shape, values) in self.tensors() {
            let node = graph.parameter(name, shape)?;
            bindings.bind(node, Array::new(shape.to_vec(), values.to_vec())?);
            nodes.push(node);
        }
        Ok(nodes)
    }

    /// Snapshot from evaluated tensors laid out per this manifest.
    pub fn from_arrays(manifest: &Manifest, arrays: Vec<Array>) -> Result<Self> {
        let values: Vec<f64> = arrays.into_iter().flat_map(Array::into_data).collect();
        Self::unflatten(manifest.clone(), values)
    }
}

/// Anything that yields differentiable per-sample log-densities.
pub trait PolicyModel: Sync {
    fn manifest(&self) -> Manifest;

    /// Log-densities `[batch, 1]` of the action rows given the observation rows,
    /// with `params` holding one node per manifest tensor.
    fn log_prob_batch(
        &self,
        graph: &mut Graph,
        params: &[NodeId],
        observations: &Array,
        actions: &Array,
    ) -> Result<NodeId>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ActionDistribution {
    /// `mean + std * eps` with `eps ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps
            })
            .collect()
    }
}

/// Feed-forward tanh network for the mean and a state-independent log-std.
/// The output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaussianMlp {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
}

impl GaussianMlp {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        if obs_dim == 0 || action_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument("policy dimensions must be >= 1".into()));
        }
        Ok(Self {
            obs_dim,
            action_dim,
            hidden,
        })
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.obs_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.action_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, constant log-std.
    pub fn init_params<R: Rng + ?Sized>(&self, log_std_init: f64, rng: &mut R) -> PolicyParams {
        let mut values = Vec::with_capacity(self.manifest().total_len());
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        values.extend(std::iter::repeat_n(log_std_init, self.action_dim));
        PolicyParams::unflatten(self.manifest(), values).expect("manifest-sized")
    }

    fn check(&self, params: &PolicyParams) -> Result<()> {
        if params.manifest() != &self.manifest() {
            return Err(Error::Shape("parameters do not match the policy architecture".into()));
        }
        Ok(())
    }

    /// Numeric forward pass for a single observation.
    pub fn action_distribution(&self, params: &PolicyParams, obs: &[f64]) -> Result<ActionDistribution> {
        self.check(params)?;
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!(
                "observation has {} entries, expected {}",
                obs.len(),
                self.obs_dim
            )));
        }
        let mut tensors = params.tensors();
        let mut h = obs.to_vec();
        let layers = self.layer_dims();
        for (li, (fan_in, fan_out)) in layers.iter().copied().enumerate() {
            let (_, _, w) = tensors.next().expect("weight");
            let (_, _, b) = tensors.next().expect("bias");
            let mut out = b.to_vec();
            for (i, hi) in h.iter().enumerate().take(fan_in) {
                let row = &w[i * fan_out..(i + 1) * fan_out];
                for (o, wij) in out.iter_mut().zip(row) {
                    *o += hi * wij;
                }
            }
            if li + 1 < layers.len() {
                out.iter_mut().for_each(|x| *x = x.tanh());
            }
            h = out;
        }
        let (_, _, log_std) = tensors.next().expect("log_std");
        Ok(ActionDistribution {
            mean: h,
            std: log_std.iter().map(|l| l.exp()).collect(),
        })
    }

    /// Mean network applied to a batch of observation rows, `[batch, action_dim]`.
    pub fn mean_graph(&self, graph: &mut Graph, params: &[NodeId], observations: &Array) -> Result<NodeId> {
        let shape = observations.shape();
        if shape.len() != 2 || shape[1] != self.obs_dim {
            return Err(Error::Shape(format!(
                "observations {shape:?} do not have {} columns",
                self.obs_dim
            )));
        }
        let batch = shape[0];
        let layers = self.layer_dims();
        if params.len() != 2 * layers.len() + 1 {
            return Err(Error::Shape("wrong number of parameter tensors".into()));
        }
        let mut h = graph.constant(observations.clone());
        for (li, (_, fan_out)) in layers.iter().copied().enumerate() {
            let z = graph.matmul(h, params[2 * li])?;
            let b = graph.broadcast(params[2 * li + 1], &[batch, fan_out])?;
            let z = graph.add(z, b)?;
            h = if li + 1 < layers.len() { graph.tanh(z) } else { z };
        }
        Ok(h)
    }

    /// Log-density of one `(obs, action)` pair as a scalar node.
    pub fn log_prob(&self, graph: &mut Graph, params: &[NodeId], obs: &[f64], action: &[f64]) -> Result<NodeId> {
        let o = Array::matrix(1, obs.len(), obs.to_vec())?;
        let a = Array::matrix(1, action.len(), action.to_vec())?;
        let lp = self.log_prob_batch(graph, params, &o, &a)?;
        Ok(graph.to_scalar(lp)?)
    }
}

impl PolicyModel for GaussianMlp {
    fn manifest(&self) -> Manifest {
        let mut entries = Vec::new();
        for (li, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            entries.push((format!("layer{li}.weight"), vec![fan_in, fan_out]));
            entries.push((format!("layer{li}.bias"), vec![fan_out]));
        }
        entries.push(("log_std".to_string(), vec![self.action_dim]));
        Manifest::new(entries)
    }

    fn log_prob_batch(
        &self,
        graph: &mut Graph,
        params: &[NodeId],
        observations: &Array,
        actions: &Array,
    ) -> Result<NodeId> {
        let batch = observations.shape()[0];
        if actions.shape() != [batch, self.action_dim] {
            return Err(Error::Shape(format!(
                "actions {:?} do not match [{batch}, {}]",
                actions.shape(),
                self.action_dim
            )));
        }
        let mean = self.mean_graph(graph, params, observations)?;
        let log_std = *params.last().expect("log_std tensor");
        let log_std = graph.broadcast(log_std, &[batch, self.action_dim])?;
        let a = graph.constant(actions.clone());
        let diff = graph.sub(a, mean)?;
        let neg_log_std = graph.neg(log_std);
        let inv_std = graph.exp(neg_log_std);
        let z = graph.mul(diff, inv_std)?;
        let z2 = graph.square(z);
        let quad = graph.scale(z2, -0.5);
        let per_dim = graph.sub(quad, log_std)?;
        let per_dim = graph.shift(per_dim, -0.5 * (2.0 * PI).ln());
        if self.action_dim == 1 {
            return Ok(per_dim);
        }
        let ones = graph.constant(Array::filled(&[self.action_dim, 1], 1.0));
        Ok(graph.matmul(per_dim, ones)?)
    }
}
