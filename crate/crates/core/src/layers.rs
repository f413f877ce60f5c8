//! Named parameter storage and the small set of layers the networks are
//! assembled from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{NormStats, ObservedStats, Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), each keyed by a unique slash-separated name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(contract_err!("parameter name {name:?} registered twice"));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.check_fresh(name)?;
        self.params.insert(name.to_string(), t.with_requires_grad(true));
        Ok(())
    }

    pub fn add_buffer(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        self.check_fresh(name)?;
        self.buffers.insert(name.to_string(), t);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter {name:?}"))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| contract_err!("unknown parameter {name:?}"))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| contract_err!("unknown buffer {name:?}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Every parameter and buffer by name, in sorted order.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| {
                let mut t = v.clone();
                t.zero_grad();
                (k.clone(), t)
            })
            .collect()
    }

    /// Overwrites every parameter and buffer from `tensors`; the first
    /// missing name or mismatched shape is reported.
    pub fn load_from(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, dst) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            let rg = dst.requires_grad();
            *dst = src.clone().with_requires_grad(rg);
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Flattens all parameters (sorted by name) into one vector.
    pub fn flatten_params(&self) -> Vec<T> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(contract_err!(
                "flat parameter vector has {} entries, store holds {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Blends observed batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, observed: &[(String, ObservedStats)]) -> Result<()> {
        for (prefix, stats) in observed {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}/{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| contract_err!("unknown buffer {name:?}"))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = T::of((1.0 - BN_MOMENTUM) * r.f64() + BN_MOMENTUM * v);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Forward-pass context: binds store entries onto a tape on first use and
/// records batch statistics for later running-average updates.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    trainable: bool,
    bound: BTreeMap<String, Var>,
    observed: Vec<(String, ObservedStats)>,
}

/// What a finished forward pass leaves behind.
#[derive(Debug, Default)]
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    pub observed: Vec<(String, ObservedStats)>,
}

impl Bound {
    /// Moves gradients from the tape into the matching store parameters.
    pub fn collect_grads<T: Element>(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &self.vars {
            if let Some(g) = tape.grad(v) {
                store.param_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

impl<'a, T: Element> Ctx<'a, T> {
    /// With `trainable == false` parameters enter the tape as constants.
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode, trainable: bool) -> Self {
        Ctx {
            tape,
            store,
            mode,
            trainable,
            bound: BTreeMap::new(),
            observed: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.param(name)?.clone();
        let v = if self.trainable {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.buffer(name)
    }

    pub fn finish(self) -> Bound {
        Bound {
            vars: self.bound,
            observed: self.observed,
        }
    }
}

/// Uniform fan-in scaled initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn fan_in_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = format!("{name}/w");
        store.add_param(&weight, fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng))?;
        let bias = if bias {
            let b = format!("{name}/b");
            store.add_param(&b, Tensor::zeros(&[cout]))?;
            Some(b)
        } else {
            None
        };
        Ok(Conv { weight, bias, stride, pad })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.p(&self.weight)?;
        let b = self.bias.as_deref().map(|b| ctx.p(b)).transpose()?;
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
}

impl BatchNorm {
    pub fn build<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        store.add_param(&format!("{name}/gamma"), Tensor::ones(&[channels]))?;
        store.add_param(&format!("{name}/beta"), Tensor::zeros(&[channels]))?;
        store.add_buffer(&format!("{name}/running_mean"), Tensor::zeros(&[channels]))?;
        store.add_buffer(&format!("{name}/running_var"), Tensor::ones(&[channels]))?;
        Ok(BatchNorm { prefix: name.to_string() })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.p(&format!("{}/gamma", self.prefix))?;
        let beta = ctx.p(&format!("{}/beta", self.prefix))?;
        match ctx.mode {
            Mode::Train => {
                let (y, obs) = ctx.tape.batch_norm(x, gamma, beta, BN_EPS, NormStats::Batch)?;
                if let Some(obs) = obs {
                    ctx.observed.push((self.prefix.clone(), obs));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.buffer(&format!("{}/running_mean", self.prefix))?.to_f64_vec();
                let var = ctx.buffer(&format!("{}/running_var", self.prefix))?.to_f64_vec();
                let (y, _) = ctx.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    BN_EPS,
                    NormStats::Fixed { mean: &mean, var: &var },
                )?;
                Ok(y)
            }
        }
    }
}

/// Basic residual block: two 3x3 convolutions with batch norm, an identity
/// or 1x1-projection skip, and a final relu.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn build<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv::build(store, rng, &format!("{name}/conv1"), cin, cout, 3, 1, 1, false)?,
            bn1: BatchNorm::build(store, &format!("{name}/bn1"), cout)?,
            conv2: Conv::build(store, rng, &format!("{name}/conv2"), cout, cout, 3, 1, 1, false)?,
            bn2: BatchNorm::build(store, &format!("{name}/bn2"), cout)?,
            skip: if cin != cout {
                Some(Conv::build(store, rng, &format!("{name}/skip"), cin, cout, 1, 1, 0, false)?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.tape.add(h, s)?;
        Ok(ctx.tape.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.add_param("a", Tensor::zeros(&[1])).is_err());
        assert!(store.add_buffer("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        ResBlock::build(&mut store, &mut rng, "r", 2, 3).unwrap();
        let flat = store.flatten_params();
        let mut other = store.clone();
        other.unflatten_params(&vec![0.0; flat.len()]).unwrap();
        other.unflatten_params(&flat).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut store = ParamStore::<f32>::new();
        BatchNorm::build(&mut store, "bn", 1).unwrap();
        let obs = ObservedStats { mean: vec![1.0], var: vec![3.0] };
        store.update_running_stats(&[("bn".into(), obs)]).unwrap();
        assert!((store.buffer("bn/running_mean").unwrap().item() - 0.1).abs() < 1e-7);
        assert!((store.buffer("bn/running_var").unwrap().item() - 1.2).abs() < 1e-6);
    }
}
