//! Small neural building blocks on top of candle.
//!
//! All parameters are `f64` on the CPU and are initialized from a seeded
//! ChaCha stream so that a model is a pure function of its config and seed.
//! Dropout masks come from the same kind of stream, which is passed in
//! through [`Ctx`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;
pub const DEVICE: Device = Device::Cpu;

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let var = Var::from_vec(values, shape, &DEVICE)?;
        let t = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::Checkpoint(format!("parameter {name} defined twice")));
        }
        Ok(t)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of all values.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let value = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if value.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    value.dims()
                )));
            }
            var.set(&value.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path.as_ref())?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let values = candle_core::safetensors::load(path, &DEVICE)?;
        self.restore(&values)
    }
}

/// Forward-pass context: training mode carries the dropout RNG.
pub struct Ctx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
    p: f64,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Ctx { rng: None, p: 0.0 }
    }

    pub fn train(rng: &'a mut ChaCha8Rng, dropout: f64) -> Self {
        Ctx {
            rng: Some(rng),
            p: dropout,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity in eval mode or when the rate is zero.
    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.p;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), &DEVICE)?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (1.0 / input as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[input, output], bound, rng)?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[output], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.constant(format!("{name}.weight"), &[input, output], 0.0)?,
            bias: Some(store.constant(format!("{name}.bias"), &[output], 0.0)?),
        })
    }

    /// Square map without bias, initialized to the identity plus small
    /// uniform noise.
    pub fn near_identity(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 0.1 / (dim as f64).sqrt();
        let values = (0..dim * dim)
            .map(|i| rng.random_range(-bound..=bound) + if i % (dim + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        let weight = store.insert(format!("{name}.weight"), values, &[dim, dim])?;
        Ok(Linear { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// `x` is `[n, input]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.constant(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Row-wise softmax over the last dimension, shifted by the row max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}

/// Scaled dot-product attention of `q [lq, d]` over `k, v [lk, d]`.
/// `mask` is added to the logits before the softmax.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64, mask: Option<&Tensor>) -> Result<Tensor> {
    let mut logits = (q.matmul(&k.t()?)? * scale)?;
    if let Some(m) = mask {
        logits = logits.broadcast_add(m)?;
    }
    Ok(softmax_last(&logits)?.matmul(v)?)
}

/// Additive causal mask for `n` positions.
pub fn causal_mask(n: usize) -> Result<Tensor> {
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(values, (n, n), &DEVICE)?)
}

pub fn ids_tensor(ids: &[u32]) -> Result<Tensor> {
    Ok(Tensor::new(ids, &DEVICE)?)
}

pub fn to_vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.sum(0)?.to_scalar::<f64>()?)
}

/// One analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|g - fd| / max(|g|, |fd|, 1e-6)`.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-6)
    }
}

/// Compares backprop gradients of `loss` with central differences at
/// `samples` random entries of every parameter. Parameter values are
/// restored afterwards.
pub fn check_gradients<F>(store: &ParamStore, loss: F, samples: usize, h: f64, seed: u64) -> Result<Vec<GradCheck>>
where
    F: Fn() -> Result<Tensor>,
{
    use rand::SeedableRng;
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, var) in store.named() {
        let shape = var.shape().clone();
        let original = to_vec1(var.as_tensor())?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec1(g)?,
            None => vec![0.0; original.len()],
        };
        let eval_at = |index: usize, value: f64| -> Result<f64> {
            let mut v = original.clone();
            v[index] = value;
            var.set(&Tensor::from_vec(v, &shape, &DEVICE)?)?;
            scalar(&loss()?)
        };
        for _ in 0..samples {
            let index = rng.random_range(0..original.len());
            let plus = eval_at(index, original[index] + h)?;
            let minus = eval_at(index, original[index] - h)?;
            out.push(GradCheck {
                param: name.to_string(),
                index,
                analytic: analytic[index],
                numeric: (plus - minus) / (2.0 * h),
            });
        }
        var.set(&Tensor::from_vec(original, &shape, &DEVICE)?)?;
    }
    Ok(out)
}


#[cfg(test)]
mod dropout_tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn train_dropout_is_seeded_and_rescales() {
        let x = Tensor::ones((1, 1000), DTYPE, &DEVICE).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            to_vec1(&Ctx::train(&mut rng, 0.5).dropout(&x).unwrap()).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = a.iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
