//! Parameter storage and the building blocks of the denoiser.
//!
//! Parameters are created from a seeded generator so that two models built
//! with the same seed are bitwise identical. Dropout draws its masks from
//! the forward context, never from a global generator.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2dConfig, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope { store: self, prefix: String::new() }
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params.insert(name, var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place, keeping its identity in the graph.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!("parameter '{name}': {:?} vs {:?}", var.dims(), value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Name-prefixing view used while building layers.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Scope { store: self.store, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.store.rng.random_range(-bound..bound)).collect();
        let name = self.name(leaf);
        self.store.insert(name, data, shape)
    }

    fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let name = self.name(leaf);
        self.store.insert(name, vec![value; n], shape)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Forward-pass state: training-mode dropout and optional activation taps.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    dropout_rng: Option<ChaCha8Rng>,
    taps: Option<BTreeMap<String, Tensor>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { dropout_rng: Some(rng), taps: None }
    }

    /// Eval mode that records named intermediate activations.
    pub fn capturing() -> Self {
        Self { dropout_rng: None, taps: Some(BTreeMap::new()) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub(crate) fn tap(&mut self, name: impl FnOnce() -> String, x: &Tensor) {
        if let Some(taps) = self.taps.as_mut() {
            taps.insert(name(), x.detach());
        }
    }

    pub fn take_taps(&mut self) -> BTreeMap<String, Tensor> {
        self.taps.take().unwrap_or_default()
    }

    pub fn into_rng(self) -> Option<ChaCha8Rng> {
        self.dropout_rng
    }

    pub(crate) fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

fn kaiming_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    inner: candle_nn::Conv2d,
}

impl Conv {
    pub fn new(
        s: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = kaiming_bound(in_ch * kernel * kernel);
        let weight = s.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = s.uniform("bias", &[out_ch], bound)?;
        let cfg = Conv2dConfig { padding: kernel / 2, stride, dilation: 1, groups: 1, cudnn_fwd_algo: None };
        Ok(Self { inner: candle_nn::Conv2d::new(weight, Some(bias), cfg) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    inner: candle_nn::Linear,
}

impl Linear {
    pub fn new(s: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = kaiming_bound(in_dim);
        let weight = s.uniform("weight", &[out_dim, in_dim], bound)?;
        let bias = s.uniform("bias", &[out_dim], bound)?;
        Ok(Self { inner: candle_nn::Linear::new(weight, Some(bias)) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(s: &mut Scope<'_>, channels: usize, max_groups: usize) -> Result<Self> {
        let groups = gcd(channels, max_groups.max(1));
        let weight = s.constant("weight", &[channels], 1.0)?;
        let bias = s.constant("bias", &[channels], 0.0)?;
        Ok(Self { inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Residual block whose normalised activations are scaled and shifted by
/// the timestep embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
    out_ch: usize,
    dropout: f64,
}

impl ResBlock {
    pub fn new(
        s: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        temb_dim: usize,
        groups: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut s.pp("norm1"), in_ch, groups)?,
            conv1: Conv::new(&mut s.pp("conv1"), in_ch, out_ch, 3, 1)?,
            emb: Linear::new(&mut s.pp("emb"), temb_dim, 2 * out_ch)?,
            norm2: GroupNorm::new(&mut s.pp("norm2"), out_ch, groups)?,
            conv2: Conv::new(&mut s.pp("conv2"), out_ch, out_ch, 3, 1)?,
            skip: if in_ch != out_ch { Some(Conv::new(&mut s.pp("skip"), in_ch, out_ch, 1, 1)?) } else { None },
            out_ch,
            dropout,
        })
    }

    /// `temb` is the activated embedding, shape `(B, temb_dim)`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let emb = self.emb.forward(temb)?;
        let scale = emb.narrow(1, 0, self.out_ch)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = emb.narrow(1, self.out_ch, self.out_ch)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.norm2.forward(&h)?;
        let h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?.silu()?;
        let h = ctx.dropout(&h, self.dropout)?;
        let h = self.conv2.forward(&h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Attention {
    norm: GroupNorm,
    qkv: Conv,
    proj: Conv,
    channels: usize,
}

impl Attention {
    pub fn new(s: &mut Scope<'_>, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut s.pp("norm"), channels, groups)?,
            qkv: Conv::new(&mut s.pp("qkv"), channels, 3 * channels, 1, 1)?,
            proj: Conv::new(&mut s.pp("proj"), channels, channels, 1, 1)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((b, 3 * c, h * w))?;
        let q = qkv.narrow(1, 0, c)?.transpose(1, 2)?.contiguous()?;
        let k = qkv.narrow(1, c, c)?.contiguous()?;
        let v = qkv.narrow(1, 2 * c, c)?.contiguous()?;
        let scale = 1.0 / (self.channels as f64).sqrt();
        let weights = candle_nn::ops::softmax(&(q.matmul(&k)? * scale)?, D::Minus1)?;
        // (B, C, HW) x (B, HW, HW)^T
        let out = v.matmul(&weights.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv,
}

impl Downsample {
    pub fn new(s: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(s, channels, channels, 3, 2)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv,
}

impl Upsample {
    pub fn new(s: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(s, channels, channels, 3, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let build = || {
            let mut store = ParamStore::new(7, DType::F32);
            Conv::new(&mut store.root().pp("c"), 2, 4, 3, 1).unwrap();
            store
        };
        let (a, b) = (build(), build());
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let x: Vec<f32> = va.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = vb.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
        assert!(a.get("c.weight").is_some() && a.get("c.bias").is_some());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(0, DType::F32);
        Linear::new(&mut store.root().pp("l"), 2, 2).unwrap();
        assert!(Linear::new(&mut store.root().pp("l"), 2, 2).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = Tensor::ones((4, 8), DType::F32, &Device::Cpu).unwrap();
        let mut eval = ForwardCtx::eval();
        let y: Vec<f32> = eval.dropout(&x, 0.5).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(y.iter().all(|v| *v == 1.0));
        let draw = || {
            let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(3));
            ctx.dropout(&x, 0.5).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
        assert!(a.iter().any(|v| *v == 0.0));
    }

    #[test]
    fn attention_preserves_shape() {
        let mut store = ParamStore::new(1, DType::F32);
        let attn = Attention::new(&mut store.root().pp("a"), 8, 4).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(attn.forward(&x).unwrap().dims(), &[2, 8, 4, 4]);
    }
}
