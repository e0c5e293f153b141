//! Dual-encoder, dual-decoder conditional denoiser.
//!
//! The PET branch encodes `(y_t, x_ld)` and the MRI branch `(y_t, z_mri)`.
//! Per-level encoder features are fused (hierarchical feature fusion) and
//! consumed as skip connections by both decoders, each of which predicts a
//! clean-image estimate and per-pixel variance logits.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Attention, Conv, Downsample, ForwardCtx, GroupNorm, Linear, ParamStore, ResBlock, Scope, Upsample};
use crate::tensor_util::all_finite;

const MAX_PERIOD: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Pet,
    Mri,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Pet => "pet",
            Branch::Mri => "mri",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structural switches covering the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Whether the MRI slice is used at all.
    pub mri_conditioning: bool,
    /// Separate MRI encoder and decoder (second task).
    pub task2: bool,
    /// Hierarchical feature fusion of the two encoders' pyramids.
    pub hff: bool,
    /// Two encoders feeding one decoder.
    pub shared_single_decoder: bool,
    /// MRI decoder trained without dropout while the PET decoder keeps it.
    pub asymmetric_dropout: bool,
}

impl Architecture {
    /// Preset for ablation variant `V1`..`V6`; `V6` is the full model.
    pub fn variant(n: u8) -> Result<Self> {
        let base = Self {
            mri_conditioning: true,
            task2: true,
            hff: true,
            shared_single_decoder: false,
            asymmetric_dropout: false,
        };
        Ok(match n {
            1 => Self { mri_conditioning: false, task2: false, hff: false, ..base },
            2 => Self { task2: false, hff: false, ..base },
            3 => Self { hff: false, ..base },
            4 => Self { task2: false, shared_single_decoder: true, ..base },
            5 => Self { asymmetric_dropout: true, ..base },
            6 => base,
            _ => return Err(Error::invalid(format!("no ablation variant V{n}"))),
        })
    }

    pub fn full() -> Self {
        Self::variant(6).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mri_conditioning && (self.task2 || self.hff || self.shared_single_decoder) {
            return Err(Error::Config("task2, hff and shared decoder need MRI conditioning".into()));
        }
        if self.task2 && self.shared_single_decoder {
            return Err(Error::Config("task2 and a single shared decoder are exclusive".into()));
        }
        if self.hff && !(self.task2 || self.shared_single_decoder) {
            return Err(Error::Config("hff needs two encoders".into()));
        }
        if self.asymmetric_dropout && !self.task2 {
            return Err(Error::Config("asymmetric dropout needs two decoders".into()));
        }
        Ok(())
    }

    fn has_mri_encoder(&self) -> bool {
        self.task2 || self.shared_single_decoder
    }

    /// MRI concatenated into a single encoder's stem.
    fn mri_in_stem(&self) -> bool {
        self.mri_conditioning && !self.has_mri_encoder()
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// 1-based level indices that get self-attention.
    pub attention_levels: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub dropout: f64,
    pub input_size: usize,
    /// Output width of the fusion head per level; defaults to the level's
    /// encoder width.
    #[serde(default)]
    pub fused_width_per_level: Option<Vec<usize>>,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
    #[serde(default)]
    pub architecture: Architecture,
}

fn default_norm_groups() -> usize {
    8
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![2, 3],
            num_res_blocks_per_level: 2,
            dropout: 0.1,
            input_size: 64,
            fused_width_per_level: None,
            norm_groups: 8,
            architecture: Architecture::full(),
        }
    }
}

impl ModelConfig {
    /// Smallest useful network: 8x8 input, two levels of width 4 and 8.
    pub fn tiny() -> Self {
        Self {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![2],
            num_res_blocks_per_level: 1,
            dropout: 0.0,
            input_size: 8,
            fused_width_per_level: None,
            norm_groups: 4,
            architecture: Architecture::full(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level - 1]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> (level - 1)
    }

    pub fn fused_width(&self, level: usize) -> usize {
        match &self.fused_width_per_level {
            Some(w) => w[level - 1],
            None => self.level_channels(level),
        }
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_levels();
        if l == 0 || self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("need at least one level with positive width".into()));
        }
        if self.num_res_blocks_per_level == 0 {
            return Err(Error::Config("num_res_blocks_per_level must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.input_size == 0 || self.input_size % (1 << (l - 1)) != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size,
                l - 1
            )));
        }
        if let Some(bad) = self.attention_levels.iter().find(|a| **a < 1 || **a > l) {
            return Err(Error::Config(format!("attention level {bad} outside 1..={l}")));
        }
        if let Some(w) = &self.fused_width_per_level {
            if w.len() != l || w.contains(&0) {
                return Err(Error::Config("fused_width_per_level needs one positive width per level".into()));
            }
        }
        if self.base_channels % 2 != 0 {
            return Err(Error::Config("base_channels must be even for the sinusoidal embedding".into()));
        }
        self.architecture.validate()
    }

    /// Layer ids that activation capture understands, without branch prefix.
    pub fn layer_ids(&self) -> Vec<String> {
        let l = self.num_levels();
        let mut ids: Vec<String> = (1..=l).map(|i| format!("enc.l{i}")).collect();
        ids.push("enc.mid".into());
        ids.extend((1..=l).rev().map(|i| format!("dec.l{i}")));
        ids.push("dec.out".into());
        ids
    }
}

/// Sinusoidal timestep embedding: `dim / 2` sines followed by `dim / 2`
/// cosines over geometrically spaced frequencies.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("embedding dimension {dim} must be positive and even")));
    }
    if t < 0.0 {
        return Err(Error::invalid("negative timestep"));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp()).collect();
    Ok(freqs.iter().map(|w| (t * w).sin()).chain(freqs.iter().map(|w| (t * w).cos())).collect())
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Debug, Clone)]
pub struct FusionPyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub y0_hat: Tensor,
    /// Variance interpolation logits.
    pub v: Tensor,
}

/// Branch predictions. `mri` is `None` whenever the MRI pathway did not run
/// or the architecture has a single decoder.
#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub pet: BranchOutput,
    pub mri: Option<BranchOutput>,
    pub mri_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    PetEncoder,
    MriEncoder,
    PetDecoder,
    MriDecoder,
    Fusion,
    TimeEmbedding,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<Self> {
        let prefix = name.split('.').next()?;
        Some(match prefix {
            "pet_enc" => ParamGroup::PetEncoder,
            "mri_enc" => ParamGroup::MriEncoder,
            "pet_dec" => ParamGroup::PetDecoder,
            "mri_dec" => ParamGroup::MriDecoder,
            "hff" => ParamGroup::Fusion,
            "time_pet" | "time_mri" => ParamGroup::TimeEmbedding,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
struct TimeMlp {
    lin1: Linear,
    lin2: Linear,
    sin_dim: usize,
}

impl TimeMlp {
    fn new(s: &mut Scope<'_>, sin_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            lin1: Linear::new(&mut s.pp("lin1"), sin_dim, out_dim)?,
            lin2: Linear::new(&mut s.pp("lin2"), out_dim, out_dim)?,
            sin_dim,
        })
    }

    /// Activated embedding for each timestep, shape `(B, out_dim)`.
    fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ts.len() * self.sin_dim);
        for &t in ts {
            data.extend(time_embed(t as f64, self.sin_dim)?);
        }
        let e = Tensor::from_vec(data, (ts.len(), self.sin_dim), device)?.to_dtype(dtype)?;
        let h = self.lin1.forward(&e)?.silu()?;
        Ok(self.lin2.forward(&h)?.silu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<(ResBlock, Option<Attention>)>,
}

impl Stage {
    fn forward(&self, mut h: Tensor, temb: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        for (res, attn) in &self.blocks {
            h = res.forward(&h, temb, ctx)?;
            if let Some(a) = attn {
                h = a.forward(&h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    branch: Branch,
    in_channels: usize,
    stem: Conv,
    stages: Vec<Stage>,
    downs: Vec<Downsample>,
    mid1: ResBlock,
    mid_attn: Attention,
    mid2: ResBlock,
}

impl Encoder {
    fn new(s: &mut Scope<'_>, cfg: &ModelConfig, branch: Branch, in_channels: usize) -> Result<Self> {
        let temb = cfg.time_embed_dim();
        let g = cfg.norm_groups;
        let stem = Conv::new(&mut s.pp("stem"), in_channels, cfg.level_channels(1), 3, 1)?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut cur = cfg.level_channels(1);
        for l in 1..=cfg.num_levels() {
            let ch = cfg.level_channels(l);
            let mut blocks = Vec::new();
            for r in 0..cfg.num_res_blocks_per_level {
                let mut b = s.pp(&format!("l{l}.res{r}"));
                let res = ResBlock::new(&mut b, cur, ch, temb, g, cfg.dropout)?;
                let attn = if cfg.attention_levels.contains(&l) {
                    Some(Attention::new(&mut s.pp(&format!("l{l}.attn{r}")), ch, g)?)
                } else {
                    None
                };
                blocks.push((res, attn));
                cur = ch;
            }
            stages.push(Stage { blocks });
            if l < cfg.num_levels() {
                downs.push(Downsample::new(&mut s.pp(&format!("l{l}.down")), ch)?);
            }
        }
        Ok(Self {
            branch,
            in_channels,
            stem,
            stages,
            downs,
            mid1: ResBlock::new(&mut s.pp("mid.res0"), cur, cur, temb, g, cfg.dropout)?,
            mid_attn: Attention::new(&mut s.pp("mid.attn"), cur, g)?,
            mid2: ResBlock::new(&mut s.pp("mid.res1"), cur, cur, temb, g, cfg.dropout)?,
        })
    }

    fn forward(&self, input: &Tensor, temb: &Tensor, ctx: &mut ForwardCtx) -> Result<FeaturePyramid> {
        let mut h = self.stem.forward(input)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(h, temb, ctx)?;
            ctx.tap(|| format!("{}.enc.l{}", self.branch, i + 1), &h);
            levels.push(h.clone());
            if let Some(d) = self.downs.get(i) {
                h = d.forward(&h)?;
            }
        }
        let h = self.mid1.forward(&h, temb, ctx)?;
        let h = self.mid_attn.forward(&h)?;
        let h = self.mid2.forward(&h, temb, ctx)?;
        ctx.tap(|| format!("{}.enc.mid", self.branch), &h);
        Ok(FeaturePyramid { levels, bottleneck: h })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    branch: Branch,
    /// Coarsest level first.
    stages: Vec<Stage>,
    ups: Vec<Upsample>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl Decoder {
    fn new(s: &mut Scope<'_>, cfg: &ModelConfig, branch: Branch, skip_widths: &[usize], dropout: f64) -> Result<Self> {
        let temb = cfg.time_embed_dim();
        let g = cfg.norm_groups;
        let l_max = cfg.num_levels();
        let mut cur = cfg.level_channels(l_max);
        let mut stages = Vec::new();
        let mut ups = Vec::new();
        for l in (1..=l_max).rev() {
            let ch = cfg.level_channels(l);
            let mut blocks = Vec::new();
            for r in 0..cfg.num_res_blocks_per_level {
                let in_ch = if r == 0 { cur + skip_widths[l - 1] } else { cur };
                let res = ResBlock::new(&mut s.pp(&format!("l{l}.res{r}")), in_ch, ch, temb, g, dropout)?;
                let attn = if cfg.attention_levels.contains(&l) {
                    Some(Attention::new(&mut s.pp(&format!("l{l}.attn{r}")), ch, g)?)
                } else {
                    None
                };
                blocks.push((res, attn));
                cur = ch;
            }
            stages.push(Stage { blocks });
            if l > 1 {
                ups.push(Upsample::new(&mut s.pp(&format!("l{l}.up")), ch)?);
            }
        }
        Ok(Self {
            branch,
            stages,
            ups,
            norm_out: GroupNorm::new(&mut s.pp("out_norm"), cur, g)?,
            conv_out: Conv::new(&mut s.pp("out_conv"), cur, 2, 3, 1)?,
        })
    }

    fn forward(&self, bottleneck: &Tensor, skips: &[Tensor], temb: &Tensor, ctx: &mut ForwardCtx) -> Result<BranchOutput> {
        let l_max = self.stages.len();
        if skips.len() != l_max {
            return Err(Error::shape(format!("{} skip maps for {} decoder stages", skips.len(), l_max)));
        }
        let mut h = bottleneck.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let level = l_max - i;
            let skip = &skips[level - 1];
            if skip.dims()[2..] != h.dims()[2..] {
                return Err(Error::shape(format!(
                    "skip at level {level} has shape {:?}, decoder expects {:?}",
                    skip.dims(),
                    h.dims()
                )));
            }
            h = Tensor::cat(&[&h, skip], 1)?;
            h = stage.forward(h, temb, ctx)?;
            ctx.tap(|| format!("{}.dec.l{level}", self.branch), &h);
            if let Some(u) = self.ups.get(i) {
                h = u.forward(&h)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let y0_hat = out.narrow(1, 0, 1)?;
        let v = out.narrow(1, 1, 1)?;
        ctx.tap(|| format!("{}.dec.out", self.branch), &y0_hat);
        Ok(BranchOutput { y0_hat, v })
    }
}

#[derive(Debug, Clone)]
struct FusionHead {
    conv: Conv,
    norm: GroupNorm,
}

impl FusionHead {
    fn new(s: &mut Scope<'_>, in_ch: usize, out_ch: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(&mut s.pp("conv"), in_ch, out_ch, 3, 1)?,
            norm: GroupNorm::new(&mut s.pp("norm"), out_ch, groups)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

/// Hierarchical feature fusion: per level, 1x1 projections of both branch
/// features into a shared width, channel concatenation, then a nonlinear
/// head. A PET-only head replaces the fused map when MRI is unavailable.
#[derive(Debug, Clone)]
pub struct Hff {
    proj_pet: Vec<Conv>,
    proj_mri: Vec<Conv>,
    heads: Vec<FusionHead>,
    pet_only: Vec<FusionHead>,
}

impl Hff {
    fn new(s: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let mut hff = Self { proj_pet: vec![], proj_mri: vec![], heads: vec![], pet_only: vec![] };
        for l in 1..=cfg.num_levels() {
            let ch = cfg.level_channels(l);
            let fw = cfg.fused_width(l);
            hff.proj_pet.push(Conv::new(&mut s.pp(&format!("l{l}.proj_pet")), ch, ch, 1, 1)?);
            hff.proj_mri.push(Conv::new(&mut s.pp(&format!("l{l}.proj_mri")), ch, ch, 1, 1)?);
            hff.heads.push(FusionHead::new(&mut s.pp(&format!("l{l}.head")), 2 * ch, fw, cfg.norm_groups)?);
            hff.pet_only.push(FusionHead::new(&mut s.pp(&format!("l{l}.pet_only")), ch, fw, cfg.norm_groups)?);
        }
        Ok(hff)
    }

    pub fn fuse(&self, pyr_pet: &FeaturePyramid, pyr_mri: &FeaturePyramid) -> Result<FusionPyramid> {
        if pyr_pet.levels.len() != self.heads.len() || pyr_mri.levels.len() != self.heads.len() {
            return Err(Error::shape(format!(
                "fusion expects {} levels, got {} and {}",
                self.heads.len(),
                pyr_pet.levels.len(),
                pyr_mri.levels.len()
            )));
        }
        let mut levels = Vec::with_capacity(self.heads.len());
        for (l, (a, b)) in pyr_pet.levels.iter().zip(&pyr_mri.levels).enumerate() {
            if a.dims() != b.dims() {
                return Err(Error::shape(format!("level {} shapes {:?} vs {:?}", l + 1, a.dims(), b.dims())));
            }
            let cat = Tensor::cat(&[self.proj_pet[l].forward(a)?, self.proj_mri[l].forward(b)?], 1)?;
            levels.push(self.heads[l].forward(&cat)?);
        }
        Ok(FusionPyramid { levels })
    }

    /// Fused-map substitute built from PET features alone.
    pub fn pet_only(&self, pyr_pet: &FeaturePyramid) -> Result<FusionPyramid> {
        let levels = pyr_pet
            .levels
            .iter()
            .enumerate()
            .map(|(l, a)| self.pet_only[l].forward(&self.proj_pet[l].forward(a)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionPyramid { levels })
    }
}

/// The complete denoiser together with its parameters.
#[derive(Debug)]
pub struct Denoiser {
    config: ModelConfig,
    store: ParamStore,
    time_pet: TimeMlp,
    time_mri: Option<TimeMlp>,
    enc_pet: Encoder,
    enc_mri: Option<Encoder>,
    hff: Option<Hff>,
    dec_pet: Decoder,
    dec_mri: Option<Decoder>,
}

impl Denoiser {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture;
        let mut store = ParamStore::new(seed, dtype);
        let temb = config.time_embed_dim();
        let l = config.num_levels();
        let level_widths: Vec<usize> = (1..=l).map(|i| config.level_channels(i)).collect();
        let fused_widths: Vec<usize> = (1..=l).map(|i| config.fused_width(i)).collect();
        let skip_widths = if arch.hff { &fused_widths } else { &level_widths };
        let (pet_drop, mri_drop) = if arch.asymmetric_dropout { (config.dropout, 0.0) } else { (config.dropout, config.dropout) };

        let mut root = store.root();
        let time_pet = TimeMlp::new(&mut root.pp("time_pet"), config.base_channels, temb)?;
        let pet_in = if arch.mri_in_stem() { 3 } else { 2 };
        let enc_pet = Encoder::new(&mut root.pp("pet_enc"), &config, Branch::Pet, pet_in)?;
        let (time_mri, enc_mri) = if arch.has_mri_encoder() {
            (
                Some(TimeMlp::new(&mut root.pp("time_mri"), config.base_channels, temb)?),
                Some(Encoder::new(&mut root.pp("mri_enc"), &config, Branch::Mri, 2)?),
            )
        } else {
            (None, None)
        };
        let hff = if arch.hff { Some(Hff::new(&mut root.pp("hff"), &config)?) } else { None };
        let dec_pet = Decoder::new(&mut root.pp("pet_dec"), &config, Branch::Pet, skip_widths, pet_drop)?;
        let dec_mri = if arch.task2 {
            Some(Decoder::new(&mut root.pp("mri_dec"), &config, Branch::Mri, skip_widths, mri_drop)?)
        } else {
            None
        };
        Ok(Self { config, store, time_pet, time_mri, enc_pet, enc_mri, hff, dec_pet, dec_mri })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn hff(&self) -> Option<&Hff> {
        self.hff.as_ref()
    }

    pub fn has_mri_decoder(&self) -> bool {
        self.dec_mri.is_some()
    }

    /// Number of scalar parameters in each group.
    pub fn group_sizes(&self) -> std::collections::BTreeMap<ParamGroup, usize> {
        let mut out = std::collections::BTreeMap::new();
        for (name, var) in self.store.iter() {
            if let Some(g) = ParamGroup::of(name) {
                *out.entry(g).or_insert(0) += var.elem_count();
            }
        }
        out
    }

    /// Activated timestep embedding of a branch, `(B, 4 * base)`.
    pub fn time_embedding(&self, branch: Branch, ts: &[usize]) -> Result<Tensor> {
        let mlp = match branch {
            Branch::Pet => &self.time_pet,
            Branch::Mri => self.time_mri.as_ref().ok_or_else(|| Error::invalid("model has no MRI branch"))?,
        };
        mlp.forward(ts, self.dtype(), self.device())
    }

    /// Runs one branch encoder on `(y_t, cond)`.
    pub fn encode(&self, branch: Branch, cond: &Tensor, y_t: &Tensor, temb: &Tensor, ctx: &mut ForwardCtx) -> Result<FeaturePyramid> {
        let enc = match branch {
            Branch::Pet => &self.enc_pet,
            Branch::Mri => self.enc_mri.as_ref().ok_or_else(|| Error::invalid("model has no MRI encoder"))?,
        };
        self.check_image(y_t, "y_t")?;
        let (b, _, h, w) = cond.dims4()?;
        if (b, h, w) != (y_t.dim(0)?, y_t.dim(2)?, y_t.dim(3)?) {
            return Err(Error::shape(format!("cond {:?} vs y_t {:?}", cond.dims(), y_t.dims())));
        }
        let input = Tensor::cat(&[y_t, cond], 1)?;
        if input.dim(1)? != enc.in_channels {
            return Err(Error::shape(format!("encoder expects {} input channels, got {}", enc.in_channels, input.dim(1)?)));
        }
        enc.forward(&input, temb, ctx)
    }

    pub fn decode(&self, branch: Branch, bottleneck: &Tensor, skips: &FusionPyramid, temb: &Tensor, ctx: &mut ForwardCtx) -> Result<BranchOutput> {
        let dec = match branch {
            Branch::Pet => &self.dec_pet,
            Branch::Mri => self.dec_mri.as_ref().ok_or_else(|| Error::invalid("model has no MRI decoder"))?,
        };
        dec.forward(bottleneck, &skips.levels, temb, ctx)
    }

    fn check_image(&self, x: &Tensor, what: &str) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(format!("{what} has shape {:?}, expected (B, 1, {s}, {s})", x.dims())));
        }
        Ok(())
    }

    /// Full conditional forward pass. `ts` are original-schedule timesteps,
    /// one per batch item or a single shared one. With `mri_active = false`
    /// the MRI tensor is never read.
    pub fn forward(
        &self,
        y_t: &Tensor,
        x_ld: &Tensor,
        z_mri: Option<&Tensor>,
        ts: &[usize],
        mri_active: bool,
        ctx: &mut ForwardCtx,
    ) -> Result<PredictionPair> {
        self.check_image(y_t, "y_t")?;
        self.check_image(x_ld, "x_ld")?;
        if x_ld.dim(0)? != y_t.dim(0)? {
            return Err(Error::shape("x_ld and y_t batch sizes differ"));
        }
        if !all_finite(y_t)? || !all_finite(x_ld)? {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        let z = if mri_active {
            let z = z_mri.ok_or_else(|| Error::invalid("mri_active is set but no MRI slice was given"))?;
            if z.dims() != x_ld.dims() {
                return Err(Error::shape(format!("z_mri {:?} vs x_ld {:?}", z.dims(), x_ld.dims())));
            }
            if !all_finite(z)? {
                return Err(Error::NonFinite("MRI input".into()));
            }
            Some(z)
        } else {
            None
        };
        let ts: Vec<usize> = if ts.len() == 1 { vec![ts[0]; y_t.dim(0)?] } else { ts.to_vec() };
        if ts.len() != y_t.dim(0)? {
            return Err(Error::shape(format!("{} timesteps for batch of {}", ts.len(), y_t.dim(0)?)));
        }
        let arch = self.config.architecture;
        let use_mri = arch.mri_conditioning && z.is_some();
        let temb_pet = self.time_embedding(Branch::Pet, &ts)?;

        if !arch.has_mri_encoder() {
            let cond = if arch.mri_in_stem() {
                let z = match z {
                    Some(z) => z.clone(),
                    None => x_ld.zeros_like()?,
                };
                Tensor::cat(&[x_ld, &z], 1)?
            } else {
                x_ld.clone()
            };
            let pyr = self.encode(Branch::Pet, &cond, y_t, &temb_pet, ctx)?;
            let skips = FusionPyramid { levels: pyr.levels.clone() };
            let pet = self.decode(Branch::Pet, &pyr.bottleneck, &skips, &temb_pet, ctx)?;
            return Ok(PredictionPair { pet, mri: None, mri_active: use_mri });
        }

        let pyr_pet = self.encode(Branch::Pet, x_ld, y_t, &temb_pet, ctx)?;
        if !use_mri {
            let skips = match &self.hff {
                Some(hff) => hff.pet_only(&pyr_pet)?,
                None => FusionPyramid { levels: pyr_pet.levels.clone() },
            };
            let pet = self.decode(Branch::Pet, &pyr_pet.bottleneck, &skips, &temb_pet, ctx)?;
            return Ok(PredictionPair { pet, mri: None, mri_active: false });
        }

        let z = z.expect("checked above");
        let temb_mri = self.time_embedding(Branch::Mri, &ts)?;
        let pyr_mri = self.encode(Branch::Mri, z, y_t, &temb_mri, ctx)?;
        if arch.shared_single_decoder {
            let fused = self.hff.as_ref().expect("validated").fuse(&pyr_pet, &pyr_mri)?;
            let bottleneck = ((&pyr_pet.bottleneck + &pyr_mri.bottleneck)? * 0.5)?;
            let pet = self.decode(Branch::Pet, &bottleneck, &fused, &temb_pet, ctx)?;
            return Ok(PredictionPair { pet, mri: None, mri_active: true });
        }
        let (skips_pet, skips_mri) = match &self.hff {
            Some(hff) => {
                let fused = hff.fuse(&pyr_pet, &pyr_mri)?;
                (fused.clone(), fused)
            }
            None => (
                FusionPyramid { levels: pyr_pet.levels.clone() },
                FusionPyramid { levels: pyr_mri.levels.clone() },
            ),
        };
        let pet = self.decode(Branch::Pet, &pyr_pet.bottleneck, &skips_pet, &temb_pet, ctx)?;
        let mri = self.decode(Branch::Mri, &pyr_mri.bottleneck, &skips_mri, &temb_mri, ctx)?;
        Ok(PredictionPair { pet, mri: Some(mri), mri_active: true })
    }
}
