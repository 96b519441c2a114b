use candle_core::{Tensor, Var, D};

use super::layers::{leaky_relu, BatchNorm, Conv2d, ConvTranspose2d, GroupNorm, Padding};
use crate::error::{ArtemisError, Result};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderBlockCfg {
    pub c: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDecoderBlockCfg {
    pub c: usize,
    pub attention: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupDecoderBlockCfg {
    pub c: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorBlockCfg {
    pub c: usize,
    pub resnext: bool,
}

fn require_channels(c: usize) -> Result<()> {
    if c == 0 {
        return Err(ArtemisError::config(
            "block needs at least one output channel",
        ));
    }
    Ok(())
}

/// conv (3×3 at stride 1, 4×4 at stride 2) → batch norm → LeakyReLU.
pub struct EncoderBlock {
    conv: Conv2d,
    bn: BatchNorm,
    cfg: EncoderBlockCfg,
}

impl EncoderBlock {
    pub fn new(store: &ParamStore, c_in: usize, cfg: EncoderBlockCfg) -> Result<Self> {
        require_channels(cfg.c)?;
        let conv = match cfg.s {
            1 => Conv2d::new(&store.pp("conv"), c_in, cfg.c, 3, 1, Padding::Fixed(1), 1)?,
            2 => Conv2d::new(&store.pp("conv"), c_in, cfg.c, 4, 2, Padding::Fixed(1), 1)?,
            s => {
                return Err(ArtemisError::config(format!(
                    "encoder stride must be 1 or 2, got {s}"
                )))
            }
        };
        Ok(Self {
            conv,
            bn: BatchNorm::new(&store.pp("bn"), cfg.c)?,
            cfg,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % self.cfg.s != 0 || w % self.cfg.s != 0 {
            return Err(ArtemisError::shape(format!(
                "{h}×{w} input not divisible by stride {}",
                self.cfg.s
            )));
        }
        leaky_relu(&self.bn.forward_t(&self.conv.forward(x)?, train)?)
    }
}

/// Non-local self-attention with a learned residual gate γ (initially 0):
/// `out = x + γ · V · softmax(QᵀK)ᵀ`.
pub struct SelfAttention {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gamma: Var,
}

impl SelfAttention {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        if channels < 8 {
            return Err(ArtemisError::config(format!(
                "self-attention needs at least 8 channels, got {channels}"
            )));
        }
        let inner = channels / 8;
        Ok(Self {
            query: Conv2d::new(
                &store.pp("query"),
                channels,
                inner,
                1,
                1,
                Padding::Fixed(0),
                1,
            )?,
            key: Conv2d::new(
                &store.pp("key"),
                channels,
                inner,
                1,
                1,
                Padding::Fixed(0),
                1,
            )?,
            value: Conv2d::new(
                &store.pp("value"),
                channels,
                channels,
                1,
                1,
                Padding::Fixed(0),
                1,
            )?,
            gamma: store.param(1, "gamma", Init::ZEROS)?,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    /// `(N, HW, HW)` row-stochastic attention map.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let q = self.query.forward(x)?;
        let inner = q.dim(1)?;
        let q = q
            .reshape((n, inner, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let k = self.key.forward(x)?.reshape((n, inner, h * w))?;
        let energy = q.matmul(&k)?;
        softmax_rows(&energy)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let attn = self.attention_weights(x)?;
        let v = self.value.forward(x)?.reshape((n, c, h * w))?;
        let o = v
            .matmul(&attn.transpose(1, 2)?.contiguous()?)?
            .reshape((n, c, h, w))?;
        Ok((x + o.broadcast_mul(&self.gamma)?)?)
    }
}

/// Softmax over the last axis with a single fused backward step,
/// `∂x = y ⊙ (g − Σ g ⊙ y)`.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxRows)?)
}

struct SoftmaxRows;

impl candle_core::CustomOp1 for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax-rows"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let Some((a, b)) = layout.contiguous_offsets() else {
            candle_core::bail!("softmax-rows expects a contiguous input")
        };
        let dims = layout.dims();
        let row = *dims.last().unwrap_or(&1);
        fn rows<T: num_traits::Float>(src: &[T], row: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(src.len());
            for chunk in src.chunks(row) {
                let m = chunk.iter().copied().fold(T::neg_infinity(), T::max);
                let start = out.len();
                let mut sum = T::zero();
                for &v in chunk {
                    let e = (v - m).exp();
                    sum = sum + e;
                    out.push(e);
                }
                for e in &mut out[start..] {
                    *e = *e / sum;
                }
            }
            out
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(rows(&v[a..b], row)),
            CpuStorage::F64(v) => CpuStorage::F64(rows(&v[a..b], row)),
            _ => candle_core::bail!("softmax-rows supports f32/f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (y, g) = (res.detach(), grad.detach());
        let dot = (&g * &y)?.sum_keepdim(D::Minus1)?;
        Ok(Some((g.broadcast_sub(&dot)? * y)?))
    }
}

/// transposed conv (4×4, stride 2) → batch norm → LeakyReLU → optional
/// self-attention.
pub struct BatchDecoderBlock {
    deconv: ConvTranspose2d,
    bn: BatchNorm,
    attention: Option<SelfAttention>,
}

impl BatchDecoderBlock {
    pub fn new(store: &ParamStore, c_in: usize, cfg: BatchDecoderBlockCfg) -> Result<Self> {
        require_channels(cfg.c)?;
        let attention = if cfg.attention {
            Some(SelfAttention::new(&store.pp("attn"), cfg.c)?)
        } else {
            None
        };
        Ok(Self {
            deconv: ConvTranspose2d::new(&store.pp("deconv"), c_in, cfg.c, 4, 2, 1)?,
            bn: BatchNorm::new(&store.pp("bn"), cfg.c)?,
            attention,
        })
    }

    pub fn attention(&self) -> Option<&SelfAttention> {
        self.attention.as_ref()
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = leaky_relu(&self.bn.forward_t(&self.deconv.forward(x)?, train)?)?;
        match &self.attention {
            Some(a) => a.forward(&y),
            None => Ok(y),
        }
    }
}

/// conv (k×k, stride 1, same padding) → group norm (min(4, c) groups) →
/// LeakyReLU.
pub struct GroupDecoderBlock {
    conv: Conv2d,
    gn: GroupNorm,
}

impl GroupDecoderBlock {
    pub fn new(store: &ParamStore, c_in: usize, cfg: GroupDecoderBlockCfg) -> Result<Self> {
        require_channels(cfg.c)?;
        if cfg.k == 0 {
            return Err(ArtemisError::config("kernel size must be at least 1"));
        }
        let groups = cfg.c.min(4);
        if cfg.c % groups != 0 {
            return Err(ArtemisError::config(format!(
                "{} output channels not divisible by {groups} groups",
                cfg.c
            )));
        }
        Ok(Self {
            conv: Conv2d::new(&store.pp("conv"), c_in, cfg.c, cfg.k, 1, Padding::Same, 1)?,
            gn: GroupNorm::new(&store.pp("gn"), cfg.c, groups)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.gn.forward(&self.conv.forward(x)?)?)
    }
}

pub const RESNEXT_CARDINALITY: usize = 8;

/// ResNeXt bottleneck with identity shortcut: `y = x + T(x)`, where `T` is
/// 1×1 reduce → BN → LeakyReLU → grouped 3×3 → BN → LeakyReLU → 1×1 expand → BN.
///
/// Bottleneck width is `C/2`, raised to the cardinality when `C/2` is smaller.
pub struct ResNeXtLayer {
    reduce: Conv2d,
    bn1: BatchNorm,
    grouped: Conv2d,
    bn2: BatchNorm,
    expand: Conv2d,
    bn3: BatchNorm,
}

pub fn resnext_width(channels: usize) -> Result<usize> {
    if channels == 0 || channels % RESNEXT_CARDINALITY != 0 {
        return Err(ArtemisError::config(format!(
            "ResNeXt layer needs channels divisible by cardinality {RESNEXT_CARDINALITY}, got {channels}"
        )));
    }
    let half = channels / 2;
    Ok(half.div_ceil(RESNEXT_CARDINALITY).max(1) * RESNEXT_CARDINALITY)
}

impl ResNeXtLayer {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        let width = resnext_width(channels)?;
        Ok(Self {
            reduce: Conv2d::new(
                &store.pp("reduce"),
                channels,
                width,
                1,
                1,
                Padding::Fixed(0),
                1,
            )?,
            bn1: BatchNorm::new(&store.pp("bn1"), width)?,
            grouped: Conv2d::new(
                &store.pp("grouped"),
                width,
                width,
                3,
                1,
                Padding::Fixed(1),
                RESNEXT_CARDINALITY,
            )?,
            bn2: BatchNorm::new(&store.pp("bn2"), width)?,
            expand: Conv2d::new(
                &store.pp("expand"),
                width,
                channels,
                1,
                1,
                Padding::Fixed(0),
                1,
            )?,
            bn3: BatchNorm::new(&store.pp("bn3"), channels)?,
        })
    }

    pub fn residual(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let t = leaky_relu(&self.bn1.forward_t(&self.reduce.forward(x)?, train)?)?;
        let t = leaky_relu(&self.bn2.forward_t(&self.grouped.forward(&t)?, train)?)?;
        self.bn3.forward_t(&self.expand.forward(&t)?, train)
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok((x + self.residual(x, train)?)?)
    }
}

/// conv (4×4, stride 2) → batch norm → LeakyReLU → optional ResNeXt layer.
///
/// A 1×1 input cannot be halved; there the conv runs 3×3 at stride 1.
pub struct DiscriminatorBlock {
    conv: Conv2d,
    bn: BatchNorm,
    resnext: Option<ResNeXtLayer>,
    stride: usize,
}

impl DiscriminatorBlock {
    pub fn new(
        store: &ParamStore,
        c_in: usize,
        cfg: DiscriminatorBlockCfg,
        input_side: usize,
    ) -> Result<Self> {
        require_channels(cfg.c)?;
        let (conv, stride) = if input_side > 1 {
            (
                Conv2d::new(&store.pp("conv"), c_in, cfg.c, 4, 2, Padding::Fixed(1), 1)?,
                2,
            )
        } else {
            (
                Conv2d::new(&store.pp("conv"), c_in, cfg.c, 3, 1, Padding::Fixed(1), 1)?,
                1,
            )
        };
        let resnext = if cfg.resnext {
            Some(ResNeXtLayer::new(&store.pp("resnext"), cfg.c)?)
        } else {
            None
        };
        Ok(Self {
            conv,
            bn: BatchNorm::new(&store.pp("bn"), cfg.c)?,
            resnext,
            stride,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if self.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(ArtemisError::shape(format!(
                "discriminator block needs even spatial dims, got {h}×{w}"
            )));
        }
        let y = leaky_relu(&self.bn.forward_t(&self.conv.forward(x)?, train)?)?;
        match &self.resnext {
            Some(r) => r.forward_t(&y, train),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(1, DType::F32, &Device::Cpu)
    }

    fn zeros(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::zeros(shape, DType::F32, &Device::Cpu).unwrap()
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::params::gaussian_tensor(&mut rng, shape, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn encoder_block_shapes() {
        let s = store();
        let b = EncoderBlock::new(&s.pp("a"), 64, EncoderBlockCfg { c: 64, s: 2 }).unwrap();
        assert_eq!(
            b.forward_t(&zeros((1, 64, 4, 4)), true).unwrap().dims(),
            &[1, 64, 2, 2]
        );
        let b = EncoderBlock::new(&s.pp("b"), 32, EncoderBlockCfg { c: 64, s: 1 }).unwrap();
        assert_eq!(
            b.forward_t(&zeros((2, 32, 8, 8)), true).unwrap().dims(),
            &[2, 64, 8, 8]
        );
        let b = EncoderBlock::new(&s.pp("c"), 8, EncoderBlockCfg { c: 8, s: 2 }).unwrap();
        assert!(matches!(
            b.forward_t(&zeros((1, 8, 5, 5)), true),
            Err(ArtemisError::Shape(_))
        ));
    }

    #[test]
    fn batch_decoder_block_doubles_spatial() {
        let s = store();
        let cfg = BatchDecoderBlockCfg {
            c: 64,
            attention: true,
        };
        let b = BatchDecoderBlock::new(&s, 64, cfg).unwrap();
        assert_eq!(
            b.forward_t(&randn((2, 64, 2, 2), 0), true).unwrap().dims(),
            &[2, 64, 4, 4]
        );
    }

    #[test]
    fn fused_softmax_matches_composite() {
        let dev = candle_core::Device::Cpu;
        let x = candle_core::Var::randn(0f64, 3.0, (2, 5, 7), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 5, 7), &dev).unwrap();
        let a = softmax_rows(&x).unwrap();
        let b = candle_nn::ops::softmax(&x, D::Minus1).unwrap();
        let diff = |p: &Tensor, q: &Tensor| {
            (p - q)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        assert!(diff(&a, &b) < 1e-14);
        let ga = (a * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn gamma_zero_attention_is_identity() {
        let s = store();
        let a = SelfAttention::new(&s, 16).unwrap();
        let x = randn((2, 16, 3, 5), 2);
        let y = a.forward(&x).unwrap();
        let d = (y - &x)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn single_position_attention_adds_gated_value() {
        let s = store();
        let a = SelfAttention::new(&s, 8).unwrap();
        a.gamma()
            .set(&Tensor::new(&[0.5f32], &Device::Cpu).unwrap())
            .unwrap();
        let x = randn((1, 8, 1, 1), 3);
        let y = a.forward(&x).unwrap();
        let want = (&x + (a.value.forward(&x).unwrap() * 0.5).unwrap()).unwrap();
        let d = (y - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn attention_rejects_narrow_inputs() {
        assert!(SelfAttention::new(&store(), 4).is_err());
    }

    #[test]
    fn group_decoder_shapes_and_errors() {
        let s = store();
        let b = GroupDecoderBlock::new(&s.pp("a"), 8, GroupDecoderBlockCfg { c: 4, k: 4 }).unwrap();
        assert_eq!(
            b.forward(&zeros((1, 8, 6, 6))).unwrap().dims(),
            &[1, 4, 6, 6]
        );
        assert!(
            GroupDecoderBlock::new(&s.pp("b"), 8, GroupDecoderBlockCfg { c: 6, k: 3 }).is_err()
        );
    }

    #[test]
    fn resnext_shape_and_width() {
        assert_eq!(resnext_width(32).unwrap(), 16);
        assert_eq!(resnext_width(8).unwrap(), 8);
        assert!(resnext_width(4).is_err());
        let r = ResNeXtLayer::new(&store(), 32).unwrap();
        assert_eq!(
            r.forward_t(&randn((2, 32, 4, 4), 4), true).unwrap().dims(),
            &[2, 32, 4, 4]
        );
    }

    #[test]
    fn discriminator_block_odd_input_rejected() {
        let s = store();
        let b = DiscriminatorBlock::new(
            &s,
            8,
            DiscriminatorBlockCfg {
                c: 8,
                resnext: false,
            },
            6,
        )
        .unwrap();
        assert!(b.forward_t(&zeros((1, 8, 5, 5)), true).is_err());
    }
}
