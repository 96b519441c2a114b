//! Primitive layers over [`ParamStore`] variables.

use candle_core::{Tensor, Var, D};

use crate::error::{ArtemisError, Result};
use crate::params::{Init, ParamStore};

use super::shift_conv::shift_conv;

/// Kernels at least this wide (stride 1, ungrouped) bypass im2col.
const SHIFT_CONV_MIN_KERNEL: usize = 4;

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.ge(0.0)?.where_cond(x, &(x * LEAKY_SLOPE)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding.
    Fixed(usize),
    /// Output keeps the input size at stride 1; even kernels pad one extra
    /// row/column at the bottom/right.
    Same,
}

pub struct Conv2d {
    pub(crate) weight: Var,
    pub(crate) bias: Var,
    kernel: usize,
    stride: usize,
    padding: Padding,
    groups: usize,
}

impl Conv2d {
    pub fn new(
        store: &ParamStore,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(ArtemisError::config(format!(
                "conv {c_in}→{c_out} channels not divisible into {groups} groups"
            )));
        }
        let weight = store.param(
            (c_out, c_in / groups, kernel, kernel),
            "weight",
            Init::DCGAN,
        )?;
        let bias = store.param(c_out, "bias", Init::ZEROS)?;
        Ok(Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x, pad) = match self.padding {
            Padding::Fixed(p) => (x.clone(), p),
            Padding::Same => {
                let before = (self.kernel - 1) / 2;
                let after = self.kernel - 1 - before;
                if before == after {
                    (x.clone(), before)
                } else {
                    let x = x
                        .pad_with_zeros(2, before, after)?
                        .pad_with_zeros(3, before, after)?;
                    (x, 0)
                }
            }
        };
        let y = if self.stride == 1 && self.groups == 1 && self.kernel >= SHIFT_CONV_MIN_KERNEL {
            let x = if pad > 0 {
                x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?
            } else {
                x
            };
            shift_conv(&x, &self.weight)?
        } else {
            x.conv2d(&self.weight, pad, self.stride, 1, self.groups)?
        };
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Transposed convolution; kernel stored `(c_in, c_out, k, k)`.
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &ParamStore,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.param((c_in, c_out, kernel, kernel), "weight", Init::DCGAN)?,
            bias: store.param(c_out, "bias", Init::ZEROS)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let y = if (k, self.stride, self.padding) == (4, 2, 1) {
            upsample_4_2_1(x, &self.weight)?
        } else {
            x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?
        };
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 4×4 / stride 2 / pad 1 transposed convolution as four 2×2 convolutions,
/// one per output phase, interleaved. Same result as `conv_transpose2d` but
/// runs on the im2col path.
///
/// Along one axis, even outputs `2m` read inputs `m−1, m` through kernel taps
/// `3, 1`; odd outputs `2m+1` read `m, m+1` through taps `2, 0`.
fn upsample_4_2_1(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    let c_out = weight.dim(1)?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let taps = [[3u32, 1], [2, 0]];
    let device = x.device();
    let mut rows = Vec::with_capacity(2);
    for (a, ta) in taps.iter().enumerate() {
        let wa = weight.index_select(&Tensor::new(ta, device)?, 2)?;
        let mut cols = Vec::with_capacity(2);
        for (b, tb) in taps.iter().enumerate() {
            let kernel = wa
                .index_select(&Tensor::new(tb, device)?, 3)?
                .transpose(0, 1)?
                .contiguous()?;
            let window = padded.narrow(2, a, h + 1)?.narrow(3, b, w + 1)?;
            cols.push(window.conv2d(&kernel, 0, 1, 1, 1)?);
        }
        // (N, C, H, W, 2): column phase innermost.
        rows.push(Tensor::stack(&cols, 4)?);
    }
    // (N, C, H, 2, W, 2) → (N, C, 2H, 2W)
    let y = Tensor::stack(&rows, 3)?.reshape((n, c_out, 2 * h, 2 * w))?;
    Ok(y)
}

pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &ParamStore, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param((d_out, d_in), "weight", Init::DCGAN)?,
            bias: store.param(d_out, "bias", Init::ZEROS)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch normalisation over `(N, C)` or `(N, C, H, W)` inputs.
///
/// Training mode normalises with batch statistics and folds them into the
/// running estimates (momentum 0.1, unbiased variance); inference mode uses
/// the running estimates only.
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(channels, "gamma", Init::ONES)?,
            beta: store.param(channels, "beta", Init::ZEROS)?,
            running_mean: store.buffer(channels, "running_mean", Init::ZEROS)?,
            running_var: store.buffer(channels, "running_var", Init::ONES)?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.gamma.dim(0)?;
        let (stat_shape, reduce): (Vec<usize>, Vec<usize>) = match x.rank() {
            2 => (vec![1, c], vec![0]),
            4 => (vec![1, c, 1, 1], vec![0, 2, 3]),
            r => return Err(ArtemisError::shape(format!("batch norm on rank-{r} input"))),
        };
        let (mean, var) = if train {
            let count = x.elem_count() / c;
            let mean = x.mean_keepdim(reduce.clone())?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(reduce)?;
            let unbiased = if count > 1 {
                (var.detach() * (count as f64 / (count - 1) as f64))?
            } else {
                var.detach()
            };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                + (unbiased.flatten_all()? * BN_MOMENTUM)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.reshape(stat_shape.as_slice())?,
                self.running_var.reshape(stat_shape.as_slice())?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(stat_shape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(stat_shape.as_slice())?)?)
    }
}

/// Group normalisation over `(N, C, H, W)`; independent of the batch.
pub struct GroupNorm {
    groups: usize,
    gamma: Var,
    beta: Var,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(store: &ParamStore, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(ArtemisError::config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: store.param(channels, "gamma", Init::ONES)?,
            beta: store.param(channels, "beta", Init::ZEROS)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + GN_EPS)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_split_upsample_matches_transposed_conv() {
        let dev = candle_core::Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 6, 4, 4), &dev).unwrap();
        let want = x.conv_transpose2d(&w, 1, 0, 2, 1).unwrap();
        let got = upsample_4_2_1(&x, &w).unwrap();
        assert_eq!(got.dims(), want.dims());
        let err = (got - want)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(err < 1e-12, "{err}");
    }
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(0, DType::F64, &Device::Cpu)
    }

    #[test]
    fn same_padding_even_kernel_keeps_size() {
        let s = store();
        let conv = Conv2d::new(&s, 3, 5, 8, 1, Padding::Same, 1).unwrap();
        let x = Tensor::zeros((2, 3, 17, 9), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 5, 17, 9]);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn batch_norm_normalises_and_tracks_running_stats() {
        let s = store();
        let bn = BatchNorm::new(&s, 1).unwrap();
        let x = Tensor::new(&[[1.0f64], [3.0]], &Device::Cpu).unwrap();
        let y = bn
            .forward_t(&x, true)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
        let rm = s.tensors()["running_mean"].to_vec1::<f64>().unwrap()[0];
        let rv = s.tensors()["running_var"].to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((rv - (0.9 + 0.2)).abs() < 1e-12);
        let e = bn
            .forward_t(&x, false)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!((e[0] - (1.0 - 0.2) / (1.1f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        assert!(GroupNorm::new(&store(), 6, 4).is_err());
    }

    #[test]
    fn group_norm_zero_mean_per_group() {
        let s = store();
        let gn = GroupNorm::new(&s, 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = gn.forward(&x).unwrap();
        let g = y
            .reshape((2, 16))
            .unwrap()
            .mean(1)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(g.iter().all(|m| m.abs() < 1e-12));
    }
}
