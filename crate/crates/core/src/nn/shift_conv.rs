//! Valid, stride-1 cross-correlation computed as one small matrix product per
//! kernel offset.
//!
//! For large kernels this beats im2col on one core: each offset copies a
//! contiguous window instead of gathering `k²·C` scattered values per output
//! pixel. Windows are transient in both passes, so memory stays at a few
//! input-sized buffers regardless of kernel size.

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor};

/// `x: (N, C, H + k − 1, W + k − 1)`, `w: (O, C, k, k)` → `(N, O, H, W)`.
pub fn shift_conv(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, ShiftConv)
}

fn correlate(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, hp, wp) = x.dims4()?;
    let (o, c_w, kh, kw) = w.dims4()?;
    if c != c_w || hp < kh || wp < kw {
        candle_core::bail!("shift-conv: input {:?} vs kernel {:?}", x.dims(), w.dims());
    }
    let (h, wd) = (hp - kh + 1, wp - kw + 1);
    let mut acc: Option<Tensor> = None;
    for u in 0..kh {
        let rows = x.narrow(2, u, h)?;
        for v in 0..kw {
            let win = rows
                .narrow(3, v, wd)?
                .contiguous()?
                .reshape((n, c, h * wd))?;
            let tap = w.narrow(2, u, 1)?.narrow(3, v, 1)?.reshape((o, c))?;
            let y = tap.broadcast_matmul(&win)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
    }
    acc.expect("kernel has at least one tap")
        .reshape((n, o, h, wd))
}

pub(crate) fn storage_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let Some((a, b)) = l.contiguous_offsets() else {
        candle_core::bail!("custom op expects contiguous inputs")
    };
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[a..b], l.shape(), &Device::Cpu),
        _ => candle_core::bail!("custom op supports f32/f64 only"),
    }
}

pub(crate) fn into_storage(y: &Tensor) -> candle_core::Result<(CpuStorage, Shape)> {
    let flat = y.flatten_all()?;
    let out = match flat.dtype() {
        DType::F32 => CpuStorage::F32(flat.to_vec1()?),
        DType::F64 => CpuStorage::F64(flat.to_vec1()?),
        d => candle_core::bail!("custom op: unsupported dtype {d:?}"),
    };
    Ok((out, y.shape().clone()))
}

struct ShiftConv;

impl CustomOp2 for ShiftConv {
    fn name(&self) -> &'static str {
        "shift-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        into_storage(&correlate(
            &storage_tensor(s1, l1)?,
            &storage_tensor(s2, l2)?,
        )?)
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, w, g) = (x.detach(), w.detach(), grad.detach().contiguous()?);
        let (n, c, _, _) = x.dims4()?;
        let (o, _, kh, kw) = w.dims4()?;
        let (_, _, h, wd) = g.dims4()?;

        // Full correlation with the flipped, transposed kernel.
        let dev = x.device();
        let rev = |k: usize| Tensor::from_vec((0..k as u32).rev().collect::<Vec<_>>(), k, dev);
        let w_flip = w
            .index_select(&rev(kh)?, 2)?
            .index_select(&rev(kw)?, 3)?
            .transpose(0, 1)?
            .contiguous()?;
        let g_pad = g
            .pad_with_zeros(2, kh - 1, kh - 1)?
            .pad_with_zeros(3, kw - 1, kw - 1)?;
        let grad_x = correlate(&g_pad, &w_flip)?;

        let g_flat = g.reshape((n, o, h * wd))?;
        let mut taps = Vec::with_capacity(kh * kw);
        for u in 0..kh {
            let rows = x.narrow(2, u, h)?;
            for v in 0..kw {
                let win = rows
                    .narrow(3, v, wd)?
                    .contiguous()?
                    .reshape((n, c, h * wd))?;
                taps.push(g_flat.matmul(&win.t()?)?.sum(0)?);
            }
        }
        let grad_w = Tensor::stack(&taps, 2)?.reshape((o, c, kh, kw))?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}
