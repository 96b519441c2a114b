#![allow(dead_code)]

use std::path::{Path, PathBuf};

use artemis_core::config::TrainingConfig;
use artemis_core::data::{build_manifest, Dataset};
use artemis_core::vgg::{Backbone, BlockName};
use candle_core::{DType, Device};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Procedural "paintings": coloured sinusoidal stripes over a gradient, one
/// random palette and frequency per image.
pub fn write_synthetic_images(dir: &Path, n: usize, side: u32, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let accent: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let fx: f32 = rng.random_range(1.0..8.0);
            let fy: f32 = rng.random_range(1.0..8.0);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let img = RgbImage::from_fn(side, side, |x, y| {
                let u = x as f32 / side as f32;
                let v = y as f32 / side as f32;
                let t = 0.5 + 0.5 * (std::f32::consts::TAU * (fx * u + fy * v) + phase).sin();
                let px = |c: usize| {
                    let g = base[c] * (1.0 - v) + accent[c] * v;
                    ((g * (1.0 - t) + accent[c] * t) * 255.0)
                        .round()
                        .clamp(0.0, 255.0) as u8
                };
                Rgb([px(0), px(1), px(2)])
            });
            let path = dir.join(format!("img_{i:03}.png"));
            img.save(&path).unwrap();
            path
        })
        .collect()
}

pub fn random_backbone(dir: &Path, seed: u64, dtype: DType) -> Backbone {
    let path = dir.join("vgg19.safetensors");
    Backbone::write_random_weights(&path, seed).unwrap();
    Backbone::load(&path, dtype, &Device::Cpu).unwrap()
}

/// 64 synthetic images served at 64 px, batch 8.
pub struct SmokeFixture {
    pub dir: tempfile::TempDir,
    pub backbone: Backbone,
    pub dataset: Dataset,
}

impl SmokeFixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_images(&dir.path().join("images"), 64, 96, 11);
        let backbone = random_backbone(dir.path(), 5, DType::F32);
        let manifest = build_manifest(&dir.path().join("images"), 0).unwrap();
        let dataset = Dataset::new(manifest, 8, 64).unwrap();
        Self {
            dir,
            backbone,
            dataset,
        }
    }

    pub fn config(&self) -> TrainingConfig {
        TrainingConfig {
            blocks: vec![BlockName::Block1Conv1],
            image_size: 64,
            batch_size: 8,
            seed: 1,
            from_scratch: false,
            ..TrainingConfig::default()
        }
    }
}

use artemis_core::params::ParamStore;
use candle_core::{Tensor, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug)]
pub struct GradReport {
    /// Worst `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, τ)` over the input and every
    /// parameter, with `τ = 1e-3 · ‖full numeric gradient‖`. The floor keeps
    /// tensors whose exact gradient vanishes (a key bias under softmax
    /// shift-invariance) from turning round-off into a unit relative error.
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn to_f64_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic gradients of `loss(store, x)` in `store.dtype()` against central
/// differences of the same function evaluated in f64 on a copy of the
/// parameters.
///
/// `build` must construct the module under the given store and return a
/// closure computing a scalar loss from the input.
pub fn gradient_check<F>(
    dtype: DType,
    seed: u64,
    input_shape: &[usize],
    param_scale: f64,
    build: impl Fn(&ParamStore) -> F,
) -> GradReport
where
    F: Fn(&Tensor) -> Tensor,
{
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = ParamStore::new(seed, dtype, &device);
    let f_lo = build(&lo);
    // Spread parameters beyond the tiny DCGAN init so every path matters.
    for (_, v) in lo.trainable() {
        let n = v.elem_count();
        let vals: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-param_scale..param_scale))
            .collect();
        let t = Tensor::from_vec(vals, v.shape(), &device)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        v.set(&t).unwrap();
    }
    let n_in: usize = input_shape.iter().product();
    let x_vals: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x_lo = Var::from_tensor(
        &Tensor::from_vec(x_vals.clone(), input_shape, &device)
            .unwrap()
            .to_dtype(dtype)
            .unwrap(),
    )
    .unwrap();
    let grads = f_lo(x_lo.as_tensor()).backward().unwrap();

    let hi = ParamStore::new(seed, DType::F64, &device);
    let f_hi = build(&hi);
    let snapshot: std::collections::HashMap<String, Tensor> = lo.tensors().into_iter().collect();
    hi.load(&snapshot).unwrap();
    let hi_params: std::collections::BTreeMap<String, Var> = hi.trainable().into_iter().collect();
    let x_hi = Var::from_tensor(&x_lo.as_tensor().to_dtype(DType::F64).unwrap()).unwrap();

    let h = 1e-6;
    let eval = |var: &Var, i: usize, delta: f64| -> f64 {
        let mut vals = to_f64_vec(var.as_tensor());
        let orig = vals[i];
        vals[i] = orig + delta;
        var.set(&Tensor::from_vec(vals.clone(), var.shape(), &device).unwrap())
            .unwrap();
        let out = f_hi(x_hi.as_tensor()).to_scalar::<f64>().unwrap();
        vals[i] = orig;
        var.set(&Tensor::from_vec(vals, var.shape(), &device).unwrap())
            .unwrap();
        out
    };
    let fd = |var: &Var| -> Vec<f64> {
        (0..var.elem_count())
            .map(|i| (eval(var, i, h) - eval(var, i, -h)) / (2.0 * h))
            .collect()
    };

    let mut targets: Vec<(String, Var, Var)> = vec![("input".into(), x_lo.clone(), x_hi.clone())];
    for (name, v) in lo.trainable() {
        targets.push((name.clone(), v, hi_params[&name].clone()));
    }
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let pairs: Vec<(String, Vec<f64>, Vec<f64>)> = targets
        .into_iter()
        .map(|(name, v_lo, v_hi)| {
            let analytic = grads
                .get(v_lo.as_tensor())
                .map(to_f64_vec)
                .unwrap_or_else(|| vec![0.0; v_lo.elem_count()]);
            (name, analytic, fd(&v_hi))
        })
        .collect();
    let total: f64 = pairs
        .iter()
        .map(|(_, _, n)| n.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let floor = 1e-3 * total.sqrt();
    for (name, analytic, numeric) in pairs {
        let e = rel_error(&analytic, &numeric, floor);
        report.checked += analytic.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name;
        }
    }
    report
}

pub fn weighted_sum(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..out.elem_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let w = Tensor::from_vec(w, out.shape(), out.device())
        .unwrap()
        .to_dtype(out.dtype())
        .unwrap();
    (out * w).unwrap().sum_all().unwrap()
}
