//! Parameter storage, seeded initialization and the small set of layers the
//! models are built from.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Module, Shape, Tensor, Var, D};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::bilinear_taps;
use crate::error::{Error, Result};

/// Named trainable tensors with deterministic, seeded initialization.
///
/// Parameters are created in call order from a single ChaCha stream, so a
/// model built twice from the same seed has identical weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: false,
        }
    }

    /// A store whose layers see detached views of the parameters: values can
    /// still be loaded, but no gradients are tracked for them.
    pub fn new_frozen(dtype: DType, seed: u64) -> Self {
        Self {
            frozen: true,
            ..Self::new(dtype, seed)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidParameter(format!("parameter {name} defined twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters by name. Every stored parameter must be present
    /// with a matching shape.
    pub fn restore(&self, values: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?} in checkpoint, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        candle_core::safetensors::save(&self.snapshot()?, path)?;
        Ok(())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} not found", path.display())));
        }
        let values = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.restore(&values)
    }
}

/// Checkpoint sidecar describing how parameters were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_hash: String,
    pub step: usize,
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::Config(format!("checkpoint metadata {} not found", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn linear(ps: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<Linear> {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = ps.uniform(&format!("{name}.weight"), &[out, inp], bound)?;
    let b = if bias {
        Some(ps.uniform(&format!("{name}.bias"), &[out], bound)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

/// 2-D convolution computed as patch extraction plus one matrix product.
/// Weights are laid out (out, in, k, k).
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (_, _, kh, kw) = weight.dims4()?;
        if kh != kw || stride == 0 {
            return Err(Error::Shape(format!("unsupported kernel {kh}x{kw} with stride {stride}")));
        }
        Ok(Self {
            weight,
            bias,
            kernel: kh,
            stride,
            padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            candle_core::bail!("input {h}x{w} smaller than kernel {k}");
        }
        let geometry = PatchGeometry {
            kernel: k,
            stride: s,
            padding: p,
            height: h,
            width: w,
            out_h: (h + 2 * p - k) / s + 1,
            out_w: (w + 2 * p - k) / s + 1,
        };
        let cols = x.contiguous()?.apply_op1(Im2Col(geometry))?;
        let out = self.weight.dim(0)?;
        let y = self.weight.reshape((out, cols.dim(0)?))?.matmul(&cols)?;
        y.reshape((out, b, geometry.out_h, geometry.out_w))?
            .transpose(0, 1)?
            .broadcast_add(&self.bias.reshape((1, out, 1, 1))?)
    }
}

#[derive(Debug, Clone, Copy)]
struct PatchGeometry {
    kernel: usize,
    stride: usize,
    padding: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

impl PatchGeometry {
    /// Calls `f(column_start, input_start, len)` for every run of in-bounds
    /// taps of a (B, C, H, W) input laid out as (C * k * k, B * Ho * Wo)
    /// columns. Consecutive columns of a run step `stride` through the input.
    fn for_each_run(&self, batch: usize, channels: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (h, w, ho, wo) = (self.height, self.width, self.out_h, self.out_w);
        let n_cols = batch * ho * wo;
        for kx in 0..k {
            // Output columns whose tap lands inside the row: 0 <= ox*s + kx - p < w.
            let lo = p.saturating_sub(kx).div_ceil(s);
            let hi = ((w + p).saturating_sub(kx)).div_ceil(s).min(wo);
            if lo >= hi {
                continue;
            }
            for c in 0..channels {
                for ky in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for b in 0..batch {
                        let plane = (b * channels + c) * h * w;
                        for oy in 0..ho {
                            let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&y| y < h) else {
                                continue;
                            };
                            let col = row * n_cols + (b * ho + oy) * wo + lo;
                            f(col, plane + iy * w + lo * s + kx - p, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

macro_rules! patch_kernel {
    ($storage:expr, $layout:expr, $out_len:expr, $body:expr) => {{
        let Some((start, end)) = $layout.contiguous_offsets() else {
            candle_core::bail!("patch ops need contiguous input");
        };
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($body(&v[start..end], vec![0f32; $out_len])),
            CpuStorage::F64(v) => CpuStorage::F64($body(&v[start..end], vec![0f64; $out_len])),
            _ => candle_core::bail!("patch ops support f32 and f64 only"),
        }
    }};
}

/// Patch extraction (B, C, H, W) -> (C * k * k, B * Ho * Wo).
struct Im2Col(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, _, _) = layout.shape().dims4()?;
        let g = self.0;
        let rows = c * g.kernel * g.kernel;
        let n_cols = b * g.out_h * g.out_w;
        let out = patch_kernel!(storage, layout, rows * n_cols, |src: &[_], mut dst: Vec<_>| {
            g.for_each_run(b, c, |col, inp, len| {
                for (i, d) in dst[col..col + len].iter_mut().enumerate() {
                    *d = src[inp + i * g.stride];
                }
            });
            dst
        });
        Ok((out, (rows, n_cols).into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (batch, channels, _, _) = arg.dims4()?;
        let op = Col2Im {
            geometry: self.0,
            batch,
            channels,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

/// Adjoint of [`Im2Col`]: scatters column gradients back onto the input.
struct Col2Im {
    geometry: PatchGeometry,
    batch: usize,
    channels: usize,
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let (b, c) = (self.batch, self.channels);
        let out = patch_kernel!(storage, layout, b * c * g.height * g.width, |src: &[_], mut dst: Vec<_>| {
            g.for_each_run(b, c, |col, inp, len| {
                for (i, v) in src[col..col + len].iter().enumerate() {
                    dst[inp + i * g.stride] += *v;
                }
            });
            dst
        });
        Ok((out, (b, c, g.height, g.width).into()))
    }
}

pub fn conv2d(ps: &mut ParamStore, name: &str, inp: usize, out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Conv> {
    let bound = 1.0 / ((inp * kernel * kernel) as f64).sqrt();
    let w = ps.uniform(&format!("{name}.weight"), &[out, inp, kernel, kernel], bound)?;
    let b = ps.uniform(&format!("{name}.bias"), &[out], bound)?;
    Conv::new(w, b, stride, padding)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.reshape((b, c, 2 * h, 2 * w))
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct UpConv(Conv);

impl Module for UpConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.0.forward(&upsample2(x)?)
    }
}

pub fn upsample_conv(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<UpConv> {
    Ok(UpConv(conv2d(ps, name, inp, out, 3, 1, 1)?))
}

/// Per-sample normalization over (C, H, W) with a per-channel gain and bias.
/// Each sample is normalized independently, so outputs do not depend on
/// batch composition.
#[derive(Debug, Clone)]
pub struct SampleNorm {
    gain: Tensor,
    bias: Tensor,
}

impl SampleNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.constant(&format!("{name}.gain"), &[1, channels, 1, 1], 1.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[1, channels, 1, 1], 0.0)?,
        })
    }
}

impl Module for SampleNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c * h * w))?;
        let mean = flat.mean_keepdim(1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)
    }
}

/// Single-layer LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: ps.uniform(&format!("{name}.w_ih"), &[4 * hidden, inp], bound)?,
            w_hh: ps.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the cell over `x` of shape (B, T, I). `mask` has shape (B, T)
    /// with 1 for real steps; at padded steps the state is carried over
    /// unchanged. Returns hidden states of shape (B, T, H).
    pub fn run(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let h_dim = self.hidden;
        // Input projections for all steps at once.
        let xw = x.broadcast_matmul(&self.w_ih.t()?)?.broadcast_add(&self.bias)?;
        let w_hh_t = self.w_hh.t()?;
        let mut h = Tensor::zeros((b, h_dim), x.dtype(), x.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = (xw.narrow(1, step, 1)?.squeeze(1)? + h.matmul(&w_hh_t)?)?;
            let i = candle_nn::ops::sigmoid(&gates.narrow(1, 0, h_dim)?)?;
            let f = candle_nn::ops::sigmoid(&gates.narrow(1, h_dim, h_dim)?)?;
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh()?;
            let o = candle_nn::ops::sigmoid(&gates.narrow(1, 3 * h_dim, h_dim)?)?;
            let c_new = ((f * &c)? + (i * g)?)?;
            let h_new = (o * c_new.tanh()?)?;
            let m = mask.narrow(1, step, 1)?;
            let keep = m.affine(-1.0, 1.0)?;
            c = (c_new.broadcast_mul(&m)? + c.broadcast_mul(&keep)?)?;
            h = (h_new.broadcast_mul(&m)? + h.broadcast_mul(&keep)?)?;
            outputs.push(h.clone());
        }
        Ok(Tensor::stack(&outputs, 1)?)
    }
}

/// Bilinear interpolation matrix (dst, src) with half-pixel centers.
fn interpolation_matrix(src: usize, dst: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for (o, (i0, i1, frac)) in bilinear_taps(src, dst).into_iter().enumerate() {
        m[o * src + i0] += 1.0 - frac as f64;
        m[o * src + i1] += frac as f64;
    }
    Ok(Tensor::from_vec(m, (dst, src), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of (B, C, H, W) to (B, C, size, size),
/// matching [`crate::data::rescale_image`].
pub fn resize_bilinear(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == size && w == size {
        return Ok(x.clone());
    }
    let rh = interpolation_matrix(h, size, x.dtype())?;
    let rw_t = interpolation_matrix(w, size, x.dtype())?.t()?;
    let flat = x.reshape((b * c, h, w))?;
    let rows = rh.broadcast_matmul(&flat)?;
    let out = rows.broadcast_matmul(&rw_t)?;
    Ok(out.reshape((b, c, size, size))?)
}

/// Adam without weight decay.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Standard normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Row-wise L2 normalization of a (N, D) tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

pub fn to_vec2(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Finite-difference gradient checks.
pub mod testing {
    use super::*;

    /// Largest relative error between the analytic gradient of `loss` and a
    /// central finite difference, over up to `per_param` entries of every
    /// parameter whose name starts with `prefix`.
    pub fn gradient_check(
        ps: &ParamStore,
        prefix: &str,
        per_param: usize,
        eps: f64,
        loss: &dyn Fn() -> Result<Tensor>,
    ) -> Result<f64> {
        Ok(gradient_check_probes(ps, prefix, per_param, eps, loss)?.0)
    }

    /// [`gradient_check`] that also returns the number of entries probed.
    pub fn gradient_check_probes(
        ps: &ParamStore,
        prefix: &str,
        per_param: usize,
        eps: f64,
        loss: &dyn Fn() -> Result<Tensor>,
    ) -> Result<(f64, usize)> {
        let grads = loss()?.backward()?;
        let mut worst = 0f64;
        let mut probes = 0usize;
        for name in ps.names().filter(|n| n.starts_with(prefix)).map(String::from).collect::<Vec<_>>() {
            let var = ps.get(&name).unwrap();
            let Some(g) = grads.get(var.as_tensor()) else {
                return Err(Error::InvalidParameter(format!("no gradient for {name}")));
            };
            let g: Vec<f64> = g.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let base = var.as_tensor().copy()?;
            let flat: Vec<f64> = base.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            let n = flat.len();
            let stride = (n / per_param).max(1);
            for idx in (0..n).step_by(stride).take(per_param) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = flat.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, base.dims(), &Device::Cpu)?.to_dtype(base.dtype())?)?;
                    scalar(&loss()?)
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                var.set(&base)?;
                let err = (numeric - g[idx]).abs() / (numeric.abs() + g[idx].abs()).max(1e-6);
                worst = worst.max(err);
                probes += 1;
            }
        }
        Ok((worst, probes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{images_to_tensor, rescale_image, ImageSample, ValueDomain};

    #[test]
    fn conv_matches_reference_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, stride, pad, size) in [(3, 1, 1, 7), (3, 2, 1, 8), (4, 2, 1, 8), (4, 1, 0, 4), (3, 2, 1, 5), (1, 1, 0, 3)] {
            let x = randn(&mut rng, &[2, 3, size, size], DType::F64).unwrap();
            let w = randn(&mut rng, &[4, 3, k, k], DType::F64).unwrap();
            let b = randn(&mut rng, &[4], DType::F64).unwrap();
            let ours = Conv::new(w.clone(), b.clone(), stride, pad).unwrap().forward(&x).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap().broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap()).unwrap();
            assert_eq!(ours.dims(), reference.dims(), "k{k} s{stride} p{pad}");
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k{k} s{stride} p{pad}: {diff}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for (k, stride, pad) in [(3, 1, 1), (4, 2, 1), (3, 2, 1)] {
            let mut ps = ParamStore::new(DType::F64, 6);
            let conv = conv2d(&mut ps, "c", 2, 3, k, stride, pad).unwrap();
            let x = ps.normal("x", &[2, 2, 6, 6], 1.0).unwrap();
            let loss = || -> Result<Tensor> { Ok(conv.forward(&x)?.sqr()?.sum_all()?) };
            let err = testing::gradient_check(&ps, "", 12, 1e-6, &loss).unwrap();
            assert!(err < 1e-6, "k{k} s{stride} p{pad}: {err}");
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2(&x).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0], vec![1., 1., 2., 2.]);
        assert_eq!(y[3], vec![3., 3., 4., 4.]);
    }

    #[test]
    fn init_is_seeded() {
        let build = |seed| {
            let mut ps = ParamStore::new(DType::F32, seed);
            linear(&mut ps, "l", 4, 3, true).unwrap();
            ps.snapshot().unwrap()["l.weight"].to_vec2::<f32>().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn frozen_store_tracks_loads_but_not_gradients() {
        let mut ps = ParamStore::new_frozen(DType::F32, 0);
        let l = linear(&mut ps, "l", 2, 1, false).unwrap();
        let x = Tensor::new(&[[1f32, 2.0]], &Device::Cpu).unwrap();
        let before = l.forward(&x).unwrap().to_vec2::<f32>().unwrap()[0][0];
        let grads = l.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(ps.get("l.weight").unwrap().as_tensor()).is_none());
        ps.get("l.weight").unwrap().set(&Tensor::new(&[[1f32, 1.0]], &Device::Cpu).unwrap()).unwrap();
        let after = l.forward(&x).unwrap().to_vec2::<f32>().unwrap()[0][0];
        assert_eq!(after, 3.0);
        assert_ne!(before, after);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamStore::new(DType::F32, 0);
        ps.constant("a", &[1], 0.0).unwrap();
        assert!(ps.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        let mut a = ParamStore::new(DType::F32, 3);
        conv2d(&mut a, "c", 3, 4, 3, 1, 1).unwrap();
        a.save(&path).unwrap();
        let mut b = ParamStore::new(DType::F32, 4);
        conv2d(&mut b, "c", 3, 4, 3, 1, 1).unwrap();
        b.load(&path).unwrap();
        let (sa, sb) = (a.snapshot().unwrap(), b.snapshot().unwrap());
        for k in sa.keys() {
            let d = (&sa[k] - &sb[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
        let mut c = ParamStore::new(DType::F32, 4);
        conv2d(&mut c, "other", 3, 4, 3, 1, 1).unwrap();
        assert!(matches!(c.load(&path), Err(Error::Config(_))));
        assert!(matches!(c.load(&dir.path().join("missing")), Err(Error::Config(_))));
    }

    #[test]
    fn resize_matches_image_rescale() {
        let mut data = Vec::new();
        for i in 0..(12 * 12 * 3) {
            data.push(((i * 37) % 101) as f32 / 100.0);
        }
        let img = ImageSample::new(12, 12, data, ValueDomain::Generator).unwrap();
        for size in [5, 8, 12, 20] {
            let want = images_to_tensor(&[rescale_image(&img, size).unwrap()], DType::F32).unwrap();
            let x = images_to_tensor(&[img.clone()], DType::F32).unwrap();
            let got = resize_bilinear(&x, size).unwrap();
            let d = (got - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d < 1e-5, "size {size}: {d}");
        }
    }

    #[test]
    fn lstm_mask_freezes_state() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let cell = LstmCell::new(&mut ps, "lstm", 3, 4).unwrap();
        let x = randn(&mut ChaCha8Rng::seed_from_u64(0), &[2, 3, 3], DType::F64).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 0.], [1., 1., 1.]], &Device::Cpu).unwrap();
        let h = cell.run(&x, &mask).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(h[0][1], h[0][2]);
        assert_ne!(h[1][1], h[1][2]);
        // A shorter sequence equals the prefix of the full run.
        let short = cell.run(&x.narrow(1, 0, 2).unwrap(), &mask.narrow(1, 0, 2).unwrap()).unwrap();
        assert_eq!(short.to_vec3::<f64>().unwrap()[0][1], h[0][1]);
    }

    #[test]
    fn lstm_and_norm_gradients_match_finite_differences() {
        let mut ps = ParamStore::new(DType::F64, 1);
        let cell = LstmCell::new(&mut ps, "lstm", 3, 2).unwrap();
        let norm = SampleNorm::new(&mut ps, "norm", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 3, 3], DType::F64).unwrap();
        let img = randn(&mut rng, &[2, 2, 3, 3], DType::F64).unwrap();
        let target = randn(&mut rng, &[2, 2, 3, 3], DType::F64).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 0.], [1., 1., 1.]], &Device::Cpu).unwrap();
        let loss = || -> Result<Tensor> {
            let h = cell.run(&x, &mask)?;
            let a = h.sqr()?.sum_all()?;
            let b = (norm.forward(&img)? * &target)?.sum_all()?;
            Ok((a + b)?)
        };
        let err = testing::gradient_check(&ps, "", 6, 1e-6, &loss).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}
