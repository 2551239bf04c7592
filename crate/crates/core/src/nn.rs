//! Minimal layer library on top of candle's autograd.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialized from an explicit RNG so that runs are reproducible bit for
//! bit. Layers hold clones of the underlying variables; optimizer updates
//! are visible to them because candle variables share storage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PaeError, Result};
use crate::harness::container::{read_tensor, write_tensor, StoredTensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(PaeError::Internal(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        std: f64,
    ) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| PaeError::Internal(e.to_string()))?;
        let values = (0..count).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        self.insert(name, vec![value; count], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites a parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| PaeError::Config(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(PaeError::Config(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| PaeError::Config(format!("unknown parameter `{name}`")))?;
        Ok(var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// Writes one container file per parameter under `dir/<group>/`, plus a
    /// manifest with content hashes. The group is the first dotted segment.
    pub fn save(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, var) in &self.vars {
            let (group, rest) = name.split_once('.').unwrap_or(("root", name.as_str()));
            let rel = format!("{group}/{rest}.paet");
            let stored = StoredTensor::from_tensor(var.as_tensor())?;
            let path = dir.join(&rel);
            write_tensor(&path, &stored)?;
            files.insert(name.clone(), (rel, file_sha256(&path)?));
        }
        let manifest = CheckpointManifest {
            meta: meta.clone(),
            params: files
                .into_iter()
                .map(|(name, (file, sha256))| ParamEntry { name, file, sha256 })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| PaeError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into an already constructed
    /// store of identical layout, verifying content hashes.
    pub fn load(&self, dir: &Path) -> Result<CheckpointMeta> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| PaeError::Format(e.to_string()))?;
        if manifest.params.len() != self.vars.len() {
            return Err(PaeError::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                manifest.params.len(),
                self.vars.len()
            )));
        }
        for entry in &manifest.params {
            let path = dir.join(&entry.file);
            let actual = file_sha256(&path)?;
            if actual != entry.sha256 {
                return Err(PaeError::Format(format!(
                    "hash mismatch for {}: manifest {}, file {}",
                    entry.file, entry.sha256, actual
                )));
            }
            let stored = read_tensor(&path)?;
            let t = stored.to_tensor(&self.device)?;
            self.set(&entry.name, &t)?;
        }
        Ok(manifest.meta)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self> {
        let std = 1.0 / (input as f64).sqrt();
        let weight = ps.normal(rng, &format!("{name}.weight"), &[input, output], std)?;
        let bias = ps.constant(&format!("{name}.bias"), &[output], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Zero-initialized weight and no bias.
    pub fn zeros_no_bias(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = ps.constant(&format!("{name}.weight"), &[input, output], 0.0)?;
        Ok(Self { weight, bias: None })
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Tanh-approximated GELU built from elementary ops, so its gradient is the
/// exact derivative of the forward formula. Candle's fused op backpropagates
/// with six-digit constants.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + (x.sqr()?.mul(x)? * 0.044715)?)? * c)?;
    Ok(((x * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

/// Layer normalization over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: ps.constant(&format!("{name}.shift"), &[dim], 0.0)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_norm(x, LN_EPS)?
            .broadcast_mul(&self.gain)?
            .broadcast_add(&self.shift)?)
    }
}

/// Multi-head scaled dot-product attention. Queries come from `x`, keys
/// and values from `context` (which is `x` itself for self-attention).
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(PaeError::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, rng, &format!("{name}.k"), context_dim, dim)?,
            v: Linear::new(ps, rng, &format!("{name}.v"), context_dim, dim)?,
            out: Linear::new(ps, rng, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn param_count(dim: usize, context_dim: usize) -> usize {
        2 * Linear::param_count(dim, dim) + 2 * Linear::param_count(context_dim, dim)
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let m = context.dim(1)?;
        let hd = c / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(context)?, m)?;
        let v = split(self.v.forward(context)?, m)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        self.out.forward(&mixed)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, dim * MLP_RATIO)?,
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), dim * MLP_RATIO, dim)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::param_count(dim, dim * MLP_RATIO) + Linear::param_count(dim * MLP_RATIO, dim)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention to
/// a context sequence, then MLP, each on a residual branch.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        context_dim: Option<usize>,
    ) -> Result<Self> {
        let norm1 = LayerNorm::new(ps, &format!("{name}.norm1"), dim)?;
        let attn = Attention::new(ps, rng, &format!("{name}.attn"), dim, dim, heads)?;
        let cross = match context_dim {
            Some(cd) => Some((
                LayerNorm::new(ps, &format!("{name}.norm_cross"), dim)?,
                Attention::new(ps, rng, &format!("{name}.cross"), dim, cd, heads)?,
            )),
            None => None,
        };
        let norm2 = LayerNorm::new(ps, &format!("{name}.norm2"), dim)?;
        let mlp = Mlp::new(ps, rng, &format!("{name}.mlp"), dim)?;
        Ok(Self {
            norm1,
            attn,
            cross,
            norm2,
            mlp,
        })
    }

    pub fn param_count(dim: usize, context_dim: Option<usize>) -> usize {
        let mut n = 2 * LayerNorm::param_count(dim) + Attention::param_count(dim, dim) + Mlp::param_count(dim);
        if let Some(cd) = context_dim {
            n += LayerNorm::param_count(dim) + Attention::param_count(dim, cd);
        }
        n
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h)?)?;
        if let Some((norm, cross)) = &self.cross {
            let ctx = context.ok_or_else(|| {
                PaeError::Internal("cross-attention block called without context".into())
            })?;
            x = (&x + cross.forward(&norm.forward(&x)?, ctx)?)?;
        }
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Residual 3×3 convolution over the token grid: tokens `[B, rows·cols, C]`.
#[derive(Debug, Clone)]
pub struct GridConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GridConv {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        let std = 1.0 / ((dim * 9) as f64).sqrt();
        Ok(Self {
            weight: ps.normal(rng, &format!("{name}.weight"), &[dim, dim, 3, 3], std)?,
            bias: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        dim * dim * 9 + dim
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        if grid.0 * grid.1 != n {
            return Err(PaeError::Config(format!(
                "grid {grid:?} does not hold {n} tokens"
            )));
        }
        let img = x
            .reshape((b, grid.0, grid.1, c))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let y = img
            .conv2d(&self.weight, 1, 1, 1, 1)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?;
        let y = y.permute((0, 2, 3, 1))?.contiguous()?.reshape((b, n, c))?;
        Ok((x + y)?)
    }
}

/// Token-wise transformer: input projection, blocks, optional grid
/// convolution, output projection. This is the shared shape of the
/// projectors, deprojectors and pixel decoder.
#[derive(Debug, Clone)]
pub struct TokenNet {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub conv: Option<GridConv>,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenNetShape {
    pub input: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub output: usize,
    pub conv: bool,
}

impl TokenNet {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        shape: TokenNetShape,
    ) -> Result<Self> {
        let input = Linear::new(ps, rng, &format!("{name}.input"), shape.input, shape.width)?;
        let blocks = (0..shape.depth)
            .map(|i| Block::new(ps, rng, &format!("{name}.block{i}"), shape.width, shape.heads, None))
            .collect::<Result<Vec<_>>>()?;
        let conv = if shape.conv {
            Some(GridConv::new(ps, rng, &format!("{name}.conv"), shape.width)?)
        } else {
            None
        };
        let output = Linear::new(ps, rng, &format!("{name}.output"), shape.width, shape.output)?;
        Ok(Self {
            input,
            blocks,
            conv,
            output,
        })
    }

    pub fn param_count(shape: TokenNetShape) -> usize {
        Linear::param_count(shape.input, shape.width)
            + shape.depth * Block::param_count(shape.width, None)
            + if shape.conv { GridConv::param_count(shape.width) } else { 0 }
            + Linear::param_count(shape.width, shape.output)
    }

    pub fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let mut h = self.input.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h, None)?;
        }
        if let Some(conv) = &self.conv {
            h = conv.forward(&h, grid)?;
        }
        self.output.forward(&h)
    }
}

/// Scalar value of a rank-0 tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Image `[B, 3, H, W]` to patch tokens `[B, (H/p)·(W/p), 3·p·p]`, flattened
/// in (channel, row, col) order within each patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(PaeError::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, rows, patch, cols, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, rows * cols, c * patch * patch))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, grid: (usize, usize), patch: usize, channels: usize) -> Result<Tensor> {
    let (b, n, f) = tokens.dims3()?;
    if n != grid.0 * grid.1 || f != channels * patch * patch {
        return Err(PaeError::Config(format!(
            "tokens {:?} incompatible with grid {grid:?}, patch {patch}",
            tokens.dims()
        )));
    }
    Ok(tokens
        .reshape((b, grid.0, grid.1, channels, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, channels, grid.0 * patch, grid.1 * patch))?)
}
