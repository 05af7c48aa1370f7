//! Fixed-topology multilayer perceptron with a single logit output.
//!
//! Parameters live in one flat `f64` vector. Layer `l` stores its weight
//! matrix row-major (`rows = fan_out`, `cols = fan_in`) followed by its bias,
//! and layers are laid out in order. Gradients are computed by a hand-written
//! reverse pass, with respect to the parameters, the input, or both.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Input width, hidden widths and activation. The output is always one
/// pre-sigmoid logit. An empty `hidden_layers` gives logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkArchitecture {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

/// Offsets of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub bias_len: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl NetworkArchitecture {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_layers,
            activation,
        }
    }

    /// `depth` hidden layers of `width` units each.
    pub fn uniform(input_dim: usize, depth: usize, width: usize, activation: Activation) -> Self {
        Self::new(input_dim, vec![width; depth], activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(1);
        dims
    }

    pub fn shape_table(&self) -> Vec<LayerShape> {
        let dims = self.dims();
        let mut offset = 0;
        dims.windows(2)
            .map(|pair| {
                let (cols, rows) = (pair[0], pair[1]);
                let shape = LayerShape {
                    rows,
                    cols,
                    bias_len: rows,
                    weight_offset: offset,
                    bias_offset: offset + rows * cols,
                };
                offset += rows * cols + rows;
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.dims().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn max_width(&self) -> usize {
        self.dims().into_iter().max().unwrap_or(1)
    }
}

/// Flat parameter vector together with its layer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub shape_table: Vec<LayerShape>,
}

impl WeightVector {
    pub fn from_values(arch: &NetworkArchitecture, values: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::dim("weight vector", expected, values.len()));
        }
        Ok(Self {
            values,
            shape_table: arch.shape_table(),
        })
    }

    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            shape_table: arch.shape_table(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks that this vector was laid out for `arch`.
    pub fn check(&self, arch: &NetworkArchitecture) -> Result<()> {
        if self.values.len() != arch.param_count() || self.shape_table != arch.shape_table() {
            return Err(Error::dim(
                "weight vector",
                arch.param_count(),
                self.values.len(),
            ));
        }
        Ok(())
    }
}

/// Input-space or parameter-space gradient.
pub type GradientVector = Vec<f64>;

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
pub fn init_weights(arch: &NetworkArchitecture, seed: u64) -> WeightVector {
    let mut rng = rng::rng_from_seed(seed);
    let mut w = WeightVector::zeros(arch);
    for shape in arch.shape_table() {
        let normal = Normal::new(0.0, 1.0 / (shape.cols as f64).sqrt()).expect("finite std");
        for v in &mut w.values[shape.weight_offset..shape.bias_offset] {
            *v = normal.sample(&mut rng);
        }
    }
    w
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a label in {0, 1}.
#[inline]
pub fn bce_loss(logit: f64, y: f64) -> f64 {
    // -y log σ(z) - (1-y) log(1-σ(z)) = softplus(z) - y z
    softplus(logit) - y * logit
}

fn check_input(arch: &NetworkArchitecture, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_dim {
        return Err(Error::dim("input vector", arch.input_dim, x.len()));
    }
    Ok(())
}

/// Forward pass on raw parameters; shapes are the caller's responsibility.
pub(crate) fn forward_raw(arch: &NetworkArchitecture, params: &[f64], x: &[f64]) -> f64 {
    let mut cur: Vec<f64> = x.to_vec();
    let mut next = Vec::with_capacity(arch.max_width());
    let shapes = arch.shape_table();
    let last = shapes.len() - 1;
    for (l, s) in shapes.iter().enumerate() {
        next.clear();
        let w = &params[s.weight_offset..s.bias_offset];
        let b = &params[s.bias_offset..s.bias_offset + s.bias_len];
        for r in 0..s.rows {
            let row = &w[r * s.cols..(r + 1) * s.cols];
            let z = b[r] + row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>();
            next.push(if l == last { z } else { arch.activation.apply(z) });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur[0]
}

/// One reverse pass through the network for a single example.
///
/// Adds `scale * dL/dw` into `param_grad` and writes `dL/dx` into
/// `input_grad` when given. Returns `(logit, loss)`.
pub(crate) fn backprop_raw(
    arch: &NetworkArchitecture,
    params: &[f64],
    x: &[f64],
    y: f64,
    scale: f64,
    mut param_grad: Option<&mut [f64]>,
    input_grad: Option<&mut [f64]>,
) -> (f64, f64) {
    let shapes = arch.shape_table();
    let n_layers = shapes.len();
    // acts[l] is the input to layer l; pre[l] its pre-activation output.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    acts.push(x.to_vec());
    for (l, s) in shapes.iter().enumerate() {
        let w = &params[s.weight_offset..s.bias_offset];
        let b = &params[s.bias_offset..s.bias_offset + s.bias_len];
        let input = &acts[l];
        let z: Vec<f64> = (0..s.rows)
            .map(|r| {
                let row = &w[r * s.cols..(r + 1) * s.cols];
                b[r] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        if l + 1 < n_layers {
            acts.push(z.iter().map(|&v| arch.activation.apply(v)).collect());
        }
        pre.push(z);
    }
    let logit = pre[n_layers - 1][0];
    let loss = bce_loss(logit, y);

    let mut delta = vec![scale * (sigmoid(logit) - y)];
    let need_input = input_grad.is_some();
    for l in (0..n_layers).rev() {
        let s = &shapes[l];
        if let Some(g) = param_grad.as_deref_mut() {
            let input = &acts[l];
            for r in 0..s.rows {
                let d = delta[r];
                let row = &mut g[s.weight_offset + r * s.cols..s.weight_offset + (r + 1) * s.cols];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
                g[s.bias_offset + r] += d;
            }
        }
        if l == 0 && !need_input {
            break;
        }
        let w = &params[s.weight_offset..s.bias_offset];
        let mut prev = vec![0.0; s.cols];
        for r in 0..s.rows {
            let d = delta[r];
            let row = &w[r * s.cols..(r + 1) * s.cols];
            for (p, wv) in prev.iter_mut().zip(row) {
                *p += d * wv;
            }
        }
        if l > 0 {
            for (c, p) in prev.iter_mut().enumerate() {
                *p *= arch.activation.derivative(pre[l - 1][c], acts[l][c]);
            }
        }
        delta = prev;
    }
    if let Some(ig) = input_grad {
        ig.copy_from_slice(&delta);
    }
    (logit, loss)
}

pub fn forward(arch: &NetworkArchitecture, w: &WeightVector, x: &[f64]) -> Result<f64> {
    w.check(arch)?;
    check_input(arch, x)?;
    Ok(forward_raw(arch, &w.values, x))
}

/// Gradient of `bce_loss(forward(x), y)` with respect to `x`.
pub fn grad_input(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    x: &[f64],
    y: f64,
) -> Result<GradientVector> {
    w.check(arch)?;
    check_input(arch, x)?;
    let mut g = vec![0.0; arch.input_dim];
    backprop_raw(arch, &w.values, x, y, 1.0, None, Some(&mut g));
    Ok(g)
}

/// Gradient of `bce_loss(forward(x), y)` with respect to the parameters.
pub fn grad_params(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    x: &[f64],
    y: f64,
) -> Result<GradientVector> {
    w.check(arch)?;
    check_input(arch, x)?;
    let mut g = vec![0.0; w.len()];
    backprop_raw(arch, &w.values, x, y, 1.0, Some(&mut g), None);
    Ok(g)
}

/// Mean loss and mean parameter gradient over a batch of examples.
pub fn batch_grad_params(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(f64, GradientVector)> {
    w.check(arch)?;
    if xs.len() != ys.len() {
        return Err(Error::dim("label vector", xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / xs.len() as f64;
    let mut g = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        check_input(arch, x)?;
        loss += backprop_raw(arch, &w.values, x, y, scale, Some(&mut g), None).1;
    }
    Ok((loss * scale, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdTarget {
    Input,
    Params,
}

/// Central finite differences of the loss, one coordinate at a time.
pub fn finite_diff_gradient(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    x: &[f64],
    y: f64,
    h: f64,
    target: FdTarget,
) -> Result<GradientVector> {
    w.check(arch)?;
    check_input(arch, x)?;
    if !(h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let loss = |p: &[f64], xv: &[f64]| bce_loss(forward_raw(arch, p, xv), y);
    let mut out = Vec::new();
    match target {
        FdTarget::Input => {
            let mut xv = x.to_vec();
            for i in 0..xv.len() {
                let orig = xv[i];
                xv[i] = orig + h;
                let up = loss(&w.values, &xv);
                xv[i] = orig - h;
                let down = loss(&w.values, &xv);
                xv[i] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
        FdTarget::Params => {
            let mut p = w.values.clone();
            for i in 0..p.len() {
                let orig = p[i];
                p[i] = orig + h;
                let up = loss(&p, x);
                p[i] = orig - h;
                let down = loss(&p, x);
                p[i] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    architecture: NetworkArchitecture,
    shape_table: Vec<LayerShape>,
    seed: Option<u64>,
    len: usize,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>.wts.json` (header) and `<stem>.wts.bin` (little-endian f64).
pub fn save_weights(
    stem: &Path,
    arch: &NetworkArchitecture,
    w: &WeightVector,
    seed: Option<u64>,
) -> Result<()> {
    w.check(arch)?;
    let header = WeightHeader {
        architecture: arch.clone(),
        shape_table: w.shape_table.clone(),
        seed,
        len: w.len(),
    };
    let json_path = with_suffix(stem, ".wts.json");
    let bin_path = with_suffix(stem, ".wts.bin");
    fs::write(&json_path, serde_json::to_vec_pretty(&header)?)
        .map_err(|e| Error::io(&json_path, e))?;
    let bytes: Vec<u8> = w.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_weights(stem: &Path) -> Result<(NetworkArchitecture, WeightVector, Option<u64>)> {
    let json_path = with_suffix(stem, ".wts.json");
    let bin_path = with_suffix(stem, ".wts.bin");
    let header: WeightHeader = serde_json::from_slice(
        &fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?,
    )?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != header.len * 8 {
        return Err(Error::dim("weight file bytes", header.len * 8, bytes.len()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let w = WeightVector::from_values(&header.architecture, values)?;
    if w.shape_table != header.shape_table {
        return Err(Error::Data(format!(
            "shape table in {} does not match its architecture",
            json_path.display()
        )));
    }
    Ok((header.architecture, w, header.seed))
}
