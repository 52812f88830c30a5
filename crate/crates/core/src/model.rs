//! Feature network `h` and the two regression heads, with exact gradients.
//!
//! All parameters of a [`Model`] live in one flat `Vec<f64>`; a layout maps
//! named weight and bias blocks onto it. Weight blocks are row-major
//! `out × in` matrices, so a dense layer computes `z = x Wᵀ + b` on a batch
//! of row vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrastive::Batch;
use crate::numerics::{Matrix, SeededRng};

/// Magic bytes opening a model checkpoint.
pub const MODEL_MAGIC: &[u8; 9] = b"GCLMODEL1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::InvalidInput(msg.into()))
}

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Abs,
    Identity,
}

/// Feature network: `hidden_layers` maxout layers of `hidden_units` units
/// each (groups of `maxout_group` pre-activations), then a dense layer to
/// `n_features` outputs followed by `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNet {
    pub input_dim: usize,
    pub n_features: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub maxout_group: usize,
    pub output: OutputActivation,
}

impl FeatureNet {
    /// Two maxout layers of `2n` units, `n` absolute-value outputs.
    pub fn standard(n: usize) -> Self {
        Self {
            input_dim: n,
            n_features: n,
            hidden_layers: 2,
            hidden_units: 2 * n,
            maxout_group: 2,
            output: OutputActivation::Abs,
        }
    }
}

/// `r(x, u) = Σᵢ ψᵢ(hᵢ(x), u)` with each `ψᵢ` a two-hidden-layer softplus perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralHead {
    pub aux_dim: usize,
    pub width: usize,
}

/// `r(x, u) = h̃(x)ᵀ v(c) + a(h(x)) + b(c)` with per-class tables `v`, `b`
/// and a one-hidden-layer softplus perceptron `a`. The expander uses powers,
/// `h̃_{i,j} = hᵢ^j` for `j = 1..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFamHead {
    pub k: usize,
    pub n_classes: usize,
    pub a_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    General(GeneralHead),
    ExpFam(ExpFamHead),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub features: FeatureNet,
    pub head: HeadKind,
}

impl Architecture {
    fn validate(&self) -> Result<(), ModelError> {
        let f = &self.features;
        if f.input_dim == 0 || f.n_features == 0 {
            return invalid("feature net dimensions must be positive");
        }
        if f.hidden_layers > 0 && (f.hidden_units == 0 || f.maxout_group == 0) {
            return invalid("hidden layers need positive width and maxout group");
        }
        match &self.head {
            HeadKind::General(g) if g.width == 0 => invalid("psi width must be positive"),
            HeadKind::ExpFam(e) if e.k == 0 || e.n_classes == 0 || e.a_width == 0 => {
                invalid("exponential-family head needs k, n_classes, a_width >= 1")
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub role: ParamRole,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Block ids of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum HeadLayout {
    General(Vec<[Dense; 3]>),
    ExpFam { v: usize, b: usize, a: [Dense; 2] },
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    blocks: Vec<Block>,
    features: Vec<Dense>,
    head: HeadLayout,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, role: ParamRole| {
            blocks.push(Block {
                name,
                offset,
                rows,
                cols,
                role,
            });
            offset += rows * cols;
            blocks.len() - 1
        };
        let mut dense = |name: &str, out: usize, inp: usize| Dense {
            w: push(format!("{name}.weight"), out, inp, ParamRole::Weight),
            b: push(format!("{name}.bias"), out, 1, ParamRole::Bias),
        };
        let f = &arch.features;
        let mut features = Vec::new();
        let mut width = f.input_dim;
        for l in 0..f.hidden_layers {
            features.push(dense(
                &format!("features.{l}"),
                f.hidden_units * f.maxout_group,
                width,
            ));
            width = f.hidden_units;
        }
        features.push(dense("features.out", f.n_features, width));
        let head = match &arch.head {
            HeadKind::General(g) => HeadLayout::General(
                (0..f.n_features)
                    .map(|i| {
                        [
                            dense(&format!("psi.{i}.0"), g.width, 1 + g.aux_dim),
                            dense(&format!("psi.{i}.1"), g.width, g.width),
                            dense(&format!("psi.{i}.out"), 1, g.width),
                        ]
                    })
                    .collect(),
            ),
            HeadKind::ExpFam(e) => {
                let a = [
                    dense("a.0", e.a_width, f.n_features),
                    dense("a.out", 1, e.a_width),
                ];
                let v = push(
                    "v_table".into(),
                    e.n_classes,
                    f.n_features * e.k,
                    ParamRole::Weight,
                );
                let b = push("b_table".into(), e.n_classes, 1, ParamRole::Bias);
                HeadLayout::ExpFam { v, b, a }
            }
        };
        Layout {
            blocks,
            features,
            head,
            total: offset,
        }
    }
}

// ---------------------------------------------------------------------------
// Small kernels
// ---------------------------------------------------------------------------

#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Posterior probability of the true-pair class.
pub fn posterior(r: f64) -> f64 {
    sigmoid(r)
}

fn affine(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Matrix {
    let mut z = x.dot(&w.t());
    z += &b;
    z
}

/// Maxout over consecutive groups; ties go to the lowest index.
fn maxout(z: &Matrix, group: usize) -> (Matrix, Vec<u32>) {
    let (rows, cols) = z.dim();
    let units = cols / group;
    let mut out = Matrix::zeros((rows, units));
    let mut arg = vec![0u32; rows * units];
    for r in 0..rows {
        let zr = z.row(r);
        for u in 0..units {
            let base = u * group;
            let mut best = 0;
            for j in 1..group {
                if zr[base + j] > zr[base + best] {
                    best = j;
                }
            }
            out[[r, u]] = zr[base + best];
            arg[r * units + u] = best as u32;
        }
    }
    (out, arg)
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Gradient with the same layout as the owning model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad(pub Vec<f64>);

impl ParamGrad {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: Vec<f64>,
    layout: Layout,
}

struct FeatureCache {
    /// Input of every feature layer.
    inputs: Vec<Matrix>,
    /// Maxout winners per hidden layer, `rows × units`.
    argmax: Vec<Vec<u32>>,
    /// Pre-activation of the output layer.
    out_pre: Matrix,
    features: Matrix,
}

struct MlpCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
}

enum HeadCache {
    General(Vec<MlpCache>),
    ExpFam {
        expanded: Matrix,
        classes: Vec<usize>,
        a_pre: Matrix,
        a_act: Matrix,
    },
}

impl Model {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero; the
    /// last layer of every head perceptron and the `v` table are scaled by 0.1.
    pub fn new(arch: Architecture, rng: &mut SeededRng) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        for block in &layout.blocks {
            if block.role != ParamRole::Weight {
                continue;
            }
            let small = block.name.ends_with("out.weight") && !block.name.starts_with("features")
                || block.name == "v_table";
            let scale = if small { 0.1 } else { 1.0 } / (block.cols as f64).sqrt();
            for p in &mut params[block.range()] {
                *p = scale * rng.normal();
            }
        }
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return invalid("parameters must be finite");
        }
        Ok(Self {
            arch,
            params,
            layout,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.layout.blocks
    }

    /// Mask of parameters subject to the L2 penalty (weights, not biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for b in &self.layout.blocks {
            if b.role == ParamRole::Weight {
                mask[b.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn param_norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        let b = &self.layout.blocks[id];
        ArrayView2::from_shape((b.rows, b.cols), &self.params[b.range()]).expect("block shape")
    }

    fn vec(&self, id: usize) -> ArrayView1<'_, f64> {
        let b = &self.layout.blocks[id];
        ArrayView1::from(&self.params[b.range()])
    }

    fn grad_mat<'g>(&self, grad: &'g mut [f64], id: usize) -> ArrayViewMut2<'g, f64> {
        let b = &self.layout.blocks[id];
        ArrayViewMut2::from_shape((b.rows, b.cols), &mut grad[b.range()]).expect("block shape")
    }

    fn grad_vec<'g>(&self, grad: &'g mut [f64], id: usize) -> ArrayViewMut1<'g, f64> {
        let b = &self.layout.blocks[id];
        ArrayViewMut1::from(&mut grad[b.range()])
    }

    /// Weight and bias of feature layer `l` (the last index is the output layer).
    pub fn feature_layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let d = self.layout.features[l];
        (self.mat(d.w), self.vec(d.b))
    }

    pub fn feature_layer_count(&self) -> usize {
        self.layout.features.len()
    }

    // -- feature network ---------------------------------------------------

    fn features_cached(&self, x: ArrayView2<f64>) -> Result<FeatureCache, ModelError> {
        let f = &self.arch.features;
        if x.ncols() != f.input_dim {
            return invalid(format!(
                "feature net expects {} inputs, got {}",
                f.input_dim,
                x.ncols()
            ));
        }
        let mut inputs = Vec::with_capacity(self.layout.features.len());
        let mut argmax = Vec::with_capacity(f.hidden_layers);
        let mut h = x.to_owned();
        for d in &self.layout.features[..f.hidden_layers] {
            let z = affine(h.view(), self.mat(d.w), self.vec(d.b));
            let (out, arg) = maxout(&z, f.maxout_group);
            inputs.push(h);
            argmax.push(arg);
            h = out;
        }
        let d = self.layout.features[f.hidden_layers];
        let out_pre = affine(h.view(), self.mat(d.w), self.vec(d.b));
        inputs.push(h);
        let features = match f.output {
            OutputActivation::Abs => out_pre.mapv(f64::abs),
            OutputActivation::Identity => out_pre.clone(),
        };
        Ok(FeatureCache {
            inputs,
            argmax,
            out_pre,
            features,
        })
    }

    /// Features `h(x)` of every row.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Matrix, ModelError> {
        Ok(self.features_cached(x)?.features)
    }

    /// Features of a single observation.
    pub fn feature_forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        Ok(self.features(row)?.row(0).to_vec())
    }

    fn features_backward(&self, cache: &FeatureCache, dh: Matrix, grad: &mut [f64]) {
        let f = &self.arch.features;
        let mut dz = match f.output {
            OutputActivation::Abs => {
                let mut d = dh;
                d.zip_mut_with(&cache.out_pre, |g, &z| *g *= sign(z));
                d
            }
            OutputActivation::Identity => dh,
        };
        for l in (0..self.layout.features.len()).rev() {
            let d = self.layout.features[l];
            let input = &cache.inputs[l];
            self.grad_mat(grad, d.w).scaled_add(1.0, &dz.t().dot(input));
            self.grad_vec(grad, d.b).scaled_add(1.0, &dz.sum_axis(Axis(0)));
            if l == 0 {
                break;
            }
            let dh_prev = dz.dot(&self.mat(d.w));
            // route through the maxout of layer l - 1
            let group = f.maxout_group;
            let units = dh_prev.ncols();
            let arg = &cache.argmax[l - 1];
            let mut dz_prev = Matrix::zeros((dh_prev.nrows(), units * group));
            for r in 0..dh_prev.nrows() {
                for u in 0..units {
                    dz_prev[[r, u * group + arg[r * units + u] as usize]] = dh_prev[[r, u]];
                }
            }
            dz = dz_prev;
        }
    }

    // -- heads ---------------------------------------------------------------

    fn check_head_inputs(
        &self,
        h: ArrayView2<f64>,
        u: ArrayView2<f64>,
        classes: Option<&[usize]>,
    ) -> Result<(), ModelError> {
        if h.ncols() != self.arch.features.n_features {
            return invalid("feature width does not match the head");
        }
        match &self.arch.head {
            HeadKind::General(g) => {
                if u.ncols() != g.aux_dim || u.nrows() != h.nrows() {
                    return invalid(format!(
                        "general head expects {} aux columns on {} rows, got {}x{}",
                        g.aux_dim,
                        h.nrows(),
                        u.nrows(),
                        u.ncols()
                    ));
                }
            }
            HeadKind::ExpFam(e) => {
                let Some(c) = classes else {
                    return invalid("exponential-family head needs discrete aux classes");
                };
                if c.len() != h.nrows() {
                    return invalid("one aux class per row required");
                }
                if let Some(&bad) = c.iter().find(|&&c| c >= e.n_classes) {
                    return invalid(format!(
                        "aux class {bad} outside v-table of {} classes",
                        e.n_classes
                    ));
                }
            }
        }
        Ok(())
    }

    fn mlp_forward(&self, layers: &[Dense], input: Matrix) -> (Array1<f64>, MlpCache) {
        let pre1 = affine(input.view(), self.mat(layers[0].w), self.vec(layers[0].b));
        let act1 = pre1.mapv(softplus);
        if layers.len() == 2 {
            let out = affine(act1.view(), self.mat(layers[1].w), self.vec(layers[1].b));
            let cache = MlpCache {
                input,
                pre2: Matrix::zeros((0, 0)),
                act2: Matrix::zeros((0, 0)),
                pre1,
                act1,
            };
            return (out.column(0).to_owned(), cache);
        }
        let pre2 = affine(act1.view(), self.mat(layers[1].w), self.vec(layers[1].b));
        let act2 = pre2.mapv(softplus);
        let out = affine(act2.view(), self.mat(layers[2].w), self.vec(layers[2].b));
        (
            out.column(0).to_owned(),
            MlpCache {
                input,
                pre1,
                act1,
                pre2,
                act2,
            },
        )
    }

    /// Backward through a softplus perceptron; returns the input gradient.
    fn mlp_backward(&self, layers: &[Dense], cache: &MlpCache, dout: &Array1<f64>, grad: &mut [f64]) -> Matrix {
        let last = *layers.last().unwrap();
        let top_act = if layers.len() == 2 { &cache.act1 } else { &cache.act2 };
        let dout_col = dout.view().insert_axis(Axis(1));
        self.grad_mat(grad, last.w).scaled_add(1.0, &dout_col.t().dot(top_act));
        self.grad_vec(grad, last.b)[0] += dout.sum();
        let mut dact = dout_col.dot(&self.mat(last.w));
        if layers.len() == 3 {
            dact.zip_mut_with(&cache.pre2, |g, &a| *g *= sigmoid(a));
            self.grad_mat(grad, layers[1].w).scaled_add(1.0, &dact.t().dot(&cache.act1));
            self.grad_vec(grad, layers[1].b).scaled_add(1.0, &dact.sum_axis(Axis(0)));
            dact = dact.dot(&self.mat(layers[1].w));
        }
        dact.zip_mut_with(&cache.pre1, |g, &a| *g *= sigmoid(a));
        self.grad_mat(grad, layers[0].w).scaled_add(1.0, &dact.t().dot(&cache.input));
        self.grad_vec(grad, layers[0].b).scaled_add(1.0, &dact.sum_axis(Axis(0)));
        dact.dot(&self.mat(layers[0].w))
    }

    fn head_forward_cached(
        &self,
        h: ArrayView2<f64>,
        u: ArrayView2<f64>,
        classes: Option<&[usize]>,
    ) -> Result<(Array1<f64>, HeadCache), ModelError> {
        self.check_head_inputs(h, u, classes)?;
        let rows = h.nrows();
        match &self.layout.head {
            HeadLayout::General(comps) => {
                let mut r = Array1::zeros(rows);
                let mut caches = Vec::with_capacity(comps.len());
                let m = u.ncols();
                for (i, layers) in comps.iter().enumerate() {
                    let mut input = Matrix::zeros((rows, 1 + m));
                    input.column_mut(0).assign(&h.column(i));
                    input.slice_mut(s![.., 1..]).assign(&u);
                    let (psi, cache) = self.mlp_forward(layers, input);
                    r += &psi;
                    caches.push(cache);
                }
                Ok((r, HeadCache::General(caches)))
            }
            HeadLayout::ExpFam { v, b, a } => {
                let HeadKind::ExpFam(e) = &self.arch.head else { unreachable!() };
                let classes = classes.expect("checked").to_vec();
                let n = h.ncols();
                let expanded = Array2::from_shape_fn((rows, n * e.k), |(r, c)| {
                    h[[r, c / e.k]].powi((c % e.k) as i32 + 1)
                });
                let vt = self.mat(*v);
                let bt = self.vec(*b);
                let (a_out, a_cache) = self.mlp_forward(a, h.to_owned());
                let r = Array1::from_shape_fn(rows, |row| {
                    let c = classes[row];
                    expanded.row(row).dot(&vt.row(c)) + a_out[row] + bt[c]
                });
                Ok((
                    r,
                    HeadCache::ExpFam {
                        expanded,
                        classes,
                        a_pre: a_cache.pre1,
                        a_act: a_cache.act1,
                    },
                ))
            }
        }
    }

    fn head_backward(&self, h: ArrayView2<f64>, cache: &HeadCache, dr: &Array1<f64>, grad: &mut [f64]) -> Matrix {
        let rows = h.nrows();
        let n = h.ncols();
        let mut dh = Matrix::zeros((rows, n));
        match (&self.layout.head, cache) {
            (HeadLayout::General(comps), HeadCache::General(caches)) => {
                for (i, (layers, c)) in comps.iter().zip(caches).enumerate() {
                    let dinput = self.mlp_backward(layers, c, dr, grad);
                    dh.column_mut(i).assign(&dinput.column(0));
                }
            }
            (
                HeadLayout::ExpFam { v, b, a },
                HeadCache::ExpFam {
                    expanded,
                    classes,
                    a_pre,
                    a_act,
                },
            ) => {
                let HeadKind::ExpFam(e) = &self.arch.head else { unreachable!() };
                let k = e.k;
                {
                    let mut gv = self.grad_mat(grad, *v);
                    for row in 0..rows {
                        gv.row_mut(classes[row]).scaled_add(dr[row], &expanded.row(row));
                    }
                }
                {
                    let mut gb = self.grad_vec(grad, *b);
                    for row in 0..rows {
                        gb[classes[row]] += dr[row];
                    }
                }
                let vt = self.mat(*v);
                for row in 0..rows {
                    let vc = vt.row(classes[row]);
                    for i in 0..n {
                        let hi = h[[row, i]];
                        let mut d = 0.0;
                        let mut pow = 1.0;
                        for j in 0..k {
                            d += vc[i * k + j] * (j as f64 + 1.0) * pow;
                            pow *= hi;
                        }
                        dh[[row, i]] = dr[row] * d;
                    }
                }
                let a_cache = MlpCache {
                    input: h.to_owned(),
                    pre1: a_pre.clone(),
                    act1: a_act.clone(),
                    pre2: Matrix::zeros((0, 0)),
                    act2: Matrix::zeros((0, 0)),
                };
                dh += &self.mlp_backward(a, &a_cache, dr, grad);
            }
            _ => unreachable!("cache matches layout"),
        }
        dh
    }

    /// Regression values `r` for the rows of a batch.
    pub fn regression(&self, batch: &Batch) -> Result<Array1<f64>, ModelError> {
        let h = self.features(batch.x.view())?;
        let (r, _) = self.head_forward_cached(h.view(), batch.u.view(), batch.aux_class.as_deref())?;
        Ok(r)
    }

    /// Head output for one feature vector.
    pub fn head_forward(&self, h: &[f64], u: &[f64], class: Option<usize>) -> Result<f64, ModelError> {
        let hv = ArrayView2::from_shape((1, h.len()), h).expect("row shape");
        let uv = ArrayView2::from_shape((1, u.len()), u).expect("row shape");
        let classes = class.map(|c| vec![c]);
        let (r, _) = self.head_forward_cached(hv, uv, classes.as_deref())?;
        Ok(r[0])
    }

    /// Gradient of `Σ_rows r` with respect to the head parameters and to the features.
    pub fn head_gradient(
        &self,
        h: ArrayView2<f64>,
        u: ArrayView2<f64>,
        classes: Option<&[usize]>,
    ) -> Result<(ParamGrad, Matrix), ModelError> {
        let (r, cache) = self.head_forward_cached(h, u, classes)?;
        let mut grad = vec![0.0; self.params.len()];
        let dh = self.head_backward(h, &cache, &Array1::ones(r.len()), &mut grad);
        Ok((ParamGrad(grad), dh))
    }

    /// `½ · l2 · Σ w²` over weight blocks.
    pub fn penalty(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let sq: f64 = self
            .layout
            .blocks
            .iter()
            .filter(|b| b.role == ParamRole::Weight)
            .map(|b| self.params[b.range()].iter().map(|w| w * w).sum::<f64>())
            .sum();
        0.5 * l2 * sq
    }

    /// Mean binary cross-entropy plus the L2 penalty.
    pub fn loss(&self, batch: &Batch, l2: f64) -> Result<f64, ModelError> {
        let r = self.regression(batch)?;
        Ok(mean_bce(&r, &batch.labels) + self.penalty(l2))
    }

    /// Loss and its exact gradient. Maxout ties route to the lowest index;
    /// the absolute value uses `sign(0) = +1`.
    pub fn backward(&self, batch: &Batch, l2: f64) -> Result<(f64, ParamGrad), ModelError> {
        Ok(self.backward_with_stats(batch, l2)?.0)
    }

    /// As [`Model::backward`], also returning the number of correctly classified rows.
    pub fn backward_with_stats(&self, batch: &Batch, l2: f64) -> Result<((f64, ParamGrad), usize), ModelError> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let fc = self.features_cached(batch.x.view())?;
        let (r, hc) = self.head_forward_cached(fc.features.view(), batch.u.view(), batch.aux_class.as_deref())?;
        let rows = r.len() as f64;
        let loss = mean_bce(&r, &batch.labels) + self.penalty(l2);
        let dr = Array1::from_shape_fn(r.len(), |i| (sigmoid(r[i]) - batch.labels[i]) / rows);
        let mut grad = vec![0.0; self.params.len()];
        let dh = self.head_backward(fc.features.view(), &hc, &dr, &mut grad);
        self.features_backward(&fc, dh, &mut grad);
        if l2 != 0.0 {
            for b in self.layout.blocks.iter().filter(|b| b.role == ParamRole::Weight) {
                for k in b.range() {
                    grad[k] += l2 * self.params[k];
                }
            }
        }
        Ok(((loss, ParamGrad(grad)), correct_count(&r, &batch.labels)))
    }

    /// Maxout winners and output signs for every row: changes in this
    /// signature mark a crossing of a non-differentiable point.
    pub fn kink_signature(&self, x: ArrayView2<f64>) -> Result<Vec<u32>, ModelError> {
        let fc = self.features_cached(x)?;
        let mut sig: Vec<u32> = fc.argmax.concat();
        if self.arch.features.output == OutputActivation::Abs {
            sig.extend(fc.out_pre.iter().map(|&z| u32::from(z < 0.0)));
        }
        Ok(sig)
    }

    /// Smallest distance of any maxout pair or abs input from its tie.
    pub fn kink_margin(&self, x: ArrayView2<f64>) -> Result<f64, ModelError> {
        let f = &self.arch.features;
        let mut h = x.to_owned();
        let mut margin = f64::INFINITY;
        for d in &self.layout.features[..f.hidden_layers] {
            let z = affine(h.view(), self.mat(d.w), self.vec(d.b));
            let (out, arg) = maxout(&z, f.maxout_group);
            let units = out.ncols();
            for r in 0..z.nrows() {
                for u in 0..units {
                    let best = z[[r, u * f.maxout_group + arg[r * units + u] as usize]];
                    for j in 0..f.maxout_group {
                        if j != arg[r * units + u] as usize {
                            margin = margin.min(best - z[[r, u * f.maxout_group + j]]);
                        }
                    }
                }
            }
            h = out;
        }
        if f.output == OutputActivation::Abs {
            let d = self.layout.features[f.hidden_layers];
            let z = affine(h.view(), self.mat(d.w), self.vec(d.b));
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        Ok(margin)
    }
}

fn mean_bce(r: &Array1<f64>, labels: &[f64]) -> f64 {
    let total: f64 = r
        .iter()
        .zip(labels)
        .map(|(&r, &y)| y * softplus(-r) + (1.0 - y) * softplus(r))
        .sum();
    total / r.len() as f64
}

/// Rows classified correctly with the rule `r > 0 ⇒ true pair`.
pub fn correct_count(r: &Array1<f64>, labels: &[f64]) -> usize {
    r.iter()
        .zip(labels)
        .filter(|(&r, &y)| (r > 0.0) == (y > 0.5))
        .count()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    n_params: usize,
    meta: serde_json::Value,
}

/// `GCLMODEL1` · u64 header length · JSON header · u64 count · `f64` LE parameters.
pub fn save_checkpoint(model: &Model, meta: &serde_json::Value, path: &Path) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        arch: model.arch.clone(),
        n_params: model.n_params(),
        meta: meta.clone(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.n_params() as u64).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ModelError::Format("bad magic, expected GCLMODEL1".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    r.read_exact(&mut len)?;
    let count = u64::from_le_bytes(len) as usize;
    if count != header.n_params {
        return Err(ModelError::Format("parameter count mismatch".into()));
    }
    let mut params = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    Ok((Model::from_params(header.arch, params)?, header.meta))
}
