//! Synthetic nonlinear ICA data: conditionally independent sources driven by
//! an auxiliary variable, mixed through a random invertible network.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{condition_number, singular_values, Matrix, NumericsError, SeededRng};

/// Magic bytes opening a dataset container.
pub const DATASET_MAGIC: &[u8; 8] = b"GCLDATA1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("could not draw a mixing layer with condition number <= {bound} in {retries} tries")]
    GenerationFailure { bound: f64, retries: usize },
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SynthError> {
    Err(SynthError::InvalidInput(msg.into()))
}

// ---------------------------------------------------------------------------
// Mixing network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingParams {
    pub layers: usize,
    pub condition_bound: f64,
    /// Negative-side slope of the leaky hidden activations.
    pub slope: f64,
    pub max_retries: usize,
}

impl Default for MixingParams {
    fn default() -> Self {
        Self {
            layers: 3,
            condition_bound: 10.0,
            slope: 0.2,
            max_retries: 1000,
        }
    }
}

/// Square feedforward mixing `x = W_L σ(… σ(W_1 s))` with leaky hidden
/// activations and a linear last layer. No biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingNet {
    pub weights: Vec<Matrix>,
    pub slope: f64,
    pub condition_bound: f64,
}

impl MixingNet {
    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.nrows())
    }

    /// Row-wise forward pass.
    pub fn apply(&self, sources: ArrayView2<f64>) -> Result<Matrix, SynthError> {
        if sources.ncols() != self.dim() {
            return invalid(format!(
                "mixing expects {} columns, got {}",
                self.dim(),
                sources.ncols()
            ));
        }
        let last = self.weights.len() - 1;
        let mut h = sources.to_owned();
        for (l, w) in self.weights.iter().enumerate() {
            h = h.dot(&w.t());
            if l < last {
                let a = self.slope;
                h.mapv_inplace(|v| if v >= 0.0 { v } else { a * v });
            }
        }
        Ok(h)
    }
}

fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Matrix {
    let g = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the distribution is Haar and the result deterministic
    Array2::from_shape_fn((n, n), |(i, j)| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        s * q[(i, j)]
    })
}

/// Three-layer mixing net with the default leaky slope.
pub fn gen_mixing_net(
    n: usize,
    condition_bound: f64,
    rng: &mut SeededRng,
) -> Result<MixingNet, SynthError> {
    let params = MixingParams {
        condition_bound,
        ..MixingParams::default()
    };
    gen_mixing_net_with(n, &params, rng)
}

/// Draws each layer as a Gaussian matrix, resampled until its condition
/// number is within the bound, then scaled to unit spectral norm. A bound of
/// exactly 1 yields Haar-random orthogonal layers.
pub fn gen_mixing_net_with(
    n: usize,
    params: &MixingParams,
    rng: &mut SeededRng,
) -> Result<MixingNet, SynthError> {
    if n == 0 {
        return invalid("mixing dimension n must be >= 1");
    }
    if params.layers == 0 {
        return invalid("mixing needs at least one layer");
    }
    if !(params.condition_bound >= 1.0) {
        return invalid(format!(
            "condition_bound must be >= 1, got {}",
            params.condition_bound
        ));
    }
    if !(params.slope > 0.0 && params.slope <= 1.0) {
        return invalid(format!("leaky slope must lie in (0, 1], got {}", params.slope));
    }
    let mut weights = Vec::with_capacity(params.layers);
    for _ in 0..params.layers {
        if params.condition_bound <= 1.0 + 1e-9 {
            weights.push(random_orthogonal(n, rng));
            continue;
        }
        let mut accepted = None;
        for _ in 0..params.max_retries.max(1) {
            let w = Array2::from_shape_simple_fn((n, n), || rng.normal());
            let kappa = condition_number(w.view())?;
            if kappa <= params.condition_bound {
                let smax = singular_values(w.view())?[0];
                accepted = Some(w / smax);
                break;
            }
        }
        match accepted {
            Some(w) => weights.push(w),
            None => {
                return Err(SynthError::GenerationFailure {
                    bound: params.condition_bound,
                    retries: params.max_retries,
                })
            }
        }
    }
    Ok(MixingNet {
        weights,
        slope: params.slope,
        condition_bound: params.condition_bound,
    })
}

/// `x = f(s)` row-wise.
pub fn apply_mixing(net: &MixingNet, sources: ArrayView2<f64>) -> Result<Matrix, SynthError> {
    net.apply(sources)
}

// ---------------------------------------------------------------------------
// Variance fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
}

/// Per-source scale modulator σᵢ over the auxiliary domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceField {
    /// σᵢ(u) = floor + Σ_b amplitude_b · exp(−‖u − center_b‖² / (2 width_b²)).
    GaussianBlobs { floor: f64, blobs: Vec<Vec<Blob>> },
    /// `values[[segment, i]]` is the scale of source `i` in that segment.
    PerSegment { values: Matrix },
}

impl VarianceField {
    pub fn sigma_at(&self, source: usize, u: &[f64]) -> f64 {
        match self {
            VarianceField::GaussianBlobs { floor, blobs } => {
                floor
                    + blobs[source]
                        .iter()
                        .map(|b| {
                            let d2 = (u[0] - b.center[0]).powi(2) + (u[1] - b.center[1]).powi(2);
                            b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp()
                        })
                        .sum::<f64>()
            }
            VarianceField::PerSegment { values } => values[[u[0] as usize, source]],
        }
    }
}

// ---------------------------------------------------------------------------
// Generator parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub n: usize,
    pub grid_side: usize,
    pub blobs_per_source: usize,
    #[serde(default = "GridParams::default_floor")]
    pub floor: f64,
    #[serde(default = "GridParams::default_amplitude")]
    pub amplitude: (f64, f64),
    #[serde(default = "GridParams::default_width")]
    pub width: (f64, f64),
}

impl GridParams {
    pub const DEFAULT_BLOBS: usize = 8;

    fn default_floor() -> f64 {
        0.3
    }
    fn default_amplitude() -> (f64, f64) {
        (0.5, 2.0)
    }
    fn default_width() -> (f64, f64) {
        (0.05, 0.2)
    }

    pub fn new(n: usize, grid_side: usize, blobs_per_source: usize) -> Self {
        Self {
            n,
            grid_side,
            blobs_per_source,
            floor: Self::default_floor(),
            amplitude: Self::default_amplitude(),
            width: Self::default_width(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub n: usize,
    pub t: usize,
    pub n_segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSpec {
    /// Independent uniform draw per source.
    Uniform { low: f64, high: f64 },
    /// One coefficient per source.
    Fixed(Vec<f64>),
}

impl Default for RhoSpec {
    fn default() -> Self {
        RhoSpec::Uniform { low: 0.5, high: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub n: usize,
    pub t: usize,
    #[serde(default)]
    pub rho: RhoSpec,
    #[serde(default = "ArParams::default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
}

impl ArParams {
    fn default_nonlinearity() -> Nonlinearity {
        Nonlinearity::Tanh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Grid(GridParams),
    Segmented(SegmentParams),
    Autoregressive(ArParams),
}

impl SourceSpec {
    pub fn n(&self) -> usize {
        match self {
            SourceSpec::Grid(p) => p.n,
            SourceSpec::Segmented(p) => p.n,
            SourceSpec::Autoregressive(p) => p.n,
        }
    }
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub sources: SourceSpec,
    #[serde(default)]
    pub mixing: Option<MixingParams>,
    pub seed: u64,
    #[serde(default)]
    pub stream: u64,
}

impl GeneratorSpec {
    /// Sources use child stream 0 of `(seed, stream)`, the mixing net child stream 1.
    pub fn generate(&self) -> Result<SourceDataset, SynthError> {
        let root = SeededRng::with_stream(self.seed, self.stream);
        let mut src_rng = root.split(0);
        let mut ds = match &self.sources {
            SourceSpec::Grid(p) => gen_grid_scale_mixture_with(p, &mut src_rng)?,
            SourceSpec::Segmented(p) => {
                gen_segmented_sources(p.n, p.t, p.n_segments, &mut src_rng)?
            }
            SourceSpec::Autoregressive(p) => gen_ar_sources_with(p, &mut src_rng)?,
        };
        if let Some(mp) = &self.mixing {
            let mut mix_rng = root.split(1);
            let net = gen_mixing_net_with(ds.n(), mp, &mut mix_rng)?;
            ds.observations = net.apply(ds.sources.view())?;
            ds.mixing = Some(net);
        }
        ds.spec = self.clone();
        Ok(ds)
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    /// Ground-truth sources, `T × n`.
    pub sources: Matrix,
    /// Mixed observations, `T × n`; `0 × n` until a mixing is applied.
    pub observations: Matrix,
    /// Auxiliary values, `T × m`.
    pub aux: Matrix,
    pub spec: GeneratorSpec,
    pub variance: Option<VarianceField>,
    pub mixing: Option<MixingNet>,
}

impl SourceDataset {
    fn sources_only(sources: Matrix, aux: Matrix, spec: SourceSpec, rng: &SeededRng) -> Self {
        let n = sources.ncols();
        Self {
            sources,
            observations: Matrix::zeros((0, n)),
            aux,
            spec: GeneratorSpec {
                sources: spec,
                mixing: None,
                seed: rng.seed(),
                stream: rng.stream(),
            },
            variance: None,
            mixing: None,
        }
    }

    pub fn n(&self) -> usize {
        self.sources.ncols()
    }

    pub fn m(&self) -> usize {
        self.aux.ncols()
    }

    pub fn len(&self) -> usize {
        self.sources.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_observations(&self) -> bool {
        self.observations.nrows() == self.len() && !self.is_empty()
    }

    /// Mixes the stored sources and keeps the net.
    pub fn mix_with(&mut self, net: MixingNet) -> Result<(), SynthError> {
        self.observations = net.apply(self.sources.view())?;
        self.mixing = Some(net);
        Ok(())
    }

    pub fn n_segments(&self) -> Option<usize> {
        match &self.spec.sources {
            SourceSpec::Segmented(p) => Some(p.n_segments),
            _ => None,
        }
    }

    /// Segment index of every row, for segmented datasets.
    pub fn segment_labels(&self) -> Option<Vec<usize>> {
        self.n_segments()
            .map(|_| self.aux.column(0).iter().map(|&v| v as usize).collect())
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Spatial scale mixture on a `grid_side × grid_side` grid with default blob ranges.
pub fn gen_grid_scale_mixture(
    n: usize,
    grid_side: usize,
    blobs_per_source: usize,
    rng: &mut SeededRng,
) -> Result<SourceDataset, SynthError> {
    gen_grid_scale_mixture_with(&GridParams::new(n, grid_side, blobs_per_source), rng)
}

/// `S[t, i] = σᵢ(ξ, η) · zᵢ` with unit-variance Laplace `z`. Row `t` is grid
/// cell `(t / side, t % side)`; `U` holds both coordinates scaled to `[0, 1]`.
pub fn gen_grid_scale_mixture_with(
    p: &GridParams,
    rng: &mut SeededRng,
) -> Result<SourceDataset, SynthError> {
    if p.n < 2 {
        return invalid(format!("grid generator needs n >= 2, got {}", p.n));
    }
    if p.grid_side < 2 {
        return invalid(format!("grid_side must be >= 2, got {}", p.grid_side));
    }
    if p.blobs_per_source < 1 {
        return invalid("blobs_per_source must be >= 1");
    }
    if !(p.floor > 0.0) {
        return invalid(format!("variance floor must be positive, got {}", p.floor));
    }
    if p.amplitude.0 < 0.0 || p.amplitude.1 < p.amplitude.0 {
        return invalid("amplitude range must satisfy 0 <= low <= high");
    }
    if !(p.width.0 > 0.0) || p.width.1 < p.width.0 {
        return invalid("width range must satisfy 0 < low <= high");
    }
    let blobs: Vec<Vec<Blob>> = (0..p.n)
        .map(|_| {
            (0..p.blobs_per_source)
                .map(|_| Blob {
                    center: [rng.uniform(), rng.uniform()],
                    width: rng.uniform_range(p.width.0, p.width.1),
                    amplitude: rng.uniform_range(p.amplitude.0, p.amplitude.1),
                })
                .collect()
        })
        .collect();
    let field = VarianceField::GaussianBlobs {
        floor: p.floor,
        blobs,
    };
    let side = p.grid_side;
    let t_len = side * side;
    let scale = (side - 1) as f64;
    let mut aux = Matrix::zeros((t_len, 2));
    let mut sources = Matrix::zeros((t_len, p.n));
    for t in 0..t_len {
        let u = [(t / side) as f64 / scale, (t % side) as f64 / scale];
        aux[[t, 0]] = u[0];
        aux[[t, 1]] = u[1];
        for i in 0..p.n {
            sources[[t, i]] = field.sigma_at(i, &u) * rng.unit_laplace();
        }
    }
    let mut ds = SourceDataset::sources_only(sources, aux, SourceSpec::Grid(p.clone()), rng);
    ds.variance = Some(field);
    Ok(ds)
}

/// Standard deviation of `log σ` across segments, for every source.
pub const SEGMENT_LOG_SIGMA_SD: f64 = 1.0;
/// `|log σ|` never exceeds this bound.
pub const SEGMENT_LOG_SIGMA_BOUND: f64 = 2.5;
const SEGMENT_EMBED_DIM: usize = 8;
const SEGMENT_HIDDEN: usize = 16;

/// Segment of row `t` when `t_len` rows are split into `k` equal segments,
/// the last one absorbing the remainder.
pub fn segment_of(t: usize, t_len: usize, k: usize) -> usize {
    (t / (t_len / k)).min(k - 1)
}

/// Nonstationary Laplace sources whose scale is constant inside each of
/// `n_segments` equispaced segments.
///
/// Per-segment scales come from a random one-hidden-layer network applied to
/// a random Gaussian embedding of the segment index,
/// `oᵢ(k) = (W₂ tanh(W₁ e_k + b₁))ᵢ`. Each source's outputs are standardized
/// across segments so every source is equally nonstationary, giving
/// `log σᵢ(k) = clamp(zᵢ(k), ±2.5)` with `zᵢ` of zero mean and unit spread.
/// `U` is the segment index as a single column.
pub fn gen_segmented_sources(
    n: usize,
    t_len: usize,
    n_segments: usize,
    rng: &mut SeededRng,
) -> Result<SourceDataset, SynthError> {
    if n == 0 {
        return invalid("n must be >= 1");
    }
    if n_segments == 0 {
        return invalid("n_segments must be >= 1");
    }
    if n_segments > t_len {
        return invalid(format!("n_segments ({n_segments}) exceeds T ({t_len})"));
    }
    let w1 = Array2::from_shape_simple_fn((SEGMENT_HIDDEN, SEGMENT_EMBED_DIM), || {
        rng.normal() / (SEGMENT_EMBED_DIM as f64).sqrt()
    });
    let b1 = Array2::from_shape_simple_fn((SEGMENT_HIDDEN, 1), || 0.5 * rng.normal());
    let w2 = Array2::from_shape_simple_fn((n, SEGMENT_HIDDEN), || {
        2.0 * rng.normal() / (SEGMENT_HIDDEN as f64).sqrt()
    });
    let mut values = Matrix::zeros((n_segments, n));
    for k in 0..n_segments {
        let e = Array2::from_shape_simple_fn((SEGMENT_EMBED_DIM, 1), || rng.normal());
        let hidden = (w1.dot(&e) + &b1).mapv(f64::tanh);
        values.row_mut(k).assign(&w2.dot(&hidden).column(0));
    }
    for mut col in values.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n_segments as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_segments as f64).sqrt();
        let scale = if sd > 0.0 { SEGMENT_LOG_SIGMA_SD / sd } else { 0.0 };
        col.mapv_inplace(|v| {
            ((v - mean) * scale)
                .clamp(-SEGMENT_LOG_SIGMA_BOUND, SEGMENT_LOG_SIGMA_BOUND)
                .exp()
        });
    }
    let mut sources = Matrix::zeros((t_len, n));
    let mut aux = Matrix::zeros((t_len, 1));
    for t in 0..t_len {
        let k = segment_of(t, t_len, n_segments);
        aux[[t, 0]] = k as f64;
        for i in 0..n {
            sources[[t, i]] = values[[k, i]] * rng.unit_laplace();
        }
    }
    let params = SegmentParams {
        n,
        t: t_len,
        n_segments,
    };
    let mut ds = SourceDataset::sources_only(sources, aux, SourceSpec::Segmented(params), rng);
    ds.variance = Some(VarianceField::PerSegment { values });
    Ok(ds)
}

/// Order-1 processes `sᵢ(t) = ρᵢ g(sᵢ(t−1)) + εᵢ(t)` with unit-variance Laplace innovations.
pub fn gen_ar_sources(
    n: usize,
    t_len: usize,
    rng: &mut SeededRng,
    nonlinearity: Nonlinearity,
) -> Result<SourceDataset, SynthError> {
    let p = ArParams {
        n,
        t: t_len,
        rho: RhoSpec::default(),
        nonlinearity,
    };
    gen_ar_sources_with(&p, rng)
}

/// As [`gen_ar_sources`] with explicit coefficients. `U` is the time index
/// `(t + 1) / T`; history pairs are formed from the observations later.
pub fn gen_ar_sources_with(p: &ArParams, rng: &mut SeededRng) -> Result<SourceDataset, SynthError> {
    if p.n == 0 {
        return invalid("n must be >= 1");
    }
    if p.t < 2 {
        return invalid(format!("autoregressive sources need T >= 2, got {}", p.t));
    }
    let rho: Vec<f64> = match &p.rho {
        RhoSpec::Uniform { low, high } => (0..p.n).map(|_| rng.uniform_range(*low, *high)).collect(),
        RhoSpec::Fixed(v) => {
            if v.len() != p.n {
                return invalid(format!("expected {} rho values, got {}", p.n, v.len()));
            }
            v.clone()
        }
    };
    if rho.iter().any(|r| !(r.abs() < 1.0)) {
        return invalid("rho values must satisfy |rho| < 1");
    }
    let mut sources = Matrix::zeros((p.t, p.n));
    for i in 0..p.n {
        sources[[0, i]] = rng.unit_laplace();
    }
    for t in 1..p.t {
        for i in 0..p.n {
            sources[[t, i]] =
                rho[i] * p.nonlinearity.apply(sources[[t - 1, i]]) + rng.unit_laplace();
        }
    }
    let aux = Array2::from_shape_fn((p.t, 1), |(t, _)| (t + 1) as f64 / p.t as f64);
    Ok(SourceDataset::sources_only(
        sources,
        aux,
        SourceSpec::Autoregressive(ArParams {
            rho: RhoSpec::Fixed(rho),
            ..p.clone()
        }),
        rng,
    ))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    rows: usize,
    n: usize,
    m: usize,
    has_observations: bool,
    spec: GeneratorSpec,
    variance: Option<VarianceField>,
    mixing: Option<MixingNet>,
}

/// Path of the JSON sidecar belonging to a dataset container.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_array(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for col in m.axis_iter(Axis(1)) {
        for v in col {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_array(r: &mut impl Read) -> Result<Matrix, SynthError> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| SynthError::Format("array shape overflows".into()))?;
    let mut m = Matrix::zeros((rows, cols));
    let mut b = [0u8; 8];
    for k in 0..len {
        r.read_exact(&mut b)?;
        m[[k % rows.max(1), k / rows.max(1)]] = f64::from_le_bytes(b);
    }
    Ok(m)
}

/// Writes `S`, `X`, `U` (column-major little-endian `f64`) after the
/// `GCLDATA1` magic, plus a JSON sidecar at `<path>.json`.
pub fn save_dataset(ds: &SourceDataset, path: &Path) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for m in [&ds.sources, &ds.observations, &ds.aux] {
        write_array(&mut w, m)?;
    }
    w.flush()?;
    let sidecar = Sidecar {
        format: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
        rows: ds.len(),
        n: ds.n(),
        m: ds.m(),
        has_observations: ds.has_observations(),
        spec: ds.spec.clone(),
        variance: ds.variance.clone(),
        mixing: ds.mixing.clone(),
    };
    let mut f = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SourceDataset, SynthError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(SynthError::Format(format!(
            "bad magic {:?}, expected GCLDATA1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let sources = read_array(&mut r)?;
    let observations = read_array(&mut r)?;
    let aux = read_array(&mut r)?;
    let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    if sidecar.rows != sources.nrows() || sidecar.n != sources.ncols() || sidecar.m != aux.ncols() {
        return Err(SynthError::Format("sidecar shapes disagree with container".into()));
    }
    Ok(SourceDataset {
        sources,
        observations,
        aux,
        spec: sidecar.spec,
        variance: sidecar.variance,
        mixing: sidecar.mixing,
    })
}
