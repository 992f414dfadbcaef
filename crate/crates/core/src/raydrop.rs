//! Per-cell return probabilities and sampled raydrop masks.
//!
//! The learned model is a logistic regression over a window of polar-grid
//! cells around each ray. Only cells the simulator actually hit can drop, so
//! training, prediction and sampling are all restricted to occupied cells.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::polar_grid::{FeatureGrid, Mask, CHANNELS, CH_OCCUPANCY};
use crate::rng::{counter_uniform, STREAM_RAYDROP};

pub const DEFAULT_WINDOW: usize = 2;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Constant,
    Logistic,
    WindowedLogistic,
    PlugIn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub channels: Vec<usize>,
    pub window: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self::windowed(DEFAULT_WINDOW)
    }
}

impl FeatureSpec {
    /// All eight channels over a `(2w+1)²` window.
    pub fn windowed(window: usize) -> Self {
        Self {
            channels: (0..CHANNELS).collect(),
            window,
        }
    }

    pub fn cells(&self) -> usize {
        (2 * self.window + 1).pow(2)
    }

    pub fn dim(&self) -> usize {
        self.channels.len() * self.cells()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c >= CHANNELS) {
            return Err(Error::input("feature channel out of range"));
        }
        Ok(())
    }
}

/// Per-channel standardization, aligned with `FeatureSpec::channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaydropModel {
    pub kind: ModelKind,
    pub feature_spec: FeatureSpec,
    pub normalization: Normalization,
    /// Constant: `[p]`. Logistic kinds: weights then bias. Plug-in: one
    /// probability per cell, row-major.
    pub params: Vec<f64>,
    /// Grid shape a plug-in model was produced for.
    pub grid_shape: Option<[usize; 2]>,
    pub final_loss: Option<f64>,
}

impl RaydropModel {
    pub fn constant(p: f64) -> Self {
        Self {
            kind: ModelKind::Constant,
            feature_spec: FeatureSpec {
                channels: Vec::new(),
                window: 0,
            },
            normalization: Normalization::identity(0),
            params: vec![p],
            grid_shape: None,
            final_loss: None,
        }
    }

    /// Logistic model with all-zero parameters.
    pub fn logistic(spec: FeatureSpec) -> Self {
        let kind = if spec.window == 0 {
            ModelKind::Logistic
        } else {
            ModelKind::WindowedLogistic
        };
        Self {
            kind,
            normalization: Normalization::identity(spec.channels.len()),
            params: vec![0.0; spec.dim() + 1],
            feature_spec: spec,
            grid_shape: None,
            final_loss: None,
        }
    }

    /// Wraps an externally produced probability grid.
    pub fn plug_in(probs: &ProbabilityGrid) -> Self {
        Self {
            kind: ModelKind::PlugIn,
            feature_spec: FeatureSpec {
                channels: Vec::new(),
                window: 0,
            },
            normalization: Normalization::identity(0),
            params: probs.data.clone(),
            grid_shape: Some([probs.rows, probs.cols]),
            final_loss: None,
        }
    }

    pub fn expected_params(&self) -> usize {
        match self.kind {
            ModelKind::Constant => 1,
            ModelKind::Logistic | ModelKind::WindowedLogistic => self.feature_spec.dim() + 1,
            ModelKind::PlugIn => self.grid_shape.map_or(0, |[r, c]| r * c),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature_spec.validate()?;
        if self.params.len() != self.expected_params() {
            return Err(Error::input(format!(
                "model has {} parameters, expected {}",
                self.params.len(),
                self.expected_params()
            )));
        }
        let n = self.feature_spec.channels.len();
        if self.normalization.mean.len() != n || self.normalization.std.len() != n {
            return Err(Error::input("normalization does not match the feature channels"));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::input("normalization std must be positive"));
        }
        match self.kind {
            ModelKind::Constant | ModelKind::PlugIn => {
                if self.params.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::input("probabilities must lie in [0, 1]"));
                }
            }
            ModelKind::Logistic => {
                if self.feature_spec.window != 0 {
                    return Err(Error::input("plain logistic model must have window 0"));
                }
            }
            ModelKind::WindowedLogistic => {}
        }
        Ok(())
    }

    /// Rounds parameters and normalization to f32, the precision they are stored at.
    pub fn round_to_f32(&mut self) {
        for v in self
            .params
            .iter_mut()
            .chain(self.normalization.mean.iter_mut())
            .chain(self.normalization.std.iter_mut())
        {
            *v = *v as f32 as f64;
        }
    }
}

/// Return probabilities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn filled(rows: usize, cols: usize, p: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![p; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Writes the standardized feature vector of one cell into `out`.
///
/// Neighbors wrap in azimuth and clamp at the top and bottom rows. Empty
/// neighbors contribute zeros apart from their (zero) occupancy bit. The
/// occupancy channel itself is never standardized.
pub fn cell_features(grid: &FeatureGrid, spec: &FeatureSpec, norm: &Normalization, row: usize, col: usize, out: &mut [f64]) {
    let w = spec.window as isize;
    let (rows, cols) = (grid.rows as isize, grid.cols as isize);
    let mut k = 0;
    for dr in -w..=w {
        let r = (row as isize + dr).clamp(0, rows - 1) as usize;
        for dc in -w..=w {
            let c = (col as isize + dc).rem_euclid(cols) as usize;
            let occupied = grid.occupied(r, c);
            for (i, &ch) in spec.channels.iter().enumerate() {
                out[k] = if ch == CH_OCCUPANCY {
                    grid.get(ch, r, c)
                } else if occupied {
                    (grid.get(ch, r, c) - norm.mean[i]) / norm.std[i]
                } else {
                    0.0
                };
                k += 1;
            }
        }
    }
}

/// Feature matrix for every cell, row-major by cell.
pub fn extract_features(grid: &FeatureGrid, spec: &FeatureSpec, norm: &Normalization) -> Vec<f64> {
    let dim = spec.dim();
    let mut out = vec![0.0; grid.rows * grid.cols * dim];
    for (cell, chunk) in out.chunks_mut(dim.max(1)).enumerate().take(grid.rows * grid.cols) {
        if dim > 0 {
            cell_features(grid, spec, norm, cell / grid.cols, cell % grid.cols, chunk);
        }
    }
    out
}

#[inline]
fn linear(params: &[f64], x: &[f64]) -> f64 {
    let (w, b) = params.split_at(params.len() - 1);
    let mut z = b[0];
    for (wi, xi) in w.iter().zip(x) {
        z += wi * xi;
    }
    z
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed stably.
#[inline]
pub fn cross_entropy(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Mean cross-entropy and its gradient for a logistic model.
///
/// `features` holds `labels.len()` rows of `params.len() - 1` values.
pub fn loss_and_gradient(params: &[f64], features: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let dim = params.len() - 1;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (x, &y) in features.chunks(dim.max(1)).zip(labels) {
        let x = &x[..dim];
        let z = linear(params, x);
        loss += cross_entropy(z, y);
        let g = sigmoid(z) - y;
        for (gi, xi) in grad.iter_mut().zip(x) {
            *gi += g * xi;
        }
        grad[dim] += g;
    }
    let n = labels.len().max(1) as f64;
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub step_size: f64,
    pub epochs: usize,
    pub batch_cells: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub feature_spec: FeatureSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: DEFAULT_LEARNING_RATE,
            epochs: 20,
            batch_cells: 1024,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            feature_spec: FeatureSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::input("step size must be positive"));
        }
        if self.batch_cells == 0 {
            return Err(Error::input("batch size must be positive"));
        }
        self.feature_spec.validate()
    }
}

/// Model plus the loss after every epoch (index 0 is the initial loss).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RaydropModel,
    pub loss_history: Vec<f64>,
}

/// One training example: (pair, row, col, label).
type Sample = (usize, usize, usize, f64);

fn normalization_for(pairs: &[(FeatureGrid, Mask)], samples: &[Sample], spec: &FeatureSpec) -> Normalization {
    let n = samples.len() as f64;
    let mut mean = Vec::with_capacity(spec.channels.len());
    let mut std = Vec::with_capacity(spec.channels.len());
    for &ch in &spec.channels {
        if ch == CH_OCCUPANCY {
            mean.push(0.0);
            std.push(1.0);
            continue;
        }
        let m = samples.iter().map(|&(g, r, c, _)| pairs[g].0.get(ch, r, c)).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|&(g, r, c, _)| (pairs[g].0.get(ch, r, c) - m).powi(2))
            .sum::<f64>()
            / n;
        let s = var.sqrt();
        mean.push(m);
        std.push(if s > 1e-12 { s } else { 1.0 });
    }
    Normalization { mean, std }
}

fn dataset_loss(model: &RaydropModel, pairs: &[(FeatureGrid, Mask)], samples: &[Sample], x: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for &(g, r, c, y) in samples {
        cell_features(&pairs[g].0, &model.feature_spec, &model.normalization, r, c, x);
        loss += cross_entropy(linear(&model.params, x), y);
    }
    loss / samples.len() as f64
}

/// Fits a logistic model to (simulated grid, real occupancy) pairs with Adam.
///
/// Only cells occupied in the simulated grid take part. The bias starts at the
/// logit of the label base rate, so the initial loss is that of the best
/// constant predictor.
pub fn train(pairs: &[(FeatureGrid, Mask)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::input("training needs at least one grid pair"));
    }
    let mut samples: Vec<Sample> = Vec::new();
    for (gi, (grid, real)) in pairs.iter().enumerate() {
        if real.rows != grid.rows || real.cols != grid.cols {
            return Err(Error::input(format!("pair {gi}: label mask shape differs from grid")));
        }
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                if grid.occupied(r, c) {
                    samples.push((gi, r, c, if real.get(r, c) { 1.0 } else { 0.0 }));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::input("no simulated returns to train on"));
    }

    let spec = cfg.feature_spec.clone();
    let dim = spec.dim();
    let mut model = RaydropModel::logistic(spec);
    model.normalization = normalization_for(pairs, &samples, &model.feature_spec);
    let base = samples.iter().map(|s| s.3).sum::<f64>() / samples.len() as f64;
    model.params[dim] = logit(base.clamp(1e-3, 0.999));

    let mut x = vec![0.0; dim];
    let mut history = vec![dataset_loss(&model, pairs, &samples, &mut x)];
    let mut m = vec![0.0; dim + 1];
    let mut v = vec![0.0; dim + 1];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; dim + 1];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_cells) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let (g, r, c, y) = samples[i];
                cell_features(&pairs[g].0, &model.feature_spec, &model.normalization, r, c, &mut x);
                let e = sigmoid(linear(&model.params, &x)) - y;
                for (gk, xk) in grad.iter_mut().zip(&x) {
                    *gk += e * xk;
                }
                grad[dim] += e;
            }
            let n = batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for k in 0..=dim {
                let g = grad[k] / n;
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                model.params[k] -= cfg.step_size * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        history.push(dataset_loss(&model, pairs, &samples, &mut x));
    }
    model.round_to_f32();
    let final_loss = dataset_loss(&model, pairs, &samples, &mut x);
    if let Some(last) = history.last_mut() {
        *last = final_loss;
    }
    model.final_loss = Some(final_loss);
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Return probability per cell; zero wherever the grid is empty.
pub fn predict(model: &RaydropModel, grid: &FeatureGrid, exec: Exec) -> Result<ProbabilityGrid> {
    model.validate()?;
    if let Some([r, c]) = model.grid_shape {
        if r != grid.rows || c != grid.cols {
            return Err(Error::input(format!(
                "plug-in probabilities are {r}x{c} but the grid is {}x{}",
                grid.rows, grid.cols
            )));
        }
    }
    let cols = grid.cols;
    let dim = model.feature_spec.dim();
    let data = par::map_range(exec, grid.rows * cols, |cell| {
        let (r, c) = (cell / cols, cell % cols);
        if !grid.occupied(r, c) {
            return 0.0;
        }
        match model.kind {
            ModelKind::Constant => model.params[0],
            ModelKind::PlugIn => model.params[cell],
            ModelKind::Logistic | ModelKind::WindowedLogistic => {
                let mut x = vec![0.0; dim];
                cell_features(grid, &model.feature_spec, &model.normalization, r, c, &mut x);
                sigmoid(linear(&model.params, &x))
            }
        }
    });
    Ok(ProbabilityGrid {
        rows: grid.rows,
        cols,
        data,
    })
}

/// Independent Bernoulli draw per cell, keyed by `(seed, row, col)`.
pub fn sample_mask(probs: &ProbabilityGrid, seed: u64, exec: Exec) -> Mask {
    let cols = probs.cols;
    let bits = par::map_range(exec, probs.rows * cols, |cell| {
        let u = counter_uniform(seed, STREAM_RAYDROP, (cell / cols) as u32, (cell % cols) as u32);
        u < probs.data[cell]
    });
    Mask {
        rows: probs.rows,
        cols,
        bits,
    }
}
