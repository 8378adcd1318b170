//! Point-set weighting network.
//!
//! Maps per-correspondence feature vectors to weights in `(0, global_factor)`.
//! Every point is lifted to a 128-dimensional local descriptor by a shared
//! two-layer perceptron; a feature-wise max over all points forms a global
//! descriptor of the whole set; local and global descriptors are concatenated
//! and squashed to a scalar weight by a second perceptron. Because the shared
//! perceptron and the max-pool are order-free, the output is permutation
//! equivariant and the same parameters handle sets of any size.
//!
//! The final activation remaps the softsign `x / (1 + |x|)` from `(-1, 1)`
//! onto `(0, 1)`, and the result is scaled by a global trainable factor
//! stored as `exp(rho)` so it stays positive during unconstrained training.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ppc::{CorrespondenceSet, Weights};

/// Inputs per point: shifted surface point (3), plane normal (3), signed
/// plane distance (1), match confidence (1). The layout order is fixed.
pub type FeatureVector = nalgebra::SVector<f64, FEATURE_DIM>;

/// Number of input features per correspondence.
pub const FEATURE_DIM: usize = 8;
/// Layer widths of the local descriptor perceptron.
pub const MLP1_SIZES: [usize; 3] = [FEATURE_DIM, 64, 128];
/// Layer widths of the weighting head (input = local ‖ global descriptors).
pub const MLP2_SIZES: [usize; 3] = [256, 64, 1];

const LOCAL_DIM: usize = MLP1_SIZES[2];
const CONCAT_DIM: usize = MLP2_SIZES[0];

const MODEL_MAGIC: [u8; 8] = *b"PPCWNET\0";
/// Version tag written into every model file.
pub const MODEL_VERSION: u32 = 1;

/// One dense layer, stored as `weight` (rows = outputs) and `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Weights and biases of one multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|pair| Dense::zeros(pair[1], pair[0]))
            .collect();
        Self { layers }
    }

    fn shape_matches(&self, sizes: &[usize]) -> bool {
        self.layers.len() == sizes.len() - 1
            && self
                .layers
                .iter()
                .zip(sizes.windows(2))
                .all(|(l, pair)| l.in_dim() == pair[0] && l.out_dim() == pair[1])
    }
}

/// Full trainable state of the weighting network.
///
/// `log_global` stores the logarithm of the global weighting factor; the
/// factor applied to the outputs is `exp(log_global)`, so it is positive for
/// any real parameter value. The same struct doubles as the gradient
/// container returned by [`backward`] (`log_global` then holds the gradient
/// with respect to the log-factor).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub mlp1: MlpParams,
    pub mlp2: MlpParams,
    pub log_global: f64,
}

impl NetworkParams {
    /// All-zero parameters (useful as a gradient accumulator).
    pub fn zeros() -> Self {
        Self {
            mlp1: MlpParams::zeros(&MLP1_SIZES),
            mlp2: MlpParams::zeros(&MLP2_SIZES),
            log_global: 0.0,
        }
    }

    /// Deterministic random initialization: weights are drawn from a normal
    /// distribution with variance `1 / fan_in`, biases start at zero and the
    /// global factor starts at one.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros();
        for layer in params
            .mlp1
            .layers
            .iter_mut()
            .chain(params.mlp2.layers.iter_mut())
        {
            let std = (1.0 / layer.in_dim() as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in layer.weight.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        params
    }

    /// Multiplier applied to every squashed output.
    pub fn global_factor(&self) -> f64 {
        self.log_global.exp()
    }

    /// Checks layer shapes and that every entry is finite.
    pub fn validate(&self) -> Result<()> {
        if !self.mlp1.shape_matches(&MLP1_SIZES) || !self.mlp2.shape_matches(&MLP2_SIZES) {
            return Err(Error::BadParams("network layer shapes are fixed".into()));
        }
        let finite = self
            .mlp1
            .layers
            .iter()
            .chain(self.mlp2.layers.iter())
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
            && self.log_global.is_finite();
        if !finite {
            return Err(Error::BadParams("network parameters must be finite".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters (including the global factor).
    pub fn param_count() -> usize {
        let dense = |sizes: &[usize]| -> usize {
            sizes
                .windows(2)
                .map(|pair| pair[1] * pair[0] + pair[1])
                .sum()
        };
        dense(&MLP1_SIZES) + dense(&MLP2_SIZES) + 1
    }

    /// Serializes all parameters into one flat vector. Order: for each layer
    /// of the local perceptron then the head, the weight matrix in
    /// column-major order followed by the bias; the log global factor last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(Self::param_count());
        for layer in self.mlp1.layers.iter().chain(self.mlp2.layers.iter()) {
            flat.extend(layer.weight.iter());
            flat.extend(layer.bias.iter());
        }
        flat.push(self.log_global);
        flat
    }

    /// Inverse of [`NetworkParams::flatten`].
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::param_count() {
            return Err(Error::BadParams(format!(
                "expected {} parameters, got {}",
                Self::param_count(),
                flat.len()
            )));
        }
        let mut params = Self::zeros();
        let mut idx = 0;
        for layer in params
            .mlp1
            .layers
            .iter_mut()
            .chain(params.mlp2.layers.iter_mut())
        {
            for v in layer.weight.iter_mut() {
                *v = flat[idx];
                idx += 1;
            }
            for v in layer.bias.iter_mut() {
                *v = flat[idx];
                idx += 1;
            }
        }
        params.log_global = flat[idx];
        Ok(params)
    }
}

/// Softsign remapped from `(-1, 1)` onto `(0, 1)`: `(x/(1+|x|) + 1) / 2`.
pub fn modified_softsign(x: f64) -> f64 {
    (x / (1.0 + x.abs()) + 1.0) * 0.5
}

/// Derivative of [`modified_softsign`].
fn modified_softsign_deriv(x: f64) -> f64 {
    let denom = 1.0 + x.abs();
    0.5 / (denom * denom)
}

/// Builds network inputs from a correspondence set: surface points are
/// centroid-shifted and, together with the plane distances, divided by
/// `scale`; normals and match confidences are passed through unchanged.
pub fn build_features(set: &CorrespondenceSet, scale: f64) -> Result<Vec<FeatureVector>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::BadParams(format!(
            "feature scale must be positive, got {scale}"
        )));
    }
    let c = set.centroid();
    Ok(set
        .items()
        .iter()
        .map(|corr| {
            let w = (corr.w - c) / scale;
            FeatureVector::from_column_slice(&[
                w.x,
                w.y,
                w.z,
                corr.n.x,
                corr.n.y,
                corr.n.z,
                corr.d / scale,
                corr.ngc,
            ])
        })
        .collect())
}

/// Intermediate activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    a1: DMatrix<f64>,
    z2: DMatrix<f64>,
    /// Winning column of the max-pool per descriptor row; ties go to the
    /// lowest index.
    argmax: Vec<usize>,
    zc: DMatrix<f64>,
    z3: DMatrix<f64>,
    a3: DMatrix<f64>,
    z4: DVector<f64>,
    squash: DVector<f64>,
}

fn relu_inplace(m: &mut DMatrix<f64>) {
    for v in m.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn affine(layer: &Dense, input: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = &layer.weight * input;
    for mut col in out.column_iter_mut() {
        col += &layer.bias;
    }
    out
}

/// Evaluates the network on `feats`, returning one weight per point.
///
/// Inference-only path: arithmetically identical to [`forward_cached`] but
/// activates in place and keeps no intermediates, which matters because
/// registration calls this every iteration.
pub fn forward(params: &NetworkParams, feats: &[FeatureVector]) -> Result<Weights> {
    if feats.is_empty() {
        return Err(Error::EmptySet);
    }
    params.validate()?;
    let n = feats.len();
    let mut x = DMatrix::zeros(FEATURE_DIM, n);
    for (i, f) in feats.iter().enumerate() {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::BadParams(format!("feature {i} is not finite")));
        }
        x.set_column(i, f);
    }

    let mut a1 = affine(&params.mlp1.layers[0], &x);
    relu_inplace(&mut a1);
    let mut a2 = affine(&params.mlp1.layers[1], &a1);
    relu_inplace(&mut a2);

    let mut global = DVector::from_element(LOCAL_DIM, f64::NEG_INFINITY);
    for i in 0..n {
        for r in 0..LOCAL_DIM {
            if a2[(r, i)] > global[r] {
                global[r] = a2[(r, i)];
            }
        }
    }

    let mut zc = DMatrix::zeros(CONCAT_DIM, n);
    zc.rows_mut(0, LOCAL_DIM).copy_from(&a2);
    for i in 0..n {
        zc.view_mut((LOCAL_DIM, i), (LOCAL_DIM, 1)).copy_from(&global);
    }

    let mut a3 = affine(&params.mlp2.layers[0], &zc);
    relu_inplace(&mut a3);
    let z4 = affine(&params.mlp2.layers[1], &a3);

    let factor = params.global_factor();
    Weights::new(
        z4.row(0)
            .iter()
            .map(|&z| modified_softsign(z) * factor)
            .collect(),
    )
}

/// [`forward`] variant that also returns the activations needed by
/// [`backward`].
pub fn forward_cached(
    params: &NetworkParams,
    feats: &[FeatureVector],
) -> Result<(Weights, ForwardCache)> {
    if feats.is_empty() {
        return Err(Error::EmptySet);
    }
    params.validate()?;
    let n = feats.len();
    let mut x = DMatrix::zeros(FEATURE_DIM, n);
    for (i, f) in feats.iter().enumerate() {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::BadParams(format!("feature {i} is not finite")));
        }
        x.set_column(i, f);
    }

    let z1 = affine(&params.mlp1.layers[0], &x);
    let mut a1 = z1.clone();
    relu_inplace(&mut a1);
    let z2 = affine(&params.mlp1.layers[1], &a1);
    let mut a2 = z2.clone();
    relu_inplace(&mut a2);

    // Feature-wise max over points; the strict comparison keeps the lowest
    // column index on ties, which is where the reverse pass routes gradient.
    let mut argmax = vec![0usize; LOCAL_DIM];
    let mut global = DVector::from_element(LOCAL_DIM, f64::NEG_INFINITY);
    for i in 0..n {
        for r in 0..LOCAL_DIM {
            if a2[(r, i)] > global[r] {
                global[r] = a2[(r, i)];
                argmax[r] = i;
            }
        }
    }

    let mut zc = DMatrix::zeros(CONCAT_DIM, n);
    zc.rows_mut(0, LOCAL_DIM).copy_from(&a2);
    for i in 0..n {
        zc.view_mut((LOCAL_DIM, i), (LOCAL_DIM, 1)).copy_from(&global);
    }

    let z3 = affine(&params.mlp2.layers[0], &zc);
    let mut a3 = z3.clone();
    relu_inplace(&mut a3);
    let z4_mat = affine(&params.mlp2.layers[1], &a3);
    let z4 = z4_mat.row(0).transpose();

    let squash = z4.map(modified_softsign);
    let factor = params.global_factor();
    let weights = Weights::new(squash.iter().map(|s| s * factor).collect())?;
    let cache = ForwardCache {
        x,
        z1,
        a1,
        z2,
        argmax,
        zc,
        z3,
        a3,
        z4,
        squash,
    };
    Ok((weights, cache))
}

fn relu_mask_inplace(grad: &mut DMatrix<f64>, pre: &DMatrix<f64>) {
    for (g, z) in grad.iter_mut().zip(pre.iter()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
}

fn layer_grads(delta: &DMatrix<f64>, input: &DMatrix<f64>, out: &mut Dense) {
    out.weight = delta * input.transpose();
    out.bias = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
}

/// Exact reverse-mode gradient of [`forward`].
///
/// `upstream` holds the loss gradient with respect to each output weight.
/// Returns the gradient with respect to all parameters (in a
/// [`NetworkParams`]-shaped container whose `log_global` field is the
/// gradient for the log of the global factor) and with respect to every
/// input feature vector. Max-pool gradient is routed to the winning point
/// recorded in the cache (lowest index on ties).
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(NetworkParams, Vec<FeatureVector>)> {
    let n = cache.x.ncols();
    if upstream.len() != n {
        return Err(Error::BadParams(format!(
            "upstream length {} does not match point count {n}",
            upstream.len()
        )));
    }
    let factor = params.global_factor();
    let mut grads = NetworkParams::zeros();

    // d(weight_i)/d(log_global) = squash_i * factor = weight_i.
    grads.log_global = upstream
        .iter()
        .zip(cache.squash.iter())
        .map(|(u, s)| u * s * factor)
        .sum();

    // Through the squashing activation into the head's output row.
    let delta4 = DMatrix::from_fn(1, n, |_, i| {
        upstream[i] * factor * modified_softsign_deriv(cache.z4[i])
    });
    layer_grads(&delta4, &cache.a3, &mut grads.mlp2.layers[1]);

    let mut delta3 = params.mlp2.layers[1].weight.transpose() * &delta4;
    relu_mask_inplace(&mut delta3, &cache.z3);
    layer_grads(&delta3, &cache.zc, &mut grads.mlp2.layers[0]);

    let zc_bar = params.mlp2.layers[0].weight.transpose() * &delta3;

    // Local rows flow straight back; pooled rows route their whole sum to
    // the winning point for that descriptor.
    let mut a2_bar = zc_bar.rows(0, LOCAL_DIM).into_owned();
    for r in 0..LOCAL_DIM {
        let pooled: f64 = zc_bar.row(LOCAL_DIM + r).sum();
        a2_bar[(r, cache.argmax[r])] += pooled;
    }

    let mut delta2 = a2_bar;
    relu_mask_inplace(&mut delta2, &cache.z2);
    layer_grads(&delta2, &cache.a1, &mut grads.mlp1.layers[1]);

    let mut delta1 = params.mlp1.layers[1].weight.transpose() * &delta2;
    relu_mask_inplace(&mut delta1, &cache.z1);
    layer_grads(&delta1, &cache.x, &mut grads.mlp1.layers[0]);

    let x_bar = params.mlp1.layers[0].weight.transpose() * &delta1;
    let feat_grads = (0..n)
        .map(|i| FeatureVector::from_iterator(x_bar.column(i).iter().cloned()))
        .collect();
    Ok((grads, feat_grads))
}

/// A trained model plus the bookkeeping needed to apply it: the feature
/// standardization constant, which resolution level it belongs to and the
/// seed it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub params: NetworkParams,
    pub feature_scale: f64,
    pub level: u32,
    pub training_seed: u64,
}

impl ModelRecord {
    /// Writes the model in the versioned little-endian binary layout:
    ///
    /// ```text
    /// magic    8 bytes  "PPCWNET\0"
    /// version  u32
    /// level    u32
    /// seed     u64
    /// scale    f64
    /// rho      f64      (log of the global factor)
    /// layers   u32      (count, fixed at 4)
    /// per layer: rows u32, cols u32, rows*cols f64 (column-major), rows f64
    /// ```
    ///
    /// All reals are raw IEEE-754 bit patterns, so a save/load round-trip is
    /// bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.level.to_le_bytes());
        buf.extend_from_slice(&self.training_seed.to_le_bytes());
        buf.extend_from_slice(&self.feature_scale.to_le_bytes());
        buf.extend_from_slice(&self.params.log_global.to_le_bytes());
        let layers: Vec<&Dense> = self
            .params
            .mlp1
            .layers
            .iter()
            .chain(self.params.mlp2.layers.iter())
            .collect();
        buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for layer in layers {
            buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
            for v in layer.weight.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.bias.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Reads a model written by [`ModelRecord::save`], validating the magic,
    /// version and layer shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let mut take = |len: usize| -> Result<&[u8]> {
            let end = cursor
                .checked_add(len)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::BadModelFile("file truncated".into()))?;
            let slice = &bytes[cursor..end];
            cursor = end;
            Ok(slice)
        };
        let read_u32 =
            |b: &[u8]| u32::from_le_bytes(b.try_into().expect("sized slice"));
        let read_u64 =
            |b: &[u8]| u64::from_le_bytes(b.try_into().expect("sized slice"));
        let read_f64 =
            |b: &[u8]| f64::from_le_bytes(b.try_into().expect("sized slice"));

        if take(8)? != MODEL_MAGIC {
            return Err(Error::BadModelFile("bad magic".into()));
        }
        let version = read_u32(take(4)?);
        if version != MODEL_VERSION {
            return Err(Error::BadModelFile(format!(
                "unsupported version {version}, expected {MODEL_VERSION}"
            )));
        }
        let level = read_u32(take(4)?);
        let training_seed = read_u64(take(8)?);
        let feature_scale = read_f64(take(8)?);
        let log_global = read_f64(take(8)?);
        let layer_count = read_u32(take(4)?) as usize;
        if layer_count != MLP1_SIZES.len() + MLP2_SIZES.len() - 2 {
            return Err(Error::BadModelFile(format!(
                "expected 4 layers, found {layer_count}"
            )));
        }
        let mut params = NetworkParams::zeros();
        params.log_global = log_global;
        for layer in params
            .mlp1
            .layers
            .iter_mut()
            .chain(params.mlp2.layers.iter_mut())
        {
            let rows = read_u32(take(4)?) as usize;
            let cols = read_u32(take(4)?) as usize;
            if rows != layer.out_dim() || cols != layer.in_dim() {
                return Err(Error::BadModelFile(format!(
                    "layer shape {rows}x{cols} does not match the fixed architecture"
                )));
            }
            for v in layer.weight.iter_mut() {
                *v = read_f64(take(8)?);
            }
            for v in layer.bias.iter_mut() {
                *v = read_f64(take(8)?);
            }
        }
        if cursor != bytes.len() {
            return Err(Error::BadModelFile("trailing bytes after model".into()));
        }
        Ok(Self {
            params,
            feature_scale,
            level,
            training_seed,
        })
    }
}
