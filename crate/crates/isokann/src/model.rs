//! Small dense feed-forward approximator for chi with tanh hidden layers and
//! a sigmoid output, plus an Adam optimizer and a versioned binary
//! checkpoint codec.
//!
//! Parameters are stored per layer (row-major weights, then biases) and
//! exposed flattened in that order; optimizer accumulators and the
//! checkpoint payload use the same layout.

use crate::error::{Error, Result};
use crate::rng::{domain, SplitRng};

/// Sigmoid pre-activations are clamped to +-PREACT_CLAMP so the output is
/// strictly inside (0,1) in f64 (1 - sigmoid(34) is about 1.7e-15, still
/// representable below 1.0). Downstream log/ratio code relies on this.
const PREACT_CLAMP: f64 = 34.0;

/// Checkpoint header: magic, format version.
const CHECKPOINT_MAGIC: &[u8; 8] = b"CHIMODEL";
const CHECKPOINT_VERSION: u32 = 1;

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-PREACT_CLAMP, PREACT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// Feed-forward network x -> (0,1). `layer_dims` starts with the input
/// dimension and ends with 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiModel {
    layer_dims: Vec<usize>,
    /// weights[l] is row-major (layer_dims[l+1] x layer_dims[l]).
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ChiModel {
    /// All-zero parameters: forward == sigmoid(0) == 0.5 everywhere.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        Self::validate_dims(layer_dims)?;
        let weights = layer_pairs(layer_dims).map(|(n_in, n_out)| vec![0.0; n_in * n_out]).collect();
        let biases = layer_pairs(layer_dims).map(|(_, n_out)| vec![0.0; n_out]).collect();
        Ok(ChiModel { layer_dims: layer_dims.to_vec(), weights, biases })
    }

    /// Glorot-uniform weights, zero biases, drawn deterministically from the
    /// master seed (one stream per layer).
    pub fn glorot(layer_dims: &[usize], master_seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_dims)?;
        for (l, (n_in, n_out)) in layer_pairs(layer_dims).enumerate() {
            let mut rng = SplitRng::from_key(master_seed, domain::MODEL_INIT, l as u64, 0);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for w in model.weights[l].iter_mut() {
                *w = rng.uniform_in(-bound, bound);
            }
        }
        Ok(model)
    }

    /// Build from explicit parameters (test fixtures, checkpoint loading).
    pub fn from_parts(layer_dims: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        Self::validate_dims(&layer_dims)?;
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::InvalidArgument(format!(
                "expected {n_layers} weight/bias blocks, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, (n_in, n_out)) in layer_pairs(&layer_dims).enumerate() {
            if weights[l].len() != n_in * n_out {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} weights: expected {} entries, got {}",
                    n_in * n_out,
                    weights[l].len()
                )));
            }
            if biases[l].len() != n_out {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} biases: expected {n_out} entries, got {}",
                    biases[l].len()
                )));
            }
        }
        Ok(ChiModel { layer_dims, weights, biases })
    }

    fn validate_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output layer dims".into()));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "output dimension must be 1, got {}",
                layer_dims.last().unwrap()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer dims must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Total parameter count, sum of (n_in + 1) * n_out over layers.
    pub fn param_count(&self) -> usize {
        layer_pairs(&self.layer_dims).map(|(n_in, n_out)| (n_in + 1) * n_out).sum()
    }

    /// Flatten parameters: per layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            flat.extend_from_slice(&self.weights[l]);
            flat.extend_from_slice(&self.biases[l]);
        }
        flat
    }

    /// Overwrite parameters from the flat layout produced by [`params`](Self::params).
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: flat.len() });
        }
        let mut at = 0;
        for l in 0..self.weights.len() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "x", component: i });
            }
        }
        Ok(())
    }

    /// chi(x), strictly inside (0,1).
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let n_layers = self.weights.len();
        for l in 0..n_layers {
            h = self.layer_out(l, &h, l + 1 == n_layers);
        }
        Ok(h[0])
    }

    fn layer_out(&self, l: usize, h: &[f64], is_output: bool) -> Vec<f64> {
        let n_in = self.layer_dims[l];
        let n_out = self.layer_dims[l + 1];
        let w = &self.weights[l];
        let mut out = Vec::with_capacity(n_out);
        for r in 0..n_out {
            let row = &w[r * n_in..(r + 1) * n_in];
            let z = self.biases[l][r] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            out.push(if is_output { sigmoid(z) } else { z.tanh() });
        }
        out
    }

    /// d chi / d x, by backpropagation.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        // forward, caching activations per layer (activations[0] = x)
        let n_layers = self.weights.len();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        for l in 0..n_layers {
            let next = self.layer_out(l, &activations[l], l + 1 == n_layers);
            activations.push(next);
        }
        // backward: delta = d chi / d z_l
        let y = activations[n_layers][0];
        let mut delta = vec![y * (1.0 - y)];
        for l in (0..n_layers).rev() {
            let n_in = self.layer_dims[l];
            let n_out = self.layer_dims[l + 1];
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                let row = &w[r * n_in..(r + 1) * n_in];
                for (p, &wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            if l > 0 {
                // activation of layer l-1's output is tanh; tanh' = 1 - h^2
                for (p, &h) in prev.iter_mut().zip(&activations[l]) {
                    *p *= 1.0 - h * h;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// MSE loss over the batch and its gradient with respect to the flat
    /// parameter vector. Does not mutate the model.
    pub fn loss_and_grads(&self, xs: &[Vec<f64>], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if xs.len() != targets.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), got: targets.len() });
        }
        for (i, t) in targets.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::NonFinite { what: "target", component: i });
            }
        }
        let n_layers = self.weights.len();
        let batch = xs.len() as f64;
        let mut loss = 0.0;
        let mut grad_w: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut grad_b: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        for (x, &t) in xs.iter().zip(targets) {
            self.check_input(x)?;
            let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
            activations.push(x.clone());
            for l in 0..n_layers {
                let next = self.layer_out(l, &activations[l], l + 1 == n_layers);
                activations.push(next);
            }
            let y = activations[n_layers][0];
            let err = y - t;
            loss += err * err;
            // dL/dy for the mean-squared error with 1/batch normalization
            let dy = 2.0 * err / batch;
            let mut delta = vec![dy * y * (1.0 - y)];
            for l in (0..n_layers).rev() {
                let n_in = self.layer_dims[l];
                let n_out = self.layer_dims[l + 1];
                let h_in = &activations[l];
                for r in 0..n_out {
                    let d = delta[r];
                    grad_b[l][r] += d;
                    let row = &mut grad_w[l][r * n_in..(r + 1) * n_in];
                    for (g, &h) in row.iter_mut().zip(h_in) {
                        *g += d * h;
                    }
                }
                if l > 0 {
                    let w = &self.weights[l];
                    let mut prev = vec![0.0; n_in];
                    for r in 0..n_out {
                        let d = delta[r];
                        let row = &w[r * n_in..(r + 1) * n_in];
                        for (p, &wv) in prev.iter_mut().zip(row) {
                            *p += d * wv;
                        }
                    }
                    for (p, &h) in prev.iter_mut().zip(h_in) {
                        *p *= 1.0 - h * h;
                    }
                    delta = prev;
                }
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        for l in 0..n_layers {
            flat.extend_from_slice(&grad_w[l]);
            flat.extend_from_slice(&grad_b[l]);
        }
        Ok((loss / batch, flat))
    }
}

/// (n_in, n_out) pairs of consecutive layer dims.
fn layer_pairs(dims: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    dims.windows(2).map(|w| (w[0], w[1]))
}

/// Adam state over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &ChiModel, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; model.param_count()],
            v: vec![0.0; model.param_count()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam step on the flat parameter vector, in place.
    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// One full-batch Adam step on the MSE; returns the loss before the update.
pub fn train_batch(
    model: &mut ChiModel,
    opt: &mut OptimizerState,
    xs: &[Vec<f64>],
    targets: &[f64],
) -> Result<f64> {
    if opt.m.len() != model.param_count() {
        return Err(Error::DimensionMismatch { expected: model.param_count(), got: opt.m.len() });
    }
    let (loss, grads) = model.loss_and_grads(xs, targets)?;
    let mut params = model.params();
    opt.apply(&mut params, &grads);
    model.set_params(&params)?;
    Ok(loss)
}

/// Serialize model + optimizer. Layout (little-endian throughout):
/// magic "CHIMODEL", u32 version, u32 layer-dim count, u32 dims,
/// per layer f64 weights (row-major) then f64 biases,
/// u64 Adam step, f64 lr/beta1/beta2/epsilon, f64 m array, f64 v array
/// (m and v over the flat parameter layout).
pub fn checkpoint_save(model: &ChiModel, opt: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layer_dims.len() as u32).to_le_bytes());
    for &d in &model.layer_dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for l in 0..model.weights.len() {
        for &w in &model.weights[l] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &model.biases[l] {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.extend_from_slice(&opt.step.to_le_bytes());
    for v in [opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &opt.m {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &opt.v {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload while reading {what} (need {n} bytes at offset {}, have {})",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64_array(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Inverse of [`checkpoint_save`]; rejects bad magic, unknown versions, and
/// truncated or oversized payloads without constructing a partial model.
pub fn checkpoint_load(bytes: &[u8]) -> Result<(ChiModel, OptimizerState)> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a model checkpoint".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n_dims = cur.u32("layer-dim count")? as usize;
    if !(2..=32).contains(&n_dims) {
        return Err(Error::Checkpoint(format!("implausible layer-dim count {n_dims}")));
    }
    let mut layer_dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        let d = cur.u32("layer dim")? as usize;
        if d == 0 || d > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible layer dim {d}")));
        }
        layer_dims.push(d);
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(Error::Checkpoint(format!(
            "output dimension must be 1, got {}",
            layer_dims.last().unwrap()
        )));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (n_in, n_out) in layer_pairs(&layer_dims) {
        weights.push(cur.f64_array(n_in * n_out, "weights")?);
        biases.push(cur.f64_array(n_out, "biases")?);
    }
    let model = ChiModel::from_parts(layer_dims, weights, biases)
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameter blocks: {e}")))?;

    let step = cur.u64("optimizer step")?;
    let learning_rate = cur.f64("learning rate")?;
    let beta1 = cur.f64("beta1")?;
    let beta2 = cur.f64("beta2")?;
    let epsilon = cur.f64("epsilon")?;
    let m = cur.f64_array(model.param_count(), "first moments")?;
    let v = cur.f64_array(model.param_count(), "second moments")?;
    if cur.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after optimizer state",
            bytes.len() - cur.at
        )));
    }
    let opt = OptimizerState { learning_rate, beta1, beta2, epsilon, step, m, v };
    Ok((model, opt))
}
