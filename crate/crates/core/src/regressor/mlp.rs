use nalgebra::{DMatrix, DMatrixView, DVectorView, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RegressorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network mapping a descriptor to a world point. Hidden
/// layers use `hidden`; the output layer is linear.
///
/// Parameters live in one flat vector, layer by layer: the weight matrix
/// (`out × in`, column-major) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMlp {
    sizes: Vec<usize>,
    hidden: Activation,
    params: Vec<f64>,
}

/// Activations of every layer for one batch, input first.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<DMatrix<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("cache holds the input at least")
    }
}

pub const DEFAULT_SIZES: [usize; 4] = [16, 64, 64, 3];

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl PatchMlp {
    pub fn zeros(sizes: &[usize], hidden: Activation) -> Result<Self, RegressorError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(RegressorError::Architecture(format!(
                "layer sizes {sizes:?}"
            )));
        }
        if *sizes.last().unwrap() != 3 {
            return Err(RegressorError::Architecture(format!(
                "output size {} (want 3)",
                sizes.last().unwrap()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights uniform in `[-0.5, 0.5] / sqrt(fan_in)`, biases zero.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self, RegressorError> {
        let mut m = Self::zeros(sizes, hidden)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut m.params[off..off + out * fan_in] {
                *p = rng.random_range(-0.5..=0.5) * scale;
            }
            off += out * fan_in + out;
        }
        Ok(m)
    }

    pub fn with_params(
        sizes: &[usize],
        hidden: Activation,
        params: Vec<f64>,
    ) -> Result<Self, RegressorError> {
        let mut m = Self::zeros(sizes, hidden)?;
        if params.len() != m.params.len() {
            return Err(RegressorError::DimensionMismatch {
                expected: m.params.len(),
                got: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    pub fn layer(&self, l: usize) -> (DMatrixView<'_, f64>, DVectorView<'_, f64>) {
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let w = DMatrixView::from_slice(&self.params[off..off + out * inp], out, inp);
        let b = DVectorView::from_slice(&self.params[off + out * inp..off + out * inp + out], out);
        (w, b)
    }

    /// Batched forward pass; `x` holds one descriptor per column.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<MlpCache, RegressorError> {
        if x.nrows() != self.input_dim() {
            return Err(RegressorError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.nrows(),
            });
        }
        let layers = self.layer_count();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.clone());
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &b;
            }
            if l + 1 < layers {
                let act = self.hidden;
                z.apply(|v| *v = act.apply(*v));
            }
            acts.push(z);
        }
        Ok(MlpCache { acts })
    }

    /// Gradient of `Σ_columns upstream · output` w.r.t. every parameter.
    pub fn backward_batch(&self, cache: &MlpCache, upstream: &DMatrix<f64>) -> Vec<f64> {
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = upstream.clone();
        for l in (0..self.layer_count()).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let a_prev = &cache.acts[l];
            let gw = &delta * a_prev.transpose();
            grads[off..off + out * inp].copy_from_slice(gw.as_slice());
            for (r, g) in grads[off + out * inp..off + out * inp + out]
                .iter_mut()
                .enumerate()
            {
                *g = delta.row(r).sum();
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut da = w.transpose() * &delta;
                let act = self.hidden;
                da.zip_apply(a_prev, |d, a| *d *= act.slope_from_output(a));
                delta = da;
            }
        }
        grads
    }

    pub fn forward(&self, descriptor: &[f64]) -> Result<Vector3<f64>, RegressorError> {
        let x = DMatrix::from_column_slice(descriptor.len(), 1, descriptor);
        let out = self.forward_batch(&x)?;
        let y = out.output();
        Ok(Vector3::new(y[0], y[1], y[2]))
    }

    pub fn backward(
        &self,
        descriptor: &[f64],
        upstream: &Vector3<f64>,
    ) -> Result<Vec<f64>, RegressorError> {
        let x = DMatrix::from_column_slice(descriptor.len(), 1, descriptor);
        let cache = self.forward_batch(&x)?;
        Ok(self.backward_batch(
            &cache,
            &DMatrix::from_column_slice(3, 1, upstream.as_slice()),
        ))
    }
}
