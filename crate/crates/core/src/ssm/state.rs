use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One `state_dim × embed_dim` matrix per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StateStack<T> {
    layers: Vec<Array2<T>>,
}

impl<T: Scalar> StateStack<T> {
    pub fn zeros(num_layers: usize, state_dim: usize, embed_dim: usize) -> Self {
        StateStack {
            layers: (0..num_layers).map(|_| Array2::zeros((state_dim, embed_dim))).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Array2<T>>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let dim = first.dim();
            if layers.iter().any(|l| l.dim() != dim) {
                return Err(Error::input("state layers must share one shape"));
            }
        }
        // keep every layer in standard layout so slices are contiguous
        let layers = layers
            .into_iter()
            .map(|l| {
                if l.is_standard_layout() {
                    l
                } else {
                    l.as_standard_layout().to_owned()
                }
            })
            .collect();
        Ok(StateStack { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(state_dim, embed_dim)`, or `(0, 0)` for an empty stack.
    pub fn layer_shape(&self) -> (usize, usize) {
        self.layers.first().map(|l| l.dim()).unwrap_or((0, 0))
    }

    pub fn layer(&self, idx: usize) -> &Array2<T> {
        &self.layers[idx]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut Array2<T> {
        &mut self.layers[idx]
    }

    pub fn layers(&self) -> &[Array2<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Array2<T>> {
        self.layers
    }

    pub fn layer_slice(&self, idx: usize) -> &[T] {
        self.layers[idx]
            .as_slice()
            .expect("state layers are kept in standard layout")
    }

    pub fn layer_slice_mut(&mut self, idx: usize) -> &mut [T] {
        self.layers[idx]
            .as_slice_mut()
            .expect("state layers are kept in standard layout")
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_layers() == other.num_layers() && self.layer_shape() == other.layer_shape()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// `self += weight * other`, layer by layer.
    pub fn add_scaled(&mut self, weight: T, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::input("state stacks differ in shape"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.scaled_add(weight, src);
        }
        Ok(())
    }

    pub fn scale(&mut self, weight: T) {
        for l in &mut self.layers {
            l.mapv_inplace(|v| v * weight);
        }
    }

    /// Frobenius inner product summed over layers, accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::input("state stacks differ in shape"));
        }
        let mut acc = 0.0f64;
        for idx in 0..self.num_layers() {
            acc += self
                .layer_slice(idx)
                .iter()
                .zip(other.layer_slice(idx))
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum::<f64>();
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).map(f64::sqrt).unwrap_or(0.0)
    }

    pub fn cast<U: Scalar>(&self) -> StateStack<U> {
        StateStack {
            layers: self
                .layers
                .iter()
                .map(|l| l.mapv(|v| U::from_f64_lossy(v.as_f64())))
                .collect(),
        }
    }

    /// Keep only the listed layers, in the given order.
    pub fn select_layers(&self, keep: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(keep.len());
        for &idx in keep {
            let layer = self
                .layers
                .get(idx)
                .ok_or_else(|| Error::input(format!("layer {idx} out of range")))?;
            layers.push(layer.clone());
        }
        Ok(StateStack { layers })
    }

    /// Flatten all layers into one vector (layer-major, row-major).
    pub fn flatten(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.iter().copied()).collect()
    }
}

impl<T: Scalar> std::ops::Add for &StateStack<T> {
    type Output = StateStack<T>;

    fn add(self, rhs: Self) -> StateStack<T> {
        let mut out = self.clone();
        out.add_scaled(T::one(), rhs).expect("state stacks differ in shape");
        out
    }
}
