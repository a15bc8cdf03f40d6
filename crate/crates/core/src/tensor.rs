//! Batched activations with a per-example shape.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Shape of a single example flowing through a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat { dim: usize },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn flat(dim: usize) -> Self {
        Shape::Flat { dim }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape::Image {
            channels,
            height,
            width,
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Shape::Flat { dim } => dim,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    /// Number of normalization channels (features for flat shapes).
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Flat { dim } => dim,
            Shape::Image { channels, .. } => channels,
        }
    }

    /// Spatial positions per channel (1 for flat shapes).
    pub fn spatial(&self) -> usize {
        match *self {
            Shape::Flat { .. } => 1,
            Shape::Image { height, width, .. } => height * width,
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Flat { dim } => write!(f, "[{dim}]"),
            Shape::Image {
                channels,
                height,
                width,
            } => write!(f, "[{channels}x{height}x{width}]"),
        }
    }
}

/// `count` examples of `shape`, stored example-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub count: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, count: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.size() * count {
            return Err(ProbeError::Argument(format!(
                "tensor of {count} x {shape} needs {} values, got {}",
                shape.size() * count,
                data.len()
            )));
        }
        Ok(Self { shape, count, data })
    }

    pub fn zeros(shape: Shape, count: usize) -> Self {
        Self {
            shape,
            count,
            data: vec![0.0; shape.size() * count],
        }
    }

    /// Builds a flat-shaped tensor from row slices of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(ProbeError::Argument("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(Shape::flat(dim), rows.len(), data)
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let s = self.shape.size();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn example_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.shape.size();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Copies the listed examples, in order, into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let s = self.shape.size();
        let mut data = Vec::with_capacity(s * indices.len());
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Tensor {
            shape: self.shape,
            count: indices.len(),
            data,
        }
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Tensor> {
        if shape.size() != self.shape.size() {
            return Err(ProbeError::Argument(format!(
                "cannot reshape {} into {}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Inputs plus class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.count == 0 {
            return Err(ProbeError::Argument("batch must contain at least one example".into()));
        }
        if labels.len() != inputs.count {
            return Err(ProbeError::Argument(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.count
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(ProbeError::Argument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
