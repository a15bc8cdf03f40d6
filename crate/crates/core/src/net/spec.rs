//! Layer-graph description and shape validation.

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::tensor::Shape;

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Relu,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    BatchNorm {
        features: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
    /// `y = inner(x) + x` when `skip` is set, plain `inner(x)` otherwise.
    Residual {
        layers: Vec<LayerSpec>,
        #[serde(default = "default_true")]
        skip: bool,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        LayerSpec::Dense { input, output }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm {
            features,
            eps: default_eps(),
            momentum: default_momentum(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Residual { .. } => "residual",
        }
    }
}

/// A feed-forward network: input shape, ordered layers, number of logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// ReLU MLP `input -> hidden[0] -> ... -> classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::dense(prev, h));
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::dense(prev, classes));
        Self {
            input: Shape::flat(input),
            layers,
            classes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec =
            serde_json::from_str(text).map_err(|e| ProbeError::Config(e.to_string()))?;
        spec.output_shape()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Validates every layer and returns the shape of the logits.
    pub fn output_shape(&self) -> Result<Shape> {
        let mut counter = 0;
        let out = infer(&self.layers, self.input, &mut counter)?;
        if out != Shape::flat(self.classes) {
            return Err(ProbeError::Shape {
                layer: counter.saturating_sub(1),
                kind: "output".into(),
                detail: format!("network produces {out}, expected [{}]", self.classes),
            });
        }
        Ok(out)
    }

    /// Hidden widths `n_1..n_{L-1}` when this is a plain `Dense (ReLU Dense)*` stack.
    pub fn mlp_widths(&self) -> Option<Vec<usize>> {
        let mut widths = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let dense_slot = i % 2 == 0;
            match (dense_slot, layer) {
                (true, LayerSpec::Dense { output, .. }) => widths.push(*output),
                (false, LayerSpec::Relu) => {}
                _ => return None,
            }
        }
        if self.layers.len() % 2 == 0 {
            return None;
        }
        widths.pop();
        Some(widths)
    }

    /// Minimum hidden width `s` of an MLP spec.
    pub fn min_width(&self) -> Option<usize> {
        self.mlp_widths()?.into_iter().min()
    }
}

fn shape_err(layer: usize, spec: &LayerSpec, detail: String) -> ProbeError {
    ProbeError::Shape {
        layer,
        kind: spec.name().into(),
        detail,
    }
}

/// Layer-by-layer shape inference; `counter` is the depth-first layer index.
pub(crate) fn infer(layers: &[LayerSpec], mut shape: Shape, counter: &mut usize) -> Result<Shape> {
    for layer in layers {
        let idx = *counter;
        *counter += 1;
        shape = layer_output(layer, shape, idx, counter)?;
    }
    Ok(shape)
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn layer_output(layer: &LayerSpec, shape: Shape, idx: usize, counter: &mut usize) -> Result<Shape> {
    match *layer {
        LayerSpec::Dense { input, output } => {
            if input == 0 || output == 0 {
                return Err(shape_err(idx, layer, "dimensions must be positive".into()));
            }
            match shape {
                Shape::Flat { dim } if dim == input => Ok(Shape::flat(output)),
                other => Err(shape_err(idx, layer, format!("expects [{input}], got {other}"))),
            }
        }
        LayerSpec::Relu => Ok(shape),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(shape_err(idx, layer, "dimensions must be positive".into()));
            }
            match shape {
                Shape::Image {
                    channels,
                    height,
                    width,
                } if channels == in_channels => {
                    let oh = conv_out(height, kernel, stride, padding);
                    let ow = conv_out(width, kernel, stride, padding);
                    match (oh, ow) {
                        (Some(h), Some(w)) => Ok(Shape::image(out_channels, h, w)),
                        _ => Err(shape_err(
                            idx,
                            layer,
                            format!("kernel {kernel} larger than padded input {shape}"),
                        )),
                    }
                }
                other => Err(shape_err(
                    idx,
                    layer,
                    format!("expects {in_channels} input channels, got {other}"),
                )),
            }
        }
        LayerSpec::BatchNorm { features, eps, .. } => {
            if features == 0 || eps <= 0.0 {
                return Err(shape_err(idx, layer, "features and eps must be positive".into()));
            }
            if shape.channels() != features {
                return Err(shape_err(
                    idx,
                    layer,
                    format!("expects {features} features/channels, got {shape}"),
                ));
            }
            Ok(shape)
        }
        LayerSpec::MaxPool { window } => match shape {
            Shape::Image {
                channels,
                height,
                width,
            } if window > 0 && height >= window && width >= window => {
                Ok(Shape::image(channels, height / window, width / window))
            }
            other => Err(shape_err(idx, layer, format!("window {window} does not fit {other}"))),
        },
        LayerSpec::Flatten => Ok(Shape::flat(shape.size())),
        LayerSpec::Residual { ref layers, skip } => {
            let out = infer(layers, shape, counter)?;
            if skip && out != shape {
                return Err(shape_err(
                    idx,
                    layer,
                    format!("inner output {out} differs from block input {shape}"),
                ));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_widths_and_min_width() {
        let spec = NetworkSpec::mlp(4, &[8, 5, 7], 3);
        assert_eq!(spec.mlp_widths(), Some(vec![8, 5, 7]));
        assert_eq!(spec.min_width(), Some(5));
        spec.output_shape().unwrap();
    }

    #[test]
    fn mismatch_names_offending_layer() {
        let spec = NetworkSpec {
            input: Shape::flat(4),
            layers: vec![
                LayerSpec::dense(4, 6),
                LayerSpec::Relu,
                LayerSpec::dense(5, 3),
            ],
            classes: 3,
        };
        match spec.output_shape() {
            Err(ProbeError::Shape { layer, kind, .. }) => {
                assert_eq!(layer, 2);
                assert_eq!(kind, "dense");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn residual_must_preserve_shape() {
        let spec = NetworkSpec {
            input: Shape::image(2, 4, 4),
            layers: vec![
                LayerSpec::Residual {
                    layers: vec![LayerSpec::conv(2, 3, 3, 1)],
                    skip: true,
                },
                LayerSpec::Flatten,
                LayerSpec::dense(48, 2),
            ],
            classes: 2,
        };
        assert!(matches!(
            spec.output_shape(),
            Err(ProbeError::Shape { layer: 0, .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let spec = NetworkSpec {
            input: Shape::image(3, 8, 8),
            layers: vec![
                LayerSpec::conv(3, 4, 3, 1),
                LayerSpec::batch_norm(4),
                LayerSpec::Relu,
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::dense(64, 10),
            ],
            classes: 10,
        };
        let back = NetworkSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn json_defaults_fill_in() {
        let text = r#"{"input":{"kind":"image","channels":1,"height":4,"width":4},
            "layers":[{"kind":"conv2d","in_channels":1,"out_channels":2,"kernel":3,"padding":1},
                      {"kind":"batch_norm","features":2},{"kind":"flatten"},
                      {"kind":"dense","input":32,"output":2}],"classes":2}"#;
        let spec = NetworkSpec::from_json(text).unwrap();
        match &spec.layers[1] {
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                assert_eq!(*eps, 1e-5);
                assert_eq!(*momentum, 0.1);
            }
            _ => unreachable!(),
        }
    }
}
