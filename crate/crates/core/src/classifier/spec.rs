//! Network architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        /// `[height, width]`
        kernel: [usize; 2],
        stride: [usize; 2],
        /// `[top, bottom, left, right]`
        padding: [usize; 4],
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: [usize; 2],
        stride: [usize; 2],
    },
    /// Fully connected; flattens its input.
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    /// Output `[c, h, w]` for input `[c, h, w]`.
    pub fn output_shape(&self, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        match *self {
            LayerSpec::Conv {
                filters,
                kernel: [kh, kw],
                stride: [sh, sw],
                padding: [pt, pb, pl, pr],
            } => {
                let (ph, pw) = (h + pt + pb, w + pl + pr);
                if filters == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 || ph < kh || pw < kw {
                    return Err(Error::shape(
                        format!("conv {kh}x{kw} input of at least that size"),
                        format!("[{c}, {h}, {w}] padded to {ph}x{pw}"),
                    ));
                }
                Ok([filters, (ph - kh) / sh + 1, (pw - kw) / sw + 1])
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Softmax => Ok([c, h, w]),
            LayerSpec::MaxPool {
                size: [kh, kw],
                stride: [sh, sw],
            } => {
                if kh == 0 || kw == 0 || sh == 0 || sw == 0 || h < kh || w < kw {
                    return Err(Error::shape(
                        format!("pool {kh}x{kw} input of at least that size"),
                        format!("[{c}, {h}, {w}]"),
                    ));
                }
                Ok([c, (h - kh) / sh + 1, (w - kw) / sw + 1])
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(Error::Config("dense layer needs at least one unit".into()));
                }
                Ok([units, 1, 1])
            }
        }
    }
}

/// Layer list plus input geometry `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

fn conv(filters: usize, kernel: [usize; 2], padding: [usize; 4]) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel,
        stride: [1, 1],
        padding,
    }
}

impl CnnSpec {
    /// Spectrogram model: three 3x3 same-padded convs (8, 16, 32 filters),
    /// each followed by batchnorm, ReLU and 2x2/2 max pooling, then dense + softmax.
    pub fn spectrogram(rows: usize, cols: usize, classes: usize) -> Self {
        Self::spectrogram_with(rows, cols, classes, [8, 16, 32])
    }

    pub fn spectrogram_with(rows: usize, cols: usize, classes: usize, filters: [usize; 3]) -> Self {
        let mut layers = Vec::new();
        for f in filters {
            layers.extend([
                conv(f, [3, 3], [1, 1, 1, 1]),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    size: [2, 2],
                    stride: [2, 2],
                },
            ]);
        }
        layers.extend([LayerSpec::Dense { units: classes }, LayerSpec::Softmax]);
        Self {
            input: [1, rows, cols],
            layers,
        }
    }

    /// IQ/FFT model over a `2 x n` input: convs of 1x128, 2x128, 2x128
    /// (8, 16, 32 filters) with batchnorm + ReLU, 1x4 pooling after the
    /// first two, then dense + softmax.
    pub fn iq(n: usize, classes: usize) -> Self {
        Self::iq_with(n, classes, [8, 16, 32], 128)
    }

    /// The second conv collapses the two rows; the third pads one row
    /// below so its 2-row kernel still fits.
    pub fn iq_with(n: usize, classes: usize, filters: [usize; 3], kernel_width: usize) -> Self {
        let pool = LayerSpec::MaxPool {
            size: [1, 4],
            stride: [1, 4],
        };
        let layers = vec![
            conv(filters[0], [1, kernel_width], [0; 4]),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            pool,
            conv(filters[1], [2, kernel_width], [0; 4]),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            pool,
            conv(filters[2], [2, kernel_width], [0, 1, 0, 0]),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
            LayerSpec::Softmax,
        ];
        Self {
            input: [1, 2, n],
            layers,
        }
    }

    /// A single dense layer followed by softmax.
    pub fn dense_only(features: usize, classes: usize) -> Self {
        Self {
            input: [1, 1, features],
            layers: vec![LayerSpec::Dense { units: classes }, LayerSpec::Softmax],
        }
    }

    /// Checks the layer sequence and returns the shape after every layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        match self.layers.as_slice() {
            [.., LayerSpec::Dense { .. }, LayerSpec::Softmax] => {}
            _ => {
                return Err(Error::Config(
                    "network must end with a dense layer followed by softmax".into(),
                ))
            }
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::Softmax))
        {
            return Err(Error::Config("softmax may only appear as the last layer".into()));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn classes(&self) -> usize {
        match self.layers.iter().rev().find_map(|l| match l {
            LayerSpec::Dense { units } => Some(*units),
            _ => None,
        }) {
            Some(units) => units,
            None => 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let mut prev = self.input;
        let mut total = 0;
        for (layer, shape) in self.layers.iter().zip(shapes) {
            total += match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel: [kh, kw],
                    ..
                } => filters * prev[0] * kh * kw + filters,
                LayerSpec::BatchNorm => 2 * prev[0],
                LayerSpec::Dense { units } => units * prev.iter().product::<usize>() + units,
                _ => 0,
            };
            prev = shape;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrogram_model_shapes() {
        let spec = CnnSpec::spectrogram(256, 63, 10);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[0], [8, 256, 63]);
        assert_eq!(shapes[3], [8, 128, 31]);
        assert_eq!(shapes[7], [16, 64, 15]);
        assert_eq!(shapes[11], [32, 32, 7]);
        assert_eq!(*shapes.last().unwrap(), [10, 1, 1]);
        let convs: Vec<_> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, kernel, .. } => Some((*filters, *kernel)),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![(8, [3, 3]), (16, [3, 3]), (32, [3, 3])]);
    }

    #[test]
    fn iq_model_shapes() {
        let spec = CnnSpec::iq(8192, 10);
        let shapes = spec.shapes().unwrap();
        assert_eq!(spec.input, [1, 2, 8192]);
        assert_eq!(shapes[0], [8, 2, 8065]);
        assert_eq!(shapes[3], [8, 2, 2016]);
        assert_eq!(shapes[4], [16, 1, 1889]);
        assert_eq!(shapes[7], [16, 1, 472]);
        assert_eq!(shapes[8], [32, 1, 345]);
        assert_eq!(*shapes.last().unwrap(), [10, 1, 1]);
        let pools = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool { .. }))
            .count();
        assert_eq!(pools, 2);
    }

    #[test]
    fn rejects_malformed_specs() {
        let mut spec = CnnSpec::spectrogram(16, 16, 3);
        spec.layers.pop();
        assert!(spec.shapes().is_err());
        assert!(CnnSpec::iq(100, 3).shapes().is_err());
        assert!(CnnSpec::spectrogram(1, 1, 3).shapes().is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(CnnSpec::dense_only(5, 3).param_count().unwrap(), 18);
        let spec = CnnSpec::spectrogram(256, 63, 10);
        let expected = (8 * 9 + 8) + 16 + (16 * 8 * 9 + 16) + 32 + (32 * 16 * 9 + 32) + 64 + (32 * 32 * 7 * 10 + 10);
        assert_eq!(spec.param_count().unwrap(), expected);
    }
}
