//! Small MLPs over flat parameter vectors with hand-written reverse mode.
//!
//! The same [`ParamVector`] serves as an evolutionary genotype and as the weight
//! store for gradient updates. Its layout is a pure function of [`MlpSpec`]:
//! layers in order, weights (row-major `fan_in x fan_out`) before biases,
//! layer-norm gain before offset, and a trailing log-std segment for Gaussian heads.

mod kernels;
mod matrix;
mod mlp;

pub use matrix::Matrix;
pub use mlp::{backward, flatten, forward, forward_with_tape, init_params, unflatten};
pub use mlp::{Gradients, GradTape, HeadOutput, LayerParams, StructuredParams};

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Head {
    /// `scale * tanh(pre)`.
    DeterministicTanh { scale: f64 },
    /// Linear mean plus a state-independent, clamped log-std parameter per output.
    Gaussian { min_log_std: f64, max_log_std: f64 },
    /// Raw logits.
    Categorical,
    Linear,
}

impl Head {
    pub fn gaussian() -> Self {
        Head::Gaussian {
            min_log_std: -20.0,
            max_log_std: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub head: Head,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, head: Head) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation: Activation::Relu,
            layer_norm: false,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        match self.head {
            Head::DeterministicTanh { scale } if !(scale > 0.0) => {
                Err(Error::invalid("tanh head scale must be positive"))
            }
            Head::Gaussian {
                min_log_std,
                max_log_std,
            } if !(min_log_std < max_log_std) => Err(Error::invalid("empty log-std range")),
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn layout(&self) -> Layout {
        let mut segments = Vec::new();
        let mut offset = 0;
        let n_layers = self.hidden.len() + 1;
        let mut push = |layer: usize, kind: SegmentKind, shape: (usize, usize)| {
            segments.push(Segment {
                layer,
                kind,
                offset,
                shape,
            });
            offset += shape.0 * shape.1;
        };
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            push(l + 1, SegmentKind::Weight, (fan_in, fan_out));
            push(l + 1, SegmentKind::Bias, (1, fan_out));
            if self.layer_norm && l + 1 < n_layers {
                push(l + 1, SegmentKind::NormGain, (1, fan_out));
                push(l + 1, SegmentKind::NormOffset, (1, fan_out));
            }
        }
        if matches!(self.head, Head::Gaussian { .. }) {
            push(n_layers, SegmentKind::LogStd, (1, self.output_dim));
        }
        Layout { segments }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
    NormGain,
    NormOffset,
    LogStd,
}

impl SegmentKind {
    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Weight => "weight",
            SegmentKind::Bias => "bias",
            SegmentKind::NormGain => "norm_gain",
            SegmentKind::NormOffset => "norm_offset",
            SegmentKind::LogStd => "log_std",
        }
    }
}

/// One entry of the segment table. Layers are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<Segment>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn find(&self, layer: usize, kind: SegmentKind) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.layer == layer && s.kind == kind)
    }

    /// Maps a flat index back to `(segment, row, col)`.
    pub fn locate(&self, index: usize) -> Option<(&Segment, usize, usize)> {
        let seg = self.segments.iter().find(|s| s.range().contains(&index))?;
        let local = index - seg.offset;
        Some((seg, local / seg.shape.1, local % seg.shape.1))
    }
}

/// Flat parameter vector; also used for gradients and optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

/// Parses `"16,16"` style width lists.
pub fn parse_hidden(s: &str) -> Option<Vec<usize>> {
    let widths: Option<Vec<usize>> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().ok().filter(|&w| w > 0))
        .collect();
    widths.filter(|w| !w.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_small_critic() {
        let spec = MlpSpec::new(3, &[16, 16], 1, Head::Linear).unwrap();
        assert_eq!(spec.param_count(), 64 + 272 + 17);
        assert_eq!(spec.param_count(), 353);
    }

    #[test]
    fn second_layer_weight_offset() {
        let spec = MlpSpec::new(3, &[16, 16], 1, Head::Linear).unwrap();
        let layout = spec.layout();
        assert_eq!(layout.find(2, SegmentKind::Weight).unwrap().offset, 64);
        assert_eq!(layout.find(1, SegmentKind::Bias).unwrap().offset, 48);
    }

    #[test]
    fn layout_with_norm_and_log_std() {
        let spec = MlpSpec::new(3, &[4, 5], 2, Head::gaussian())
            .unwrap()
            .with_layer_norm(true);
        let kinds: Vec<_> = spec.layout().segments.iter().map(|s| (s.layer, s.kind)).collect();
        use SegmentKind::*;
        assert_eq!(
            kinds,
            vec![
                (1, Weight),
                (1, Bias),
                (1, NormGain),
                (1, NormOffset),
                (2, Weight),
                (2, Bias),
                (2, NormGain),
                (2, NormOffset),
                (3, Weight),
                (3, Bias),
                (3, LogStd)
            ]
        );
        assert_eq!(spec.param_count(), 16 + 2 * 4 + 25 + 2 * 5 + 12 + 2);
    }

    #[test]
    fn locate_first_index() {
        let spec = MlpSpec::new(3, &[16, 16], 1, Head::Linear).unwrap();
        let layout = spec.layout();
        let (seg, r, c) = layout.locate(0).unwrap();
        assert_eq!((seg.layer, seg.kind, r, c), (1, SegmentKind::Weight, 0, 0));
        let (seg, r, c) = layout.locate(17).unwrap();
        assert_eq!((seg.layer, r, c), (1, 1, 1));
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(3, &[], 1, Head::Linear).is_err());
        assert!(MlpSpec::new(3, &[4], 1, Head::DeterministicTanh { scale: 0.0 }).is_err());
        assert!(MlpSpec::new(0, &[4], 1, Head::Linear).is_err());
    }

    #[test]
    fn hidden_parsing() {
        assert_eq!(parse_hidden("16,16"), Some(vec![16, 16]));
        assert_eq!(parse_hidden("256, 256"), Some(vec![256, 256]));
        assert_eq!(parse_hidden(""), None);
        assert_eq!(parse_hidden("16,0"), None);
    }
}
