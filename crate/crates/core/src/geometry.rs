//! Receptive-field calculus for fully-convolutional stacks: the overall
//! sampling stride (product of conv strides and pool kernels), the window
//! size, and the mapping from a score-map cell to the image box it sees.

use crate::error::{Error, Result};
use crate::net::{LayerKind, NetworkSpec};

/// Sampling stride of the paper-scale converted FCN, in pixels.
pub const PAPER_STRIDE: usize = 32;
/// Receptive-field window of the paper-scale converted FCN, in pixels.
pub const PAPER_WINDOW: usize = 223;
/// Rescale targets for the three paper-scale streams (longer edge, pixels).
pub const PAPER_SCALES: [usize; 3] = [300, 500, 700];

/// Inclusive pixel box `(x1, y1) .. (x2, y2)`. Coordinates may be negative
/// or exceed the image for unclipped receptive fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl PixelBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> PixelBox {
        PixelBox { x1, y1, x2, y2 }
    }

    pub fn clip(&self, width: usize, height: usize) -> PixelBox {
        PixelBox {
            x1: self.x1.max(0),
            y1: self.y1.max(0),
            x2: self.x2.min(width as i64 - 1),
            y2: self.y2.min(height as i64 - 1),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 as f64 && x <= self.x2 as f64 && y >= self.y1 as f64 && y <= self.y2 as f64
    }

    /// Expands the box by `margin` pixels on every side.
    pub fn expand(&self, margin: f64) -> (f64, f64, f64, f64) {
        (
            self.x1 as f64 - margin,
            self.y1 as f64 - margin,
            self.x2 as f64 + margin,
            self.y2 as f64 + margin,
        )
    }
}

/// Stride, window, and origin offset of a fully-convolutional stack: cell
/// (x, y) of the output map sees the input box starting at
/// `offset + x * stride` with side `window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldGeometry {
    pub stride: usize,
    pub window: usize,
    /// Image coordinate of cell (0,0)'s window origin; negative when conv
    /// layers pad.
    pub offset: i64,
}

impl FieldGeometry {
    /// Derives the geometry by accumulating each layer's kernel, stride and
    /// padding. This tracks exactly which input interval feeds each output
    /// cell, so padded specs get exact offsets rather than estimates.
    pub fn from_spec(spec: &NetworkSpec) -> FieldGeometry {
        let mut stride = 1usize;
        let mut window = 1usize;
        let mut offset = 0i64;
        for layer in &spec.layers {
            match layer.kind {
                LayerKind::Conv => {
                    window += (layer.kernel - 1) * stride;
                    offset -= layer.pad as i64 * stride as i64;
                    stride *= layer.stride;
                }
                LayerKind::MaxPool => {
                    window += (layer.kernel - 1) * stride;
                    stride *= layer.kernel;
                }
                LayerKind::Relu | LayerKind::Sigmoid => {}
            }
        }
        FieldGeometry {
            stride,
            window,
            offset,
        }
    }

    /// Unclipped receptive-field box of score-map cell (x, y).
    pub fn cell_box(&self, x: usize, y: usize) -> PixelBox {
        let x1 = self.offset + (x * self.stride) as i64;
        let y1 = self.offset + (y * self.stride) as i64;
        PixelBox::new(x1, y1, x1 + self.window as i64 - 1, y1 + self.window as i64 - 1)
    }
}

/// Overall sampling stride D: the product of all conv strides and all max
/// pooling kernels.
pub fn overall_stride(spec: &NetworkSpec) -> usize {
    spec.layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::Conv => l.stride,
            LayerKind::MaxPool => l.kernel,
            _ => 1,
        })
        .product()
}

/// Receptive field of cell (x, y) for an input of `input_hw = (h, w)`:
/// the unclipped box plus its clip to the image bounds. Errors if the cell
/// lies outside the feature map the spec produces for that input.
pub fn receptive_field(
    spec: &NetworkSpec,
    cell: (usize, usize),
    input_hw: (usize, usize),
) -> Result<(PixelBox, PixelBox)> {
    let (h, w) = input_hw;
    let (mh, mw) = spec.output_hw(h, w)?;
    let (x, y) = cell;
    if x >= mw || y >= mh {
        return Err(Error::invalid(format!(
            "cell ({x}, {y}) outside the {mw}x{mh} feature map for a {w}x{h} input"
        )));
    }
    let geom = FieldGeometry::from_spec(spec);
    let unclipped = geom.cell_box(x, y);
    Ok((unclipped, unclipped.clip(w, h)))
}

/// A CNN-M-style converted FCN honoring the paper-scale architecture in
/// spirit: conv strides 2 and 2, three non-overlapping pools of kernel 2,
/// for an overall sampling stride of 32 pixels.
pub fn paper_scale_fcn(classes: usize, seed: u64) -> NetworkSpec {
    use crate::net::LayerSpec;
    NetworkSpec::new(
        vec![
            LayerSpec::conv(7, 2, 0, 3, 16),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(5, 2, 0, 16, 32),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(3, 1, 1, 32, 64),
            LayerSpec::relu(),
            LayerSpec::conv(3, 1, 1, 64, 64),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(6, 1, 0, 64, 128),
            LayerSpec::relu(),
            LayerSpec::conv(1, 1, 0, 128, classes),
        ],
        seed,
    )
    .expect("paper-scale spec is well-formed")
}
