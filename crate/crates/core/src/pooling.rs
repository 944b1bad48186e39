//! Aggregation of per-scale score maps into image-level class scores.
//!
//! The main method is log-sum-exp pooling
//! `s_c = r^-1 * log((1/M) * sum over x,y,k of exp(r * s_cxyk))`,
//! computed jointly over all streams with a single element count M. The
//! output approaches the mean for small r and the maximum for large r. Mean
//! and max pooling sit behind the same interface so the pooling methods can
//! be compared on equal footing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-scale, per-class activation maps emitted by the proposal network:
/// one `[C, H_k, W_k]` tensor per stream, all sharing the class count.
#[derive(Debug, Clone)]
pub struct ScoreMapSet {
    maps: Vec<Tensor>,
    class_count: usize,
}

impl ScoreMapSet {
    pub fn new(maps: Vec<Tensor>) -> Result<ScoreMapSet> {
        if maps.is_empty() {
            return Err(Error::invalid("score map set must have at least one stream".to_string()));
        }
        let (c0, _, _) = maps[0].dims3()?;
        let mut cells = 0usize;
        for (k, m) in maps.iter().enumerate() {
            let (c, h, w) = m.dims3()?;
            if c != c0 {
                return Err(Error::shape(format!(
                    "stream {k} has {c} classes, stream 0 has {c0}"
                )));
            }
            cells += h * w;
        }
        if cells == 0 {
            return Err(Error::invalid("score map set has zero spatial cells".to_string()));
        }
        Ok(ScoreMapSet {
            maps,
            class_count: c0,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn stream_count(&self) -> usize {
        self.maps.len()
    }

    /// Total spatial cell count M summed over streams.
    pub fn cell_count(&self) -> usize {
        self.maps
            .iter()
            .map(|m| {
                let s = m.shape();
                s[1] * s[2]
            })
            .sum()
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    /// Iterates one class's cells across all streams in a fixed order:
    /// stream index, then row-major within the stream.
    fn class_cells<'a>(&'a self, c: usize) -> impl Iterator<Item = f64> + 'a {
        self.maps.iter().flat_map(move |m| {
            let (_, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            (0..h * w).map(move |i| m.data()[c * h * w + i])
        })
    }
}

/// Pooling method applied to a `ScoreMapSet`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingMethod {
    /// Log-sum-exp with sharpness r. The experiments fix r = 10.
    Lse { r: f64 },
    Mean,
    Max,
}

/// Default LSE sharpness.
pub const DEFAULT_LSE_R: f64 = 10.0;

impl PoolingMethod {
    pub fn lse(r: f64) -> Result<PoolingMethod> {
        if !(r > 0.0) {
            return Err(Error::invalid(format!("lse sharpness r must be > 0, got {r}")));
        }
        Ok(PoolingMethod::Lse { r })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingMethod::Lse { .. } => "lse",
            PoolingMethod::Mean => "mean",
            PoolingMethod::Max => "max",
        }
    }

    /// Pools each class over all cells of all streams into one scalar.
    pub fn pool(&self, maps: &ScoreMapSet) -> Result<Vec<f64>> {
        let m = maps.cell_count() as f64;
        let mut out = Vec::with_capacity(maps.class_count());
        for c in 0..maps.class_count() {
            let v = match *self {
                PoolingMethod::Lse { r } => {
                    if !(r > 0.0) {
                        return Err(Error::invalid(format!("lse sharpness r must be > 0, got {r}")));
                    }
                    // max-shifted for stability at large r
                    let peak = maps.class_cells(c).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = maps.class_cells(c).map(|s| ((s - peak) * r).exp()).sum();
                    peak + (sum.ln() - m.ln()) / r
                }
                PoolingMethod::Mean => maps.class_cells(c).sum::<f64>() / m,
                PoolingMethod::Max => maps.class_cells(c).fold(f64::NEG_INFINITY, f64::max),
            };
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("pooled score for class {c} = {v}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Gradients of the pooled scores w.r.t. every map cell, scaled by the
    /// per-class upstream gradient. For LSE the per-cell weight is the
    /// softmax of r times the cell score over all cells of the class; the
    /// weights of each class sum to one before upstream scaling.
    pub fn pool_backward(&self, maps: &ScoreMapSet, upstream: &[f64]) -> Result<Vec<Tensor>> {
        if upstream.len() != maps.class_count() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries for {} classes",
                upstream.len(),
                maps.class_count()
            )));
        }
        let m = maps.cell_count() as f64;
        let mut grads: Vec<Tensor> = maps.maps().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for c in 0..maps.class_count() {
            match *self {
                PoolingMethod::Lse { r } => {
                    let peak = maps.class_cells(c).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = maps.class_cells(c).map(|s| ((s - peak) * r).exp()).sum();
                    for (k, g) in grads.iter_mut().enumerate() {
                        let src = &maps.maps()[k];
                        let (_, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                        let base = c * h * w;
                        for i in 0..h * w {
                            let s = src.data()[base + i];
                            g.data_mut()[base + i] = upstream[c] * ((s - peak) * r).exp() / denom;
                        }
                    }
                }
                PoolingMethod::Mean => {
                    for g in grads.iter_mut() {
                        let (_, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                        let base = c * h * w;
                        for i in 0..h * w {
                            g.data_mut()[base + i] = upstream[c] / m;
                        }
                    }
                }
                PoolingMethod::Max => {
                    // first cell attaining the max, in stream then row-major order
                    let peak = maps.class_cells(c).fold(f64::NEG_INFINITY, f64::max);
                    'streams: for (k, g) in grads.iter_mut().enumerate() {
                        let src = &maps.maps()[k];
                        let (_, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                        let base = c * h * w;
                        for i in 0..h * w {
                            if src.data()[base + i] == peak {
                                g.data_mut()[base + i] = upstream[c];
                                break 'streams;
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}
