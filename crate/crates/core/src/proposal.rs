//! The multi-stream proposal network: one parameter set applied to K scaled
//! versions of the image, trained from image-level labels by pooling the
//! score maps into per-class scores, and emitting scored, located box
//! proposals from the trained maps.

use crate::error::{Error, Result};
use crate::geometry::{FieldGeometry, PixelBox};
use crate::image::{center_pixels, multiscale_prepare, ScaleInfo};
use crate::loss::bce_multilabel;
use crate::net::{sigmoid_scalar, LayerSpec, Network, NetworkSpec};
use crate::pooling::{PoolingMethod, ScoreMapSet};
use crate::tensor::Tensor;

/// An image with its image-level labels. Ground-truth boxes never appear
/// here; training code paths only ever see this type.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]`, values in [0, 1].
    pub pixels: Tensor,
    /// One 0/1 entry per class.
    pub labels: Vec<f64>,
}

/// A scored box proposal in original image coordinates.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub class_id: usize,
    /// Receptive-field box mapped to the original image and clipped to its
    /// bounds; this is the box that gets cropped and reported.
    pub bbox: PixelBox,
    /// Sigmoid of the score-map activation.
    pub score: f64,
    /// Stream index the proposal came from.
    pub stream: usize,
    /// Score-map cell (x, y) within that stream.
    pub cell: (usize, usize),
    /// Center of the unclipped receptive field in original coordinates.
    pub center: (f64, f64),
}

/// Proposal network: a single parameter set, the stream scales it runs at,
/// and the pooling method used to form image-level scores.
#[derive(Debug, Clone)]
pub struct ProposalNet {
    pub net: Network,
    pub scales: Vec<usize>,
    pub pooling: PoolingMethod,
}

/// Desk-scale proposal stack: 4 conv layers and 2 pools giving sampling
/// stride 8 and window 23 on 64 px images, the proportional analogue of the
/// paper-scale stride 32 / window 223.
pub fn desk_proposal_spec(classes: usize, seed: u64) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::conv(5, 2, 2, 3, 12),
            LayerSpec::relu(),
            LayerSpec::conv(3, 1, 1, 12, 24),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(3, 1, 1, 24, 48),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(1, 1, 0, 48, classes),
        ],
        seed,
    )
    .expect("desk proposal spec is well-formed")
}

/// Desk-scale stream targets, the proportional analogue of the paper's
/// 300/500/700 rescale targets on 64 px images.
pub const DESK_SCALES: [usize; 3] = [32, 48, 64];

impl ProposalNet {
    pub fn new(net: Network, scales: Vec<usize>, pooling: PoolingMethod) -> ProposalNet {
        ProposalNet { net, scales, pooling }
    }

    pub fn class_count(&self) -> usize {
        self.net.spec().out_planes().unwrap_or(0)
    }

    pub fn geometry(&self) -> FieldGeometry {
        FieldGeometry::from_spec(self.net.spec())
    }

    /// Runs every stream through the shared parameters, returning the
    /// per-stream pre-sigmoid score maps plus each stream's coordinate
    /// mapping.
    pub fn forward_multiscale(&self, image: &Tensor) -> Result<(ScoreMapSet, Vec<ScaleInfo>)> {
        let prepared = multiscale_prepare(image, &self.scales)?;
        let mut maps = Vec::with_capacity(prepared.len());
        let mut infos = Vec::with_capacity(prepared.len());
        for (input, info) in prepared {
            let (out, _) = self.net.forward(&center_pixels(&input))?;
            maps.push(out);
            infos.push(info);
        }
        Ok((ScoreMapSet::new(maps)?, infos))
    }

    /// Image-level class probabilities: sigmoid of the pooled score maps.
    pub fn image_scores(&self, maps: &ScoreMapSet) -> Result<Vec<f64>> {
        Ok(self
            .pooling
            .pool(maps)?
            .into_iter()
            .map(sigmoid_scalar)
            .collect())
    }

    /// One SGD step against the summed per-class binary cross entropy of the
    /// pooled multi-scale scores. Returns the mean loss over the batch.
    pub fn train_step(&mut self, batch: &[ImageSample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch".to_string()));
        }
        if lr < 0.0 {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        let classes = self.class_count();
        let mut total_grads = self.net.zero_gradients();
        let mut total_loss = 0.0;
        let mask = vec![1.0; classes];
        for sample in batch {
            if sample.labels.len() != classes {
                return Err(Error::shape(format!(
                    "sample {} has {} labels for a {classes}-class net",
                    sample.id,
                    sample.labels.len()
                )));
            }
            let prepared = multiscale_prepare(&sample.pixels, &self.scales)?;
            let mut caches = Vec::with_capacity(prepared.len());
            let mut maps = Vec::with_capacity(prepared.len());
            for (input, _) in &prepared {
                let (out, cache) = self.net.forward(&center_pixels(input))?;
                maps.push(out);
                caches.push(cache);
            }
            let set = ScoreMapSet::new(maps)?;
            let pooled = self.pooling.pool(&set)?;
            let probs: Vec<f64> = pooled.iter().map(|&z| sigmoid_scalar(z)).collect();
            let (loss, grad_probs) = bce_multilabel(&probs, &sample.labels, &mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss for image {} = {loss}",
                    sample.id
                )));
            }
            total_loss += loss;
            // chain through the sigmoid, then distribute over map cells
            let grad_pooled: Vec<f64> = grad_probs
                .iter()
                .zip(probs.iter())
                .map(|(&g, &p)| g * p * (1.0 - p))
                .collect();
            let map_grads = self.pooling.pool_backward(&set, &grad_pooled)?;
            for (k, cache) in caches.iter().enumerate() {
                let (grads, _) = self.net.backward(cache, &map_grads[k])?;
                Network::accumulate(&mut total_grads, &grads);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        Network::scale_gradients(&mut total_grads, inv);
        self.net.sgd_step(&total_grads, lr);
        Ok(total_loss * inv)
    }

    /// Extracts proposals from trained score maps: per class and per stream,
    /// the `k_top` highest-scoring cells whose sigmoid score reaches `t`,
    /// with deterministic (stream, y, x) tie-breaking. The returned list is
    /// sorted by descending score within each class.
    pub fn propose(
        &self,
        maps: &ScoreMapSet,
        infos: &[ScaleInfo],
        original_hw: (usize, usize),
        t: f64,
        k_top: usize,
    ) -> Result<Vec<Proposal>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("threshold must be in [0,1], got {t}")));
        }
        if k_top < 1 {
            return Err(Error::invalid("k_top must be >= 1".to_string()));
        }
        let geom = self.geometry();
        let (oh, ow) = original_hw;
        let classes = maps.class_count();
        let mut out = Vec::new();
        for c in 0..classes {
            let mut per_class: Vec<Proposal> = Vec::new();
            for (k, map) in maps.maps().iter().enumerate() {
                let (_, mh, mw) = map.dims3()?;
                let mut cells: Vec<(f64, usize, usize)> = Vec::new();
                for y in 0..mh {
                    for x in 0..mw {
                        let s = sigmoid_scalar(map.at3(c, y, x));
                        if s >= t {
                            cells.push((s, y, x));
                        }
                    }
                }
                // descending score; ties broken by (y, x) scan order
                cells.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap()
                        .then(a.1.cmp(&b.1))
                        .then(a.2.cmp(&b.2))
                });
                for &(score, y, x) in cells.iter().take(k_top) {
                    let scaled_box = geom.cell_box(x, y);
                    let orig_unclipped = infos[k].box_to_original(&scaled_box);
                    let bbox = orig_unclipped.clip(ow, oh);
                    per_class.push(Proposal {
                        class_id: c,
                        bbox,
                        score,
                        stream: k,
                        cell: (x, y),
                        center: orig_unclipped.center(),
                    });
                }
            }
            per_class.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then(a.stream.cmp(&b.stream))
                    .then(a.cell.1.cmp(&b.cell.1))
                    .then(a.cell.0.cmp(&b.cell.0))
            });
            out.extend(per_class);
        }
        Ok(out)
    }

    /// Fallback localization: the receptive-field center of the globally
    /// highest-scoring cell for each class, in original coordinates.
    pub fn argmax_centers(
        &self,
        maps: &ScoreMapSet,
        infos: &[ScaleInfo],
    ) -> Result<Vec<(f64, f64, f64)>> {
        let geom = self.geometry();
        let classes = maps.class_count();
        let mut out = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut best = (f64::NEG_INFINITY, 0usize, 0usize, 0usize);
            for (k, map) in maps.maps().iter().enumerate() {
                let (_, mh, mw) = map.dims3()?;
                for y in 0..mh {
                    for x in 0..mw {
                        let v = map.at3(c, y, x);
                        if v > best.0 {
                            best = (v, k, y, x);
                        }
                    }
                }
            }
            let (v, k, y, x) = best;
            let scaled_box = geom.cell_box(x, y);
            let orig = infos[k].box_to_original(&scaled_box);
            let (cx, cy) = orig.center();
            out.push((cx, cy, sigmoid_scalar(v)));
        }
        Ok(out)
    }

    /// Class heat map over the original image: each cell's sigmoid score is
    /// spread over its receptive-field footprint (averaged where fields
    /// overlap), streams are averaged, and the result is normalized to
    /// [0, 255].
    pub fn heatmap(
        &self,
        maps: &ScoreMapSet,
        infos: &[ScaleInfo],
        class_id: usize,
        original_hw: (usize, usize),
    ) -> Result<Tensor> {
        if class_id >= maps.class_count() {
            return Err(Error::invalid(format!(
                "class {class_id} out of range for {} classes",
                maps.class_count()
            )));
        }
        let geom = self.geometry();
        let (oh, ow) = original_hw;
        let mut acc = vec![0.0f64; oh * ow];
        let mut streams_touched = vec![0.0f64; oh * ow];
        for (k, map) in maps.maps().iter().enumerate() {
            let (_, mh, mw) = map.dims3()?;
            let mut sum = vec![0.0f64; oh * ow];
            let mut count = vec![0.0f64; oh * ow];
            for y in 0..mh {
                for x in 0..mw {
                    let s = sigmoid_scalar(map.at3(class_id, y, x));
                    let bbox = infos[k].box_to_original(&geom.cell_box(x, y)).clip(ow, oh);
                    for py in bbox.y1.max(0)..=bbox.y2.min(oh as i64 - 1) {
                        for px in bbox.x1.max(0)..=bbox.x2.min(ow as i64 - 1) {
                            let idx = py as usize * ow + px as usize;
                            sum[idx] += s;
                            count[idx] += 1.0;
                        }
                    }
                }
            }
            for i in 0..oh * ow {
                if count[i] > 0.0 {
                    acc[i] += sum[i] / count[i];
                    streams_touched[i] += 1.0;
                }
            }
        }
        for i in 0..oh * ow {
            if streams_touched[i] > 0.0 {
                acc[i] /= streams_touched[i];
            }
        }
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let data: Vec<f64> = if range > 1e-12 {
            acc.iter().map(|v| (v - lo) / range * 255.0).collect()
        } else {
            vec![0.0; oh * ow]
        };
        Tensor::from_vec(&[oh, ow], data)
    }
}
