//! Cascaded proposal verification: random mini-batch sampling over surviving
//! proposals, verifier training with active-class loss masking, score fusion
//! with the proposal network, and chain/tree cascade inference.
//!
//! A cascade is a tree of nodes. The root is the proposal stage: its
//! threshold and k_top select score-map cells into proposals. Every other
//! node owns a verifier network; a box entering a node is re-scored for its
//! class, and advances to the child covering that class only while its
//! current score clears the child's threshold and per-class top-k gate. Each
//! box therefore follows exactly one root-to-leaf path.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::fsio;
use crate::geometry::PixelBox;
use crate::image::{bilinear_resize, center_pixels};
use crate::loss::bce_multilabel;
use crate::net::{sigmoid_scalar, LayerSpec, Network, NetworkSpec};
use crate::proposal::{ImageSample, Proposal, ProposalNet};
use crate::tensor::Tensor;

/// Verifier patch side at desk scale.
pub const DESK_VERIFIER_INPUT: usize = 24;

/// Desk-scale verifier stack for 24 px patches; roughly 4x the parameter
/// count of the proposal net, trading speed for accuracy at the later stage.
pub fn desk_verifier_spec(classes: usize, seed: u64) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::conv(5, 1, 0, 3, 20),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(3, 1, 0, 20, 40),
            LayerSpec::relu(),
            LayerSpec::maxpool(2),
            LayerSpec::conv(4, 1, 0, 40, 64),
            LayerSpec::relu(),
            LayerSpec::conv(1, 1, 0, 64, classes),
        ],
        seed,
    )
    .expect("desk verifier spec is well-formed")
}

/// One node of the cascade topology.
#[derive(Debug, Clone)]
pub struct CascadeNode {
    pub id: usize,
    /// Entry threshold: a box advances into this node only if its current
    /// score reaches it. At the root it is the proposal score threshold.
    pub threshold: f64,
    /// Per-class top-k entry policy (per scale at the root).
    pub k_top: usize,
    pub class_scope: Vec<usize>,
    /// Checkpoint base name; `<base>.spec` and `<base>.ckpt` live next to
    /// the topology file.
    pub checkpoint: String,
    pub children: Vec<CascadeNode>,
}

impl CascadeNode {
    /// Sibling scopes must be disjoint and cover the parent scope, so every
    /// surviving box routes to exactly one child. Checked at construction,
    /// never at inference.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Topology(format!(
                "node {}: threshold {} outside [0,1]",
                self.id, self.threshold
            )));
        }
        if self.k_top < 1 {
            return Err(Error::Topology(format!("node {}: k_top must be >= 1", self.id)));
        }
        if self.class_scope.is_empty() {
            return Err(Error::Topology(format!("node {}: empty class scope", self.id)));
        }
        if !self.children.is_empty() {
            let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
            for child in &self.children {
                for &c in &child.class_scope {
                    if !self.class_scope.contains(&c) {
                        return Err(Error::Topology(format!(
                            "node {}: child {} covers class {c} outside the parent scope",
                            self.id, child.id
                        )));
                    }
                    if let Some(prev) = seen.insert(c, child.id) {
                        return Err(Error::Topology(format!(
                            "class {c} covered by sibling nodes {prev} and {}",
                            child.id
                        )));
                    }
                }
            }
            for &c in &self.class_scope {
                if !seen.contains_key(&c) {
                    return Err(Error::Topology(format!(
                        "node {}: class {c} outside every child scope",
                        self.id
                    )));
                }
            }
            for child in &self.children {
                child.validate()?;
            }
        }
        Ok(())
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a CascadeNode>) {
        out.push(self);
        for c in &self.children {
            c.collect(out);
        }
    }

    pub fn nodes(&self) -> Vec<&CascadeNode> {
        let mut v = Vec::new();
        self.collect(&mut v);
        v
    }

    /// Deepest node of a chain (each node at most one child).
    pub fn chain_tail_id(&self) -> usize {
        let mut cur = self;
        while let [child] = cur.children.as_slice() {
            cur = child;
        }
        cur.id
    }

    pub fn find_mut(&mut self, id: usize) -> Option<&mut CascadeNode> {
        if self.id == id {
            return Some(self);
        }
        for c in &mut self.children {
            if let Some(n) = c.find_mut(id) {
                return Some(n);
            }
        }
        None
    }

    /// Line-oriented topology text: `node_id parent_id threshold k_top
    /// class_list checkpoint` per node, parent -1 for the root.
    pub fn to_text(&self) -> String {
        fn emit(node: &CascadeNode, parent: i64, out: &mut String) {
            let classes: Vec<String> = node.class_scope.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                node.id,
                parent,
                node.threshold,
                node.k_top,
                classes.join(","),
                node.checkpoint
            );
            for c in &node.children {
                emit(c, node.id as i64, out);
            }
        }
        let mut out = String::new();
        emit(self, -1, &mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<CascadeNode> {
        let mut by_id: BTreeMap<usize, CascadeNode> = BTreeMap::new();
        let mut parents: BTreeMap<usize, i64> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::Parse(format!("bad topology line {line:?}")));
            }
            let id: usize = f[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad node id {line:?}")))?;
            let parent: i64 = f[1]
                .parse()
                .map_err(|_| Error::Parse(format!("bad parent {line:?}")))?;
            let threshold: f64 = f[2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad threshold {line:?}")))?;
            let k_top: usize = f[3]
                .parse()
                .map_err(|_| Error::Parse(format!("bad k_top {line:?}")))?;
            let class_scope: Vec<usize> = f[4]
                .split(',')
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse(format!("bad class list {line:?}")))?;
            if by_id
                .insert(
                    id,
                    CascadeNode {
                        id,
                        threshold,
                        k_top,
                        class_scope,
                        checkpoint: f[5].to_string(),
                        children: Vec::new(),
                    },
                )
                .is_some()
            {
                return Err(Error::Topology(format!("duplicate node id {id}")));
            }
            parents.insert(id, parent);
        }
        let root_id = *parents
            .iter()
            .find(|(_, &p)| p < 0)
            .map(|(id, _)| id)
            .ok_or_else(|| Error::Topology("no root node".to_string()))?;
        fn build(
            id: usize,
            by_id: &BTreeMap<usize, CascadeNode>,
            parents: &BTreeMap<usize, i64>,
        ) -> CascadeNode {
            let mut node = by_id[&id].clone();
            node.children = parents
                .iter()
                .filter(|(_, &p)| p == id as i64)
                .map(|(&cid, _)| build(cid, by_id, parents))
                .collect();
            node
        }
        let root = build(root_id, &by_id, &parents);
        if root.nodes().len() != by_id.len() {
            return Err(Error::Topology("topology has unreachable nodes".to_string()));
        }
        root.validate()?;
        Ok(root)
    }
}

/// A box with its current cascade score; the unit passed between stages and
/// into mini-batch sampling.
#[derive(Debug, Clone)]
pub struct ScoredBox {
    pub class_id: usize,
    pub bbox: PixelBox,
    pub score: f64,
    pub center: (f64, f64),
}

impl ScoredBox {
    pub fn from_proposal(p: &Proposal) -> ScoredBox {
        ScoredBox {
            class_id: p.class_id,
            bbox: p.bbox,
            score: p.score,
            center: p.center,
        }
    }
}

/// Where a mini-batch item came from.
#[derive(Debug, Clone)]
pub enum Provenance {
    Proposal {
        image_id: String,
        class_id: usize,
        score: f64,
    },
    FullImage {
        image_id: String,
    },
}

/// One verifier training sample: a cropped-and-resized proposal region with
/// a one-hot active mask, or a resized full image with all classes active.
/// The patch is already centered to the network input range.
#[derive(Debug, Clone)]
pub struct MiniBatchItem {
    pub patch: Tensor,
    pub active_mask: Vec<f64>,
    pub target: Vec<f64>,
    pub provenance: Provenance,
}

/// Crops `bbox` (clipped to bounds) from the image and resizes it to a
/// square patch.
pub fn crop_patch(image: &Tensor, bbox: &PixelBox, patch_side: usize) -> Result<Tensor> {
    let (planes, h, w) = image.dims3()?;
    let b = bbox.clip(w, h);
    if b.x2 < b.x1 || b.y2 < b.y1 {
        return Err(Error::invalid(format!("box {bbox:?} has no overlap with the image")));
    }
    let (bw, bh) = (b.width() as usize, b.height() as usize);
    let mut crop = Tensor::zeros(&[planes, bh, bw]);
    for p in 0..planes {
        for y in 0..bh {
            for x in 0..bw {
                crop.set3(p, y, x, image.at3(p, b.y1 as usize + y, b.x1 as usize + x));
            }
        }
    }
    bilinear_resize(&crop, patch_side, patch_side)
}

/// Random mini-batch sampling for verifier training: per selected image, one
/// uniformly drawn (class, box) pair with score at or above `t`, or the full
/// image with all classes active when no box qualifies. Images are drawn
/// without replacement while the pool allows it, with replacement otherwise.
/// `boxes[i]` holds the current cascade-scored boxes of `samples[i]`.
pub fn sample_minibatch(
    samples: &[ImageSample],
    boxes: &[Vec<ScoredBox>],
    b: usize,
    t: f64,
    patch_side: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<MiniBatchItem>> {
    if b < 1 {
        return Err(Error::invalid("batch size must be >= 1".to_string()));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no images to sample from".to_string()));
    }
    if samples.len() != boxes.len() {
        return Err(Error::shape(format!(
            "{} samples but {} box lists",
            samples.len(),
            boxes.len()
        )));
    }
    let picks: Vec<usize> = if b <= samples.len() {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(rng);
        idx.truncate(b);
        idx
    } else {
        (0..b).map(|_| rng.random_range(0..samples.len())).collect()
    };
    let mut out = Vec::with_capacity(b);
    for i in picks {
        let (sample, boxes) = (&samples[i], &boxes[i]);
        let classes = sample.labels.len();
        let qualifying: Vec<&ScoredBox> = boxes.iter().filter(|sb| sb.score >= t).collect();
        if qualifying.is_empty() {
            // resize and add the full image, all classes active
            let patch = center_pixels(&bilinear_resize(&sample.pixels, patch_side, patch_side)?);
            out.push(MiniBatchItem {
                patch,
                active_mask: vec![1.0; classes],
                target: sample.labels.clone(),
                provenance: Provenance::FullImage {
                    image_id: sample.id.clone(),
                },
            });
        } else {
            let pick = qualifying[rng.random_range(0..qualifying.len())];
            let patch = center_pixels(&crop_patch(&sample.pixels, &pick.bbox, patch_side)?);
            let mut mask = vec![0.0; classes];
            mask[pick.class_id] = 1.0;
            let mut target = vec![0.0; classes];
            // positive iff the image is labeled with the active class
            target[pick.class_id] = sample.labels[pick.class_id];
            out.push(MiniBatchItem {
                patch,
                active_mask: mask,
                target,
                provenance: Provenance::Proposal {
                    image_id: sample.id.clone(),
                    class_id: pick.class_id,
                    score: pick.score,
                },
            });
        }
    }
    Ok(out)
}

/// One SGD step of a verifier on a sampled mini-batch, with the loss masked
/// to each item's active classes. Returns the mean loss.
pub fn train_verifier_step(net: &mut Network, batch: &[MiniBatchItem], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty verifier batch".to_string()));
    }
    let mut total = net.zero_gradients();
    let mut total_loss = 0.0;
    for item in batch {
        let (out, cache) = net.forward(&item.patch)?;
        let (classes, oh, ow) = out.dims3()?;
        if oh != 1 || ow != 1 {
            return Err(Error::shape(format!(
                "verifier must emit a 1x1 map for its patch size, got {classes}x{oh}x{ow}"
            )));
        }
        let probs: Vec<f64> = out.data().iter().map(|&z| sigmoid_scalar(z)).collect();
        let (loss, grad_p) = bce_multilabel(&probs, &item.target, &item.active_mask)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("verifier loss = {loss}")));
        }
        total_loss += loss;
        let grad_z: Vec<f64> = grad_p
            .iter()
            .zip(probs.iter())
            .map(|(&g, &p)| g * p * (1.0 - p))
            .collect();
        let grad = Tensor::from_vec(&[classes, 1, 1], grad_z)?;
        let (grads, _) = net.backward(&cache, &grad)?;
        Network::accumulate(&mut total, &grads);
    }
    let inv = 1.0 / batch.len() as f64;
    Network::scale_gradients(&mut total, inv);
    net.sgd_step(&total, lr);
    Ok(total_loss * inv)
}

/// Score fusion: the max verifier score per class when any proposal was
/// verified, otherwise the proposal network's pooled score unchanged.
pub fn fuse_scores(proposal_scores: &[f64], verified: &[Vec<f64>]) -> Vec<f64> {
    proposal_scores
        .iter()
        .zip(verified.iter())
        .map(|(&sp, vs)| {
            if vs.is_empty() {
                sp
            } else {
                vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// A loaded cascade: topology plus the proposal stage and one verifier
/// network per non-root node.
#[derive(Debug, Clone)]
pub struct CascadeRuntime {
    pub topology: CascadeNode,
    pub proposal: ProposalNet,
    pub verifiers: BTreeMap<usize, Network>,
    pub patch_side: usize,
}

/// Per-image cascade output.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub class_scores: Vec<f64>,
    /// One (x, y) localization point per class: the center of the box with
    /// the winning score, or the argmax score-map cell's receptive-field
    /// center when no proposal was verified.
    pub points: Vec<(f64, f64)>,
    pub proposal_count: usize,
    /// Patches evaluated per verifier node, for routing diagnostics.
    pub node_patch_counts: BTreeMap<usize, usize>,
}

struct WalkOutcome {
    /// Deepest verifier score per proposal, None if never verified.
    final_scores: Vec<Option<f64>>,
    /// True when the proposal was evaluated at a leaf node.
    reached_leaf: Vec<bool>,
    node_counts: BTreeMap<usize, usize>,
}

impl CascadeRuntime {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        for node in self.topology.nodes().iter().skip(1) {
            if !self.verifiers.contains_key(&node.id) {
                return Err(Error::Topology(format!(
                    "no verifier network for node {}",
                    node.id
                )));
            }
        }
        Ok(())
    }

    /// Routes proposals down the tree, re-scoring at each visited node.
    fn route(&self, image: &Tensor, proposals: &[Proposal]) -> Result<WalkOutcome> {
        let n = proposals.len();
        let mut outcome = WalkOutcome {
            final_scores: vec![None; n],
            reached_leaf: vec![false; n],
            node_counts: BTreeMap::new(),
        };
        for node in self.topology.nodes().iter().skip(1) {
            outcome.node_counts.insert(node.id, 0);
        }
        let mut patch_cache: Vec<Option<Tensor>> = vec![None; n];
        let mut queue: VecDeque<(&CascadeNode, Vec<(usize, f64)>)> = VecDeque::new();
        for child in &self.topology.children {
            let incoming: Vec<(usize, f64)> = proposals
                .iter()
                .enumerate()
                .filter(|(_, p)| child.class_scope.contains(&p.class_id))
                .map(|(i, p)| (i, p.score))
                .collect();
            queue.push_back((child, incoming));
        }
        while let Some((node, incoming)) = queue.pop_front() {
            // per-class top-k entry gate on the incoming scores
            let mut by_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for (idx, score) in incoming {
                if score >= node.threshold {
                    by_class
                        .entry(proposals[idx].class_id)
                        .or_default()
                        .push((idx, score));
                }
            }
            let net = self
                .verifiers
                .get(&node.id)
                .ok_or_else(|| Error::Topology(format!("no verifier network for node {}", node.id)))?;
            let mut selected: Vec<(usize, f64)> = Vec::new();
            for (_, mut group) in by_class {
                group.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                group.truncate(node.k_top);
                for (idx, _) in group {
                    if patch_cache[idx].is_none() {
                        patch_cache[idx] = Some(center_pixels(&crop_patch(
                            image,
                            &proposals[idx].bbox,
                            self.patch_side,
                        )?));
                    }
                    let (out, _) = net.forward(patch_cache[idx].as_ref().unwrap())?;
                    let v = sigmoid_scalar(out.data()[proposals[idx].class_id]);
                    outcome.final_scores[idx] = Some(v);
                    if node.children.is_empty() {
                        outcome.reached_leaf[idx] = true;
                    }
                    *outcome.node_counts.entry(node.id).or_default() += 1;
                    selected.push((idx, v));
                }
            }
            for child in &node.children {
                let next: Vec<(usize, f64)> = selected
                    .iter()
                    .filter(|(idx, _)| child.class_scope.contains(&proposals[*idx].class_id))
                    .cloned()
                    .collect();
                queue.push_back((child, next));
            }
        }
        Ok(outcome)
    }

    /// Full cascade inference for one image.
    pub fn infer(&self, image: &Tensor) -> Result<InferenceResult> {
        let (_, h, w) = image.dims3()?;
        let (maps, infos) = self.proposal.forward_multiscale(image)?;
        let pooled = self.proposal.image_scores(&maps)?;
        let root = &self.topology;
        let proposals = self
            .proposal
            .propose(&maps, &infos, (h, w), root.threshold, root.k_top)?;
        let outcome = self.route(image, &proposals)?;

        let classes = pooled.len();
        let mut verified: Vec<Vec<f64>> = vec![Vec::new(); classes];
        let mut best_center: Vec<Option<(f64, (f64, f64))>> = vec![None; classes];
        for (idx, score) in outcome.final_scores.iter().enumerate() {
            if let Some(v) = score {
                let c = proposals[idx].class_id;
                verified[c].push(*v);
                if best_center[c].map(|(bv, _)| *v > bv).unwrap_or(true) {
                    best_center[c] = Some((*v, proposals[idx].center));
                }
            }
        }
        let class_scores = fuse_scores(&pooled, &verified);
        let fallback = self.proposal.argmax_centers(&maps, &infos)?;
        let points: Vec<(f64, f64)> = (0..classes)
            .map(|c| match best_center[c] {
                Some((_, center)) => center,
                None => (fallback[c].0, fallback[c].1),
            })
            .collect();
        Ok(InferenceResult {
            class_scores,
            points,
            proposal_count: proposals.len(),
            node_patch_counts: outcome.node_counts,
        })
    }

    /// Boxes that survived every existing stage, carrying their deepest
    /// scores: the training pool for a new cascade stage.
    pub fn surviving_boxes(&self, image: &Tensor) -> Result<Vec<ScoredBox>> {
        let (_, h, w) = image.dims3()?;
        let (maps, infos) = self.proposal.forward_multiscale(image)?;
        let root = &self.topology;
        let proposals = self
            .proposal
            .propose(&maps, &infos, (h, w), root.threshold, root.k_top)?;
        if self.topology.children.is_empty() {
            // root-only cascade: every proposal survives with its own score
            return Ok(proposals.iter().map(ScoredBox::from_proposal).collect());
        }
        let outcome = self.route(image, &proposals)?;
        Ok(proposals
            .iter()
            .enumerate()
            .filter_map(|(idx, p)| {
                if !outcome.reached_leaf[idx] {
                    return None;
                }
                outcome.final_scores[idx].map(|v| ScoredBox {
                    class_id: p.class_id,
                    bbox: p.bbox,
                    score: v,
                    center: p.center,
                })
            })
            .collect())
    }

    /// Saves the topology and every network next to it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        fsio::write_atomic_str(&dir.join("cascade.topo"), &self.topology.to_text())?;
        let root_base = self.topology.checkpoint.clone();
        fsio::write_atomic_str(
            &dir.join(format!("{root_base}.spec")),
            &self.proposal.net.spec().to_text(),
        )?;
        self.proposal
            .net
            .save_checkpoint(&dir.join(format!("{root_base}.ckpt")))?;
        for node in self.topology.nodes().iter().skip(1) {
            let net = &self.verifiers[&node.id];
            fsio::write_atomic_str(
                &dir.join(format!("{}.spec", node.checkpoint)),
                &net.spec().to_text(),
            )?;
            net.save_checkpoint(&dir.join(format!("{}.ckpt", node.checkpoint)))?;
        }
        Ok(())
    }

    /// Loads a cascade saved by `save`. Scales, pooling, and patch side come
    /// from the run configuration.
    pub fn load(
        dir: &Path,
        scales: Vec<usize>,
        pooling: crate::pooling::PoolingMethod,
        patch_side: usize,
    ) -> Result<CascadeRuntime> {
        let topo_text = std::fs::read_to_string(dir.join("cascade.topo"))?;
        let topology = CascadeNode::from_text(&topo_text)?;
        let load_net = |base: &str| -> Result<Network> {
            let spec_text = std::fs::read_to_string(dir.join(format!("{base}.spec")))?;
            let spec = NetworkSpec::from_text(&spec_text)?;
            Network::load_checkpoint(spec, &dir.join(format!("{base}.ckpt")))
        };
        let proposal_net = load_net(&topology.checkpoint)?;
        let mut verifiers = BTreeMap::new();
        for node in topology.nodes().iter().skip(1) {
            verifiers.insert(node.id, load_net(&node.checkpoint)?);
        }
        let rt = CascadeRuntime {
            topology,
            proposal: ProposalNet::new(proposal_net, scales, pooling),
            verifiers,
            patch_side,
        };
        rt.validate()?;
        Ok(rt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::PoolingMethod;
    use crate::proposal::{desk_proposal_spec, DESK_SCALES};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..3 * side * side).map(|_| r.random::<f64>()).collect();
        Tensor::from_vec(&[3, side, side], data).unwrap()
    }

    fn sample_with_boxes(
        id: &str,
        labels: Vec<f64>,
        boxes: Vec<ScoredBox>,
        seed: u64,
    ) -> (Vec<ImageSample>, Vec<Vec<ScoredBox>>) {
        (
            vec![ImageSample {
                id: id.to_string(),
                pixels: random_image(32, seed),
                labels,
            }],
            vec![boxes],
        )
    }

    fn scored(class_id: usize, score: f64) -> ScoredBox {
        ScoredBox {
            class_id,
            bbox: PixelBox::new(4, 4, 20, 20),
            score,
            center: (12.0, 12.0),
        }
    }

    #[test]
    fn threshold_one_forces_full_image_fallback() {
        let (samples, boxes) = sample_with_boxes(
            "a",
            vec![1.0, 0.0],
            vec![scored(0, 0.9), scored(1, 0.4)],
            1,
        );
        let mut r = rng(2);
        let batch = sample_minibatch(&samples, &boxes, 8, 1.0, 16, &mut r).unwrap();
        assert_eq!(batch.len(), 8);
        for item in &batch {
            assert!(matches!(item.provenance, Provenance::FullImage { .. }));
            assert!(item.active_mask.iter().all(|&m| m == 1.0));
            assert_eq!(item.target, vec![1.0, 0.0]);
        }
    }

    #[test]
    fn proposal_items_have_one_hot_masks_and_qualifying_scores() {
        let t = 0.1;
        let (samples, boxes) = sample_with_boxes(
            "a",
            vec![1.0, 0.0],
            vec![scored(0, 0.9), scored(1, 0.05), scored(1, 0.3)],
            3,
        );
        let mut r = rng(4);
        for _ in 0..50 {
            let batch = sample_minibatch(&samples, &boxes, 1, t, 16, &mut r).unwrap();
            let item = &batch[0];
            match &item.provenance {
                Provenance::Proposal { class_id, score, .. } => {
                    assert!(*score >= t, "sampled score {score} below threshold");
                    assert_eq!(item.active_mask.iter().sum::<f64>(), 1.0);
                    assert_eq!(item.active_mask[*class_id], 1.0);
                    if *class_id == 1 {
                        // box of an unlabeled class samples as a negative
                        assert_eq!(item.target[1], 0.0);
                    } else {
                        assert_eq!(item.target[0], 1.0);
                    }
                }
                Provenance::FullImage { .. } => panic!("qualifying boxes exist"),
            }
        }
    }

    #[test]
    fn draws_are_uniform_over_qualifying_pairs() {
        // 3 qualifying pairs; 3000 draws should be uniform well within 5 sigma
        let (samples, boxes) = sample_with_boxes(
            "a",
            vec![1.0, 1.0],
            vec![scored(0, 0.5), scored(1, 0.6), scored(1, 0.7), scored(0, 0.01)],
            5,
        );
        let mut r = rng(6);
        let n = 3000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let batch = sample_minibatch(&samples, &boxes, 1, 0.1, 8, &mut r).unwrap();
            match &batch[0].provenance {
                Provenance::Proposal { score, .. } => {
                    if (*score - 0.5).abs() < 1e-9 {
                        counts[0] += 1;
                    } else if (*score - 0.6).abs() < 1e-9 {
                        counts[1] += 1;
                    } else {
                        counts[2] += 1;
                    }
                }
                _ => panic!("qualifying boxes exist"),
            }
        }
        let expect = n as f64 / 3.0;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expect).abs() < 5.0 * sigma,
                "count {c} vs expectation {expect:.0}"
            );
        }
    }

    #[test]
    fn masked_out_class_head_weights_stay_fixed() {
        let classes = 3;
        let mut net = Network::init(desk_verifier_spec(classes, 7)).unwrap();
        let head_idx = net.spec().layers.len() - 1;
        let before = net.params()[head_idx].clone().unwrap();
        // batch with masks excluding class 2 everywhere
        let batch: Vec<MiniBatchItem> = (0..4)
            .map(|i| MiniBatchItem {
                patch: random_image(DESK_VERIFIER_INPUT, 100 + i),
                active_mask: vec![1.0, 1.0, 0.0],
                target: vec![1.0, 0.0, 0.0],
                provenance: Provenance::FullImage {
                    image_id: format!("i{i}"),
                },
            })
            .collect();
        train_verifier_step(&mut net, &batch, 0.01).unwrap();
        let after = net.params()[head_idx].clone().unwrap();
        let s = after.weight.shape();
        let per_class = s[1] * s[2] * s[3];
        // class-2 row untouched, class-0 row moved
        assert_eq!(
            after.weight.data()[2 * per_class..3 * per_class],
            before.weight.data()[2 * per_class..3 * per_class]
        );
        assert_eq!(after.bias.data()[2], before.bias.data()[2]);
        assert_ne!(
            after.weight.data()[0..per_class],
            before.weight.data()[0..per_class]
        );
    }

    #[test]
    fn verifier_loss_decreases_on_separable_fixture() {
        // two classes told apart by solid colors
        let classes = 2;
        let mut net = Network::init(desk_verifier_spec(classes, 9)).unwrap();
        let solid = |plane: usize| {
            let mut t = Tensor::zeros(&[3, DESK_VERIFIER_INPUT, DESK_VERIFIER_INPUT]);
            for y in 0..DESK_VERIFIER_INPUT {
                for x in 0..DESK_VERIFIER_INPUT {
                    t.set3(plane, y, x, 0.9);
                }
            }
            t
        };
        let batch = vec![
            MiniBatchItem {
                patch: solid(0),
                active_mask: vec![1.0, 1.0],
                target: vec![1.0, 0.0],
                provenance: Provenance::FullImage { image_id: "r".into() },
            },
            MiniBatchItem {
                patch: solid(2),
                active_mask: vec![1.0, 1.0],
                target: vec![0.0, 1.0],
                provenance: Provenance::FullImage { image_id: "b".into() },
            },
        ];
        let first = train_verifier_step(&mut net, &batch, 0.05).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = train_verifier_step(&mut net, &batch, 0.05).unwrap();
        }
        assert!(last < first * 0.2, "loss {first} -> {last} did not separate");
    }

    #[test]
    fn fuse_preserves_proposal_scores_when_nothing_verified() {
        let sp = vec![0.3, 0.8, 0.5];
        let verified = vec![Vec::new(), Vec::new(), Vec::new()];
        assert_eq!(fuse_scores(&sp, &verified), sp);
    }

    #[test]
    fn fuse_takes_max_of_verifier_scores() {
        let sp = vec![0.2];
        let verified = vec![vec![0.3, 0.9, 0.5]];
        assert_eq!(fuse_scores(&sp, &verified), vec![0.9]);
    }

    #[test]
    fn fuse_mixed_case_matches_hand_evaluation() {
        let sp = vec![0.2, 0.7, 0.4];
        let verified = vec![vec![0.6], Vec::new(), Vec::new()];
        assert_eq!(fuse_scores(&sp, &verified), vec![0.6, 0.7, 0.4]);
    }

    #[test]
    fn fuse_may_demote_below_proposal_score() {
        // the verifier may lower a class score; output stays in the union of
        // proposal score and verified scores
        let sp = vec![0.9];
        let verified = vec![vec![0.2, 0.1]];
        assert_eq!(fuse_scores(&sp, &verified), vec![0.2]);
    }

    /// Runtime with one untrained verifier stage over all classes.
    fn chain_runtime(classes: usize, seed: u64) -> CascadeRuntime {
        let pnet = ProposalNet::new(
            Network::init(desk_proposal_spec(classes, seed)).unwrap(),
            DESK_SCALES.to_vec(),
            PoolingMethod::lse(10.0).unwrap(),
        );
        let verifier = Network::init(desk_verifier_spec(classes, seed + 1)).unwrap();
        let scope: Vec<usize> = (0..classes).collect();
        let topology = CascadeNode {
            id: 0,
            threshold: 0.1,
            k_top: 3,
            class_scope: scope.clone(),
            checkpoint: "proposal".into(),
            children: vec![CascadeNode {
                id: 1,
                threshold: 0.1,
                k_top: 3,
                class_scope: scope,
                checkpoint: "verifier1".into(),
                children: Vec::new(),
            }],
        };
        let mut verifiers = BTreeMap::new();
        verifiers.insert(1, verifier);
        CascadeRuntime {
            topology,
            proposal: pnet,
            verifiers,
            patch_side: DESK_VERIFIER_INPUT,
        }
    }

    #[test]
    fn chain_of_one_matches_flat_compose_bit_exactly() {
        let rt = chain_runtime(3, 11);
        let image = random_image(64, 12);
        let result = rt.infer(&image).unwrap();

        // manual propose -> verify -> fuse composition
        let (maps, infos) = rt.proposal.forward_multiscale(&image).unwrap();
        let pooled = rt.proposal.image_scores(&maps).unwrap();
        let proposals = rt.proposal.propose(&maps, &infos, (64, 64), 0.1, 3).unwrap();
        let net = &rt.verifiers[&1];
        let mut verified: Vec<Vec<f64>> = vec![Vec::new(); 3];
        let mut by_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (i, p) in proposals.iter().enumerate() {
            if p.score >= 0.1 {
                by_class.entry(p.class_id).or_default().push((i, p.score));
            }
        }
        for (_, mut group) in by_class {
            group.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            group.truncate(3);
            for (i, _) in group {
                let patch = crop_patch(&image, &proposals[i].bbox, DESK_VERIFIER_INPUT).unwrap();
                let (out, _) = net.forward(&center_pixels(&patch)).unwrap();
                verified[proposals[i].class_id]
                    .push(sigmoid_scalar(out.data()[proposals[i].class_id]));
            }
        }
        let flat = fuse_scores(&pooled, &verified);
        assert_eq!(result.class_scores, flat, "cascade and flat pipeline disagree");
    }

    #[test]
    fn zero_surviving_proposals_fall_back_to_pooled_scores() {
        let mut rt = chain_runtime(2, 13);
        rt.topology.threshold = 1.0; // nothing passes the proposal gate
        let image = random_image(64, 14);
        let result = rt.infer(&image).unwrap();
        let (maps, infos) = rt.proposal.forward_multiscale(&image).unwrap();
        let pooled = rt.proposal.image_scores(&maps).unwrap();
        assert_eq!(result.class_scores, pooled);
        assert_eq!(result.proposal_count, 0);
        // localization falls back to argmax receptive-field centers
        let centers = rt.proposal.argmax_centers(&maps, &infos).unwrap();
        for (c, p) in result.points.iter().enumerate() {
            assert_eq!((p.0, p.1), (centers[c].0, centers[c].1));
        }
    }

    #[test]
    fn tree_routes_each_class_to_exactly_one_branch() {
        let classes = 4;
        let pnet = ProposalNet::new(
            Network::init(desk_proposal_spec(classes, 15)).unwrap(),
            vec![64],
            PoolingMethod::lse(10.0).unwrap(),
        );
        let topology = CascadeNode {
            id: 0,
            threshold: 0.0,
            k_top: 2,
            class_scope: vec![0, 1, 2, 3],
            checkpoint: "proposal".into(),
            children: vec![
                CascadeNode {
                    id: 1,
                    threshold: 0.0,
                    k_top: 2,
                    class_scope: vec![0, 1],
                    checkpoint: "branch_a".into(),
                    children: Vec::new(),
                },
                CascadeNode {
                    id: 2,
                    threshold: 0.0,
                    k_top: 2,
                    class_scope: vec![2, 3],
                    checkpoint: "branch_b".into(),
                    children: Vec::new(),
                },
            ],
        };
        let mut verifiers = BTreeMap::new();
        verifiers.insert(1, Network::init(desk_verifier_spec(classes, 16)).unwrap());
        verifiers.insert(2, Network::init(desk_verifier_spec(classes, 17)).unwrap());
        let rt = CascadeRuntime {
            topology,
            proposal: pnet,
            verifiers,
            patch_side: DESK_VERIFIER_INPUT,
        };
        rt.validate().unwrap();

        // hand the router proposals for branch-A classes only
        let image = random_image(64, 18);
        let proposals: Vec<Proposal> = vec![
            Proposal {
                class_id: 0,
                bbox: PixelBox::new(2, 2, 24, 24),
                score: 0.9,
                stream: 0,
                cell: (0, 0),
                center: (13.0, 13.0),
            },
            Proposal {
                class_id: 1,
                bbox: PixelBox::new(30, 30, 52, 52),
                score: 0.8,
                stream: 0,
                cell: (1, 1),
                center: (41.0, 41.0),
            },
        ];
        let outcome = rt.route(&image, &proposals).unwrap();
        assert_eq!(outcome.node_counts[&1], 2, "branch A verifies both boxes");
        assert_eq!(outcome.node_counts[&2], 0, "branch B receives zero patches");
        assert!(outcome.reached_leaf.iter().all(|&r| r));
    }

    #[test]
    fn extend_with_unreachable_stage_leaves_output_unchanged() {
        let rt1 = chain_runtime(2, 19);
        // extend with an untrained stage gated at threshold 1.0
        let mut rt2 = rt1.clone();
        let tail = rt2.topology.chain_tail_id();
        rt2.topology.find_mut(tail).unwrap().children.push(CascadeNode {
            id: 99,
            threshold: 1.0,
            k_top: 3,
            class_scope: vec![0, 1],
            checkpoint: "verifier2".into(),
            children: Vec::new(),
        });
        rt2.verifiers
            .insert(99, Network::init(desk_verifier_spec(2, 20)).unwrap());
        rt2.validate().unwrap();
        let image = random_image(64, 21);
        let a = rt1.infer(&image).unwrap();
        let b = rt2.infer(&image).unwrap();
        assert_eq!(a.class_scores, b.class_scores);
        assert_eq!(a.points, b.points);
        assert_eq!(b.node_patch_counts[&99], 0);
    }

    #[test]
    fn surviving_boxes_carry_deepest_scores() {
        let rt = chain_runtime(2, 27);
        let image = random_image(64, 28);
        let survivors = rt.surviving_boxes(&image).unwrap();
        // every survivor was re-scored by the verifier: scores come from the
        // verifier network, not the proposal map
        let (maps, infos) = rt.proposal.forward_multiscale(&image).unwrap();
        let proposals = rt.proposal.propose(&maps, &infos, (64, 64), 0.1, 3).unwrap();
        assert!(survivors.len() <= proposals.len());
        let net = &rt.verifiers[&1];
        for sb in &survivors {
            let patch = crop_patch(&image, &sb.bbox, DESK_VERIFIER_INPUT).unwrap();
            let (out, _) = net.forward(&center_pixels(&patch)).unwrap();
            let expect = sigmoid_scalar(out.data()[sb.class_id]);
            assert!((sb.score - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn topology_text_round_trip() {
        let rt = chain_runtime(3, 23);
        let text = rt.topology.to_text();
        let back = CascadeNode::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back.children.len(), 1);
        assert_eq!(back.children[0].id, 1);
    }

    #[test]
    fn topology_rejects_uncovered_class() {
        let text = "0 -1 0.1 3 0,1,2 proposal\n1 0 0.1 3 0,1 v1\n";
        assert!(CascadeNode::from_text(text).is_err());
    }

    #[test]
    fn topology_rejects_overlapping_siblings() {
        let text = "0 -1 0.1 3 0,1 proposal\n1 0 0.1 3 0,1 a\n2 0 0.1 3 1 b\n";
        assert!(CascadeNode::from_text(text).is_err());
    }

    #[test]
    fn save_load_round_trip_preserves_scores() {
        let rt = chain_runtime(2, 25);
        let dir = std::env::temp_dir().join(format!("weakloc-cascade-{}", std::process::id()));
        rt.save(&dir).unwrap();
        let loaded = CascadeRuntime::load(
            &dir,
            DESK_SCALES.to_vec(),
            PoolingMethod::lse(10.0).unwrap(),
            DESK_VERIFIER_INPUT,
        )
        .unwrap();
        let image = random_image(64, 26);
        let a = rt.infer(&image).unwrap();
        let b = loaded.infer(&image).unwrap();
        assert_eq!(a.class_scores, b.class_scores);
        std::fs::remove_dir_all(&dir).ok();
    }
}
