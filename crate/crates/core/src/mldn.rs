//! Three-level classification network: one convolutional sub-network per
//! input level, their pooled features concatenated into a fully connected
//! softmax head, trained in two phases.

use std::path::Path;

use octangle_nn::init::stream_rng;
use octangle_nn::layers::{zero_grads, Role};
use octangle_nn::{softmax, softmax_bce_loss, ConvBlock, GlobalAvgPool, Layer, Linear, Mode, Sequential, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Branch, LevelSource, TrainingLevels};
use crate::error::{Error, Result};
use crate::image::GrayImage;

const MAGIC: &[u8; 4] = b"OMLD";
const FORMAT_VERSION: u32 = 1;
/// Samples per inference chunk.
const INFER_CHUNK: usize = 32;

/// One convolution block: `Conv(out_channels, kernel)` → BN → ReLU, then an
/// optional 2×2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub blocks: Vec<BlockSpec>,
    /// Side of the square input in pixels.
    pub input_size: usize,
}

impl SubnetConfig {
    /// Four 3×3 blocks of 8, 16, 32 and 32 channels, each pooled.
    pub fn desk(input_size: usize) -> Self {
        let blocks = [8, 16, 32, 32].iter().map(|&c| BlockSpec { out_channels: c, kernel: 3, pool: true }).collect();
        Self { blocks, input_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("a sub-network needs at least one block"));
        }
        if let Some(b) = self.blocks.iter().find(|b| b.kernel % 2 == 0 || b.out_channels == 0) {
            return Err(Error::invalid(format!("block {b:?} needs an odd kernel and at least one channel")));
        }
        let pools = self.blocks.iter().filter(|b| b.pool).count() as u32;
        let div = 1usize.checked_shl(pools).unwrap_or(usize::MAX);
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::invalid(format!("input size {} is not divisible by 2^{pools}", self.input_size)));
        }
        Ok(())
    }

    /// Length of the pooled feature vector.
    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }
}

impl Default for SubnetConfig {
    fn default() -> Self {
        Self::desk(224)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MldnConfig {
    pub global: SubnetConfig,
    pub local: SubnetConfig,
    pub aca: SubnetConfig,
    /// Side of the spur-centred crop before it is resized to the input.
    pub patch_size: usize,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl MldnConfig {
    /// The default architecture at the given input size.
    pub fn desk(input_size: usize, seed: u64) -> Self {
        let s = SubnetConfig::desk(input_size);
        Self { global: s.clone(), local: s.clone(), aca: s, patch_size: 120, seed }
    }

    pub fn subnet(&self, branch: Branch) -> &SubnetConfig {
        match branch {
            Branch::Global => &self.global,
            Branch::Local => &self.local,
            Branch::Aca => &self.aca,
        }
    }

    /// Width of the merged feature vector fed to the head.
    pub fn concat_dim(&self) -> usize {
        Branch::ALL.iter().map(|&b| self.subnet(b).output_dim()).sum()
    }

    fn offset(&self, branch: Branch) -> usize {
        Branch::ALL[..branch.index()].iter().map(|&b| self.subnet(b).output_dim()).sum()
    }
}

impl Default for MldnConfig {
    fn default() -> Self {
        Self::desk(224, 0)
    }
}

/// Optimisation settings shared by both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seed of sample order, augmentation draws and temporary heads.
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Weight each class's loss by `N / (2 · N_c)`.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
            balance_classes: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "invalid optimiser settings lr={} momentum={}",
                self.learning_rate, self.momentum
            )));
        }
        self.augment.validate()
    }
}

/// Mean training loss of every epoch of one sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLog {
    pub branch: Branch,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase1: Vec<BranchLog>,
    pub phase2: Vec<f64>,
    pub end_to_end: bool,
}

/// A single-branch classification head over one frozen sub-network.
#[derive(Debug, Clone)]
pub struct BranchHead {
    pub branch: Branch,
    pub head: Linear,
}

pub struct MldnModel {
    config: MldnConfig,
    subnets: [Sequential; 3],
    head: Linear,
    log: TrainLog,
}

impl std::fmt::Debug for MldnModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MldnModel").field("config", &self.config).field("log", &self.log).finish_non_exhaustive()
    }
}

fn build_subnet(cfg: &SubnetConfig, rng: &mut ChaCha8Rng) -> Result<Sequential> {
    cfg.validate()?;
    let mut net = Sequential::new();
    let mut channels = 1;
    for (i, b) in cfg.blocks.iter().enumerate() {
        let mut block = ConvBlock::new(channels, b.out_channels, b.kernel, b.pool, rng)?;
        if i == 0 {
            // The image itself is never trained.
            block.conv.set_propagate_input_grad(false);
        }
        net.push(block);
        channels = b.out_channels;
    }
    net.push(GlobalAvgPool::new());
    Ok(net)
}

/// Stacks equally sized images into an `(n, 1, h, w)` tensor.
pub fn images_to_tensor(images: &[GrayImage], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.height() != size || img.width() != size {
            return Err(Error::Dimension { expected: size, got: if img.height() != size { img.height() } else { img.width() } });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(&[images.len(), 1, size, size], data)?)
}

/// Row-wise concatenation of `(n, d_i)` feature blocks.
fn concat_features(parts: &[&Tensor]) -> Result<Tensor> {
    let n = parts[0].batch();
    let dims: Vec<usize> = parts.iter().map(|p| p.dims2().map(|(_, d)| d)).collect::<std::result::Result<_, _>>()?;
    let total: usize = dims.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &d) in parts.iter().zip(&dims) {
            data.extend_from_slice(&p.data()[i * d..(i + 1) * d]);
        }
    }
    Ok(Tensor::new(&[n, total], data)?)
}

/// Columns `[start, start + d)` of an `(n, total)` tensor.
fn feature_columns(t: &Tensor, start: usize, d: usize) -> Result<Tensor> {
    let (n, total) = t.dims2()?;
    let data = (0..n).flat_map(|i| t.data()[i * total + start..i * total + start + d].iter().copied()).collect();
    Ok(Tensor::new(&[n, d], data)?)
}

/// Splits a shuffled order into mini-batches; a trailing batch of one sample
/// joins its predecessor so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn class_weights(labels: &[u8], balance: bool) -> Option<[f64; 2]> {
    if !balance {
        return None;
    }
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    Some([n / (2.0 * neg), n / (2.0 * pos)])
}

fn check_trainable(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("training needs at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Trains `head` on pre-computed feature rows. `features[f]` holds the
/// `n × dim` features of every sample under variant `f`; each epoch draws one
/// variant per sample. Returns the mean loss of every epoch.
pub fn train_head_on_features(
    head: &mut Linear,
    features: &[Vec<f64>],
    dim: usize,
    labels: &[u8],
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = labels.len();
    check_trainable(n)?;
    if head.inputs() != dim || features.is_empty() || features.iter().any(|f| f.len() != n * dim) {
        return Err(Error::Dimension { expected: n * dim, got: features.first().map_or(0, Vec::len) });
    }
    let weights = class_weights(labels, cfg.balance_classes);
    let mut rng = stream_rng(cfg.seed, stream);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    zero_grads(head);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in batches(&order, cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            for &i in batch {
                let f = rng.random_range(0..features.len());
                x.extend_from_slice(&features[f][i * dim..(i + 1) * dim]);
            }
            let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let logits = head.forward(&Tensor::new(&[batch.len(), dim], x)?, Mode::Train)?;
            let (loss, g) = softmax_bce_loss(&logits, &y, weights)?;
            head.backward(&g)?;
            sgd.step_layers(&mut [head as &mut dyn Layer])?;
            zero_grads(head);
            total += loss * batch.len() as f64;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

impl MldnModel {
    /// Builds three independently initialised sub-networks and the head.
    pub fn new(config: MldnConfig) -> Result<Self> {
        let mut subnets = Vec::with_capacity(3);
        for (i, &b) in Branch::ALL.iter().enumerate() {
            subnets.push(build_subnet(config.subnet(b), &mut stream_rng(config.seed, i as u64 + 1))?);
        }
        let head = Linear::new(config.concat_dim(), 2, &mut stream_rng(config.seed, 4))?;
        let subnets: [Sequential; 3] = subnets.try_into().map_err(|_| Error::invalid("sub-network count"))?;
        Ok(Self { config, subnets, head, log: TrainLog::default() })
    }

    pub fn config(&self) -> &MldnConfig {
        &self.config
    }

    pub fn train_log(&self) -> &TrainLog {
        &self.log
    }

    pub fn subnet(&self, branch: Branch) -> &Sequential {
        &self.subnets[branch.index()]
    }

    pub fn subnet_mut(&mut self, branch: Branch) -> &mut Sequential {
        &mut self.subnets[branch.index()]
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    /// Pooled features of one branch, inference mode.
    pub fn features(&self, branch: Branch, input: &Tensor) -> Result<Tensor> {
        let size = self.config.subnet(branch).input_size;
        let (_, c, h, w) = input.dims4()?;
        if c != 1 || h != size || w != size {
            return Err(Error::Dimension { expected: size, got: if h != size { h } else { w } });
        }
        Ok(self.subnets[branch.index()].infer(input)?)
    }

    /// Concatenated `(n, concat_dim)` features in global, local, aca order.
    pub fn merged_features(&self, global: &Tensor, local: &Tensor, patch: &Tensor) -> Result<Tensor> {
        if global.batch() != local.batch() || global.batch() != patch.batch() {
            return Err(Error::Dimension { expected: global.batch(), got: local.batch().min(patch.batch()) });
        }
        let g = self.features(Branch::Global, global)?;
        let l = self.features(Branch::Local, local)?;
        let a = self.features(Branch::Aca, patch)?;
        concat_features(&[&g, &l, &a])
    }

    /// Class probabilities `(n, 2)`; column 1 is closure.
    pub fn forward(&self, global: &Tensor, local: &Tensor, patch: &Tensor) -> Result<Tensor> {
        let merged = self.merged_features(global, local, patch)?;
        Ok(softmax(&self.head.infer(&merged)?)?)
    }

    /// Closure probability of one triplet and its label at `threshold`.
    pub fn predict(&self, global: &GrayImage, local: &GrayImage, patch: &GrayImage, threshold: f64) -> Result<(f64, bool)> {
        let t = |b: Branch, img: &GrayImage| images_to_tensor(std::slice::from_ref(img), self.config.subnet(b).input_size);
        let p = self.forward(&t(Branch::Global, global)?, &t(Branch::Local, local)?, &t(Branch::Aca, patch)?)?.data()[1];
        Ok((p, p >= threshold))
    }

    fn branch_input(&self, src: &dyn LevelSource, branch: Branch, idx: &[usize], k: f64) -> Result<Tensor> {
        let geo = src.geometry();
        let imgs =
            idx.iter().map(|&i| src.samples()[i].input(branch, geo, k, (0, 0))).collect::<Result<Vec<_>>>()?;
        images_to_tensor(&imgs, self.config.subnet(branch).input_size)
    }

    fn check_geometry(&self, src: &dyn LevelSource) -> Result<()> {
        let size = src.geometry().input_size;
        match Branch::ALL.iter().find(|&&b| self.config.subnet(b).input_size != size) {
            Some(&b) => Err(Error::Dimension { expected: self.config.subnet(b).input_size, got: size }),
            None => Ok(()),
        }
    }

    /// Frozen features of `branches`, concatenated, for every sample under
    /// intensity factor `k` (no shift).
    fn cached_features(&self, src: &dyn LevelSource, branches: &[Branch], k: f64) -> Result<Vec<f64>> {
        self.check_geometry(src)?;
        let all: Vec<usize> = (0..src.len()).collect();
        let mut out = Vec::new();
        for chunk in all.chunks(INFER_CHUNK) {
            let parts = branches
                .iter()
                .map(|&b| self.features(b, &self.branch_input(src, b, chunk, k)?))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = parts.iter().collect();
            out.extend_from_slice(concat_features(&refs)?.data());
        }
        Ok(out)
    }

    /// Closure probability for every sample of `src`, un-augmented.
    pub fn predict_levels(&self, src: &dyn LevelSource) -> Result<Vec<f64>> {
        let feats = self.cached_features(src, &Branch::ALL, 1.0)?;
        let dim = self.config.concat_dim();
        let probs = softmax(&self.head.infer(&Tensor::new(&[src.len(), dim], feats)?)?)?;
        Ok(probs.data().chunks(2).map(|p| p[1]).collect())
    }

    /// Phase 1: each sub-network is trained on its own level with a
    /// temporary two-way head, which is discarded afterwards.
    pub fn train_phase1(&mut self, levels: &TrainingLevels, cfg: &TrainConfig) -> Result<&TrainLog> {
        cfg.validate()?;
        self.check_geometry(levels)?;
        let n = levels.len();
        check_trainable(n)?;
        let labels = levels.labels();
        let weights = class_weights(&labels, cfg.balance_classes);
        let mut logs = Vec::with_capacity(3);
        for &branch in &Branch::ALL {
            let b = branch.index() as u64;
            let size = self.config.subnet(branch).input_size;
            let mut rng = stream_rng(cfg.seed, 100 + b);
            let mut head = Linear::new(self.config.subnet(branch).output_dim(), 2, &mut stream_rng(cfg.seed, 200 + b))?;
            let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
            let subnet = &mut self.subnets[branch.index()];
            zero_grads(subnet);
            let mut order: Vec<usize> = (0..n).collect();
            let mut epoch_losses = Vec::with_capacity(cfg.epochs);
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in batches(&order, cfg.batch_size) {
                    let variants: Vec<usize> = batch.iter().map(|_| rng.random_range(0..cfg.augment.variants())).collect();
                    let imgs = batch
                        .iter()
                        .zip(&variants)
                        .map(|(&i, &v)| {
                            let (k, off) = cfg.augment.variant(v);
                            levels.augmented_input(branch, i, k, off)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
                    let feats = subnet.forward(&images_to_tensor(&imgs, size)?, Mode::Train)?;
                    let logits = head.forward(&feats, Mode::Train)?;
                    let (loss, g) = softmax_bce_loss(&logits, &y, weights)?;
                    if !loss.is_finite() {
                        return Err(Error::invalid(format!("non-finite loss in {} sub-network", branch.name())));
                    }
                    let gf = head.backward(&g)?;
                    subnet.backward(&gf)?;
                    sgd.step_layers(&mut [subnet as &mut dyn Layer, &mut head])?;
                    zero_grads(subnet);
                    zero_grads(&mut head);
                    total += loss * batch.len() as f64;
                }
                epoch_losses.push(total / n as f64);
            }
            logs.push(BranchLog { branch, epoch_losses });
        }
        self.log.phase1 = logs;
        Ok(&self.log)
    }

    /// Phase 2: fine-tunes the merged head on frozen sub-networks (batch-norm
    /// in inference mode), or the whole network when `end_to_end` is set.
    pub fn train_phase2(&mut self, levels: &TrainingLevels, cfg: &TrainConfig, end_to_end: bool) -> Result<&TrainLog> {
        cfg.validate()?;
        if self.log.phase1.is_empty() {
            return Err(Error::invalid("phase 2 requires a completed phase 1"));
        }
        let labels = levels.labels();
        check_trainable(labels.len())?;
        let losses = if end_to_end {
            self.train_end_to_end(levels, &labels, cfg)?
        } else {
            let features = cfg
                .augment
                .intensity_factors
                .iter()
                .map(|&k| self.cached_features(levels, &Branch::ALL, k))
                .collect::<Result<Vec<_>>>()?;
            let dim = self.config.concat_dim();
            train_head_on_features(&mut self.head, &features, dim, &labels, cfg, 300)?
        };
        self.log.phase2 = losses;
        self.log.end_to_end = end_to_end;
        Ok(&self.log)
    }

    fn train_end_to_end(&mut self, levels: &TrainingLevels, labels: &[u8], cfg: &TrainConfig) -> Result<Vec<f64>> {
        self.check_geometry(levels)?;
        let n = labels.len();
        let weights = class_weights(labels, cfg.balance_classes);
        let mut rng = stream_rng(cfg.seed, 400);
        let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
        let mut order: Vec<usize> = (0..n).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        let config = self.config.clone();
        for s in &mut self.subnets {
            zero_grads(s);
        }
        zero_grads(&mut self.head);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in batches(&order, cfg.batch_size) {
                let variants: Vec<(f64, (i64, i64))> =
                    batch.iter().map(|_| cfg.augment.variant(rng.random_range(0..cfg.augment.variants()))).collect();
                let mut feats = Vec::with_capacity(3);
                for &branch in &Branch::ALL {
                    let imgs = batch
                        .iter()
                        .zip(&variants)
                        .map(|(&i, &(k, off))| levels.augmented_input(branch, i, k, off))
                        .collect::<Result<Vec<_>>>()?;
                    let x = images_to_tensor(&imgs, config.subnet(branch).input_size)?;
                    feats.push(self.subnets[branch.index()].forward(&x, Mode::Train)?);
                }
                let refs: Vec<&Tensor> = feats.iter().collect();
                let logits = self.head.forward(&concat_features(&refs)?, Mode::Train)?;
                let y: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, g) = softmax_bce_loss(&logits, &y, weights)?;
                let gm = self.head.backward(&g)?;
                for &branch in &Branch::ALL {
                    let d = config.subnet(branch).output_dim();
                    let gb = feature_columns(&gm, config.offset(branch), d)?;
                    self.subnets[branch.index()].backward(&gb)?;
                }
                let [a, b, c] = &mut self.subnets;
                sgd.step_layers(&mut [a as &mut dyn Layer, b, c, &mut self.head])?;
                for s in &mut self.subnets {
                    zero_grads(s);
                }
                zero_grads(&mut self.head);
                total += loss * batch.len() as f64;
            }
            losses.push(total / n as f64);
        }
        Ok(losses)
    }

    /// Trains a two-way head on the frozen features of a single branch.
    pub fn train_branch_head(&self, branch: Branch, levels: &TrainingLevels, cfg: &TrainConfig) -> Result<(BranchHead, Vec<f64>)> {
        let features = cfg
            .augment
            .intensity_factors
            .iter()
            .map(|&k| self.cached_features(levels, &[branch], k))
            .collect::<Result<Vec<_>>>()?;
        let dim = self.config.subnet(branch).output_dim();
        let mut head = Linear::new(dim, 2, &mut stream_rng(cfg.seed, 500 + branch.index() as u64))?;
        let losses = train_head_on_features(&mut head, &features, dim, &levels.labels(), cfg, 600 + branch.index() as u64)?;
        Ok((BranchHead { branch, head }, losses))
    }

    /// Closure probabilities of a single-branch head.
    pub fn predict_branch(&self, head: &BranchHead, src: &dyn LevelSource) -> Result<Vec<f64>> {
        let feats = self.cached_features(src, &[head.branch], 1.0)?;
        let dim = self.config.subnet(head.branch).output_dim();
        let probs = softmax(&head.head.infer(&Tensor::new(&[src.len(), dim], feats)?)?)?;
        Ok(probs.data().chunks(2).map(|p| p[1]).collect())
    }

    fn visit_all(&self, f: &mut dyn FnMut(&str, &Tensor, Role)) {
        for &b in &Branch::ALL {
            self.subnets[b.index()].visit(b.name(), f);
        }
        self.head.visit("head", f);
    }

    fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, Role)) {
        for &b in &Branch::ALL {
            self.subnets[b.index()].visit_mut(b.name(), f);
        }
        self.head.visit_mut("head", f);
    }

    /// Names and shapes of every stored tensor, parameters and buffers alike.
    pub fn tensor_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |name, t, _| out.push((name.to_string(), t.shape().to_vec())));
        out
    }

    /// Serialised container: magic, version, JSON header, named tensors, CRC32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), train_log: self.log.clone() })?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        let mut tensors = Vec::new();
        self.visit_all(&mut |name, t, _| tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec())));
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Model("bad magic: not a classifier model file".into()));
        }
        if bytes.len() < 8 {
            return Err(Error::Model("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Model(format!("unsupported model version {version}, expected {FORMAT_VERSION}")));
        }
        if bytes.len() < 12 {
            return Err(Error::Model("CRC mismatch: file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Model("CRC mismatch: file corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        let mut model = Self::new(header.config)?;
        model.log = header.train_log;
        let count = r.u32()? as usize;
        let mut stored_tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Model("tensor name is not UTF-8".into()))?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r.take(len.checked_mul(8).ok_or_else(|| Error::Model("tensor too large".into()))?)?;
            let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            stored_tensors.insert(name, (shape, values));
        }
        if r.pos != body.len() {
            return Err(Error::Model("trailing bytes after tensors".into()));
        }
        let mut failure = None;
        let mut used = 0;
        model.visit_all_mut(&mut |name, t, _| {
            if failure.is_some() {
                return;
            }
            match stored_tensors.get(name) {
                Some((shape, values)) if shape.as_slice() == t.shape() => {
                    t.data_mut().copy_from_slice(values);
                    used += 1;
                }
                Some((shape, _)) => failure = Some(format!("tensor {name} has shape {shape:?}, expected {:?}", t.shape())),
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Model(msg));
        }
        if used != stored_tensors.len() {
            return Err(Error::Model(format!("{} unexpected tensors", stored_tensors.len() - used)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MldnConfig,
    train_log: TrainLog,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Model("model file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MldnConfig {
        let s = SubnetConfig { blocks: vec![BlockSpec { out_channels: 3, kernel: 3, pool: true }], input_size: 8 };
        MldnConfig { global: s.clone(), local: s.clone(), aca: s, patch_size: 8, seed: 5 }
    }

    fn inputs(n: usize, size: usize, offset: f64) -> Tensor {
        let data = (0..n * size * size).map(|i| ((i as f64 * 0.37 + offset).sin() + 1.0) / 2.0).collect();
        Tensor::new(&[n, 1, size, size], data).unwrap()
    }

    #[test]
    fn desk_head_input_is_96() {
        assert_eq!(MldnConfig::desk(112, 0).concat_dim(), 96);
        assert!(SubnetConfig { blocks: vec![], input_size: 8 }.validate().is_err());
        assert!(SubnetConfig { blocks: vec![BlockSpec { out_channels: 2, kernel: 2, pool: false }], input_size: 8 }.validate().is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..33).collect();
        let b = batches(&order, 16);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![16, 17]);
        let order: Vec<usize> = (0..34).collect();
        assert_eq!(batches(&order, 16).len(), 3);
    }

    #[test]
    fn rows_sum_to_one_and_zero_head_is_uniform() {
        let mut m = MldnModel::new(tiny()).unwrap();
        let p = m.forward(&inputs(3, 8, 0.0), &inputs(3, 8, 1.0), &inputs(3, 8, 2.0)).unwrap();
        for r in p.data().chunks(2) {
            assert!((r[0] + r[1] - 1.0).abs() < 1e-15);
        }
        m.head_mut().weight.data_mut().fill(0.0);
        m.head_mut().bias.data_mut().fill(0.0);
        let p = m.forward(&inputs(3, 8, 0.0), &inputs(3, 8, 1.0), &inputs(3, 8, 2.0)).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = MldnModel::new(tiny()).unwrap();
        assert!(m.forward(&inputs(1, 16, 0.0), &inputs(1, 8, 0.0), &inputs(1, 8, 0.0)).is_err());
    }

    #[test]
    fn container_rejects_bad_magic_version_and_crc() {
        let m = MldnModel::new(tiny()).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = MldnModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensor_names(), m.tensor_names());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(MldnModel::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(MldnModel::from_bytes(&bad).unwrap_err().to_string().contains("version 2"));
        assert!(MldnModel::from_bytes(&bytes[..bytes.len() - 9]).unwrap_err().to_string().contains("CRC"));
    }
}
