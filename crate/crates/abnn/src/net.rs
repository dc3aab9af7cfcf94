//! Toy-scale convolutional backbones and the composite model that routes
//! substitute statistics into the target's adaptive normalization layers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::norm::{AdaptiveBatchNorm, BatchNorm, BnMode, BnStats, NormOverride};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::train::{NetKind, PassCounter};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("model spec must contain at least one block")]
    EmptySpec,
    #[error("invalid block spec: {0}")]
    BadSpec(String),
    #[error("substitute has {sub} blocks but target has {tgt}; need at least as many")]
    BlockCount { sub: usize, tgt: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("{path}: not a checkpoint file")]
    BadMagic { path: std::path::PathBuf },
    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: std::path::PathBuf, version: u8 },
    #[error("{path}: truncated or corrupt ({detail})")]
    Corrupt { path: std::path::PathBuf, detail: String },
    #[error("checkpoint does not match model: {detail}")]
    Mismatch { detail: String },
}

/// One convolution block: kernel extent, stride, and whether a 2x2 average
/// pool follows the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvBlockSpec {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(NetError::BadSpec(format!("{self:?} has a zero extent")));
        }
        Ok(())
    }
}

/// Default target backbone: four blocks at 16/32/64/64 channels.
pub fn default_target_blocks() -> Vec<ConvBlockSpec> {
    [16, 32, 64, 64]
        .into_iter()
        .map(|c| ConvBlockSpec { out_channels: c, kernel: 3, stride: 1, pool: true })
        .collect()
}

/// Default substitute backbone: half the width of the target.
pub fn default_substitute_blocks() -> Vec<ConvBlockSpec> {
    [8, 16, 32, 32]
        .into_iter()
        .map(|c| ConvBlockSpec { out_channels: c, kernel: 3, stride: 1, pool: true })
        .collect()
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

struct ConvBlock {
    kernel: ParamId,
    bn: BatchNorm,
    spec: ConvBlockSpec,
}

/// Plain convolutional classifier with standard batch normalization. Serves
/// as the substitute backbone and as the undefended / adversarially trained
/// baselines.
pub struct ConvNet {
    pub params: ParamStore,
    blocks: Vec<ConvBlock>,
    head_w: ParamId,
    head_b: ParamId,
    pub kind: NetKind,
    pub num_classes: usize,
    pub in_channels: usize,
    specs: Vec<ConvBlockSpec>,
}

/// Everything one forward pass of a plain net produces.
pub struct ConvNetOutput {
    pub logits: Var,
    /// Output feature of each block (after normalization, activation, pool).
    pub block_feats: Vec<Var>,
    /// Batch statistics per block in train mode, for the running update.
    pub batch_stats: Vec<Option<BnStats>>,
}

impl ConvNet {
    pub fn build(
        specs: &[ConvBlockSpec],
        in_channels: usize,
        num_classes: usize,
        kind: NetKind,
        seed: u64,
    ) -> Result<Self, NetError> {
        if specs.is_empty() {
            return Err(NetError::EmptySpec);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let k = spec.kernel;
            let fan_in = c_in * k * k;
            let fan_out = spec.out_channels * k * k;
            let kernel = params.add(
                format!("block{i}.conv.kernel"),
                xavier(&mut rng, vec![spec.out_channels, c_in, k, k], fan_in, fan_out),
            );
            let bn = BatchNorm::new(&mut params, &format!("block{i}.bn"), spec.out_channels);
            blocks.push(ConvBlock { kernel, bn, spec: *spec });
            c_in = spec.out_channels;
        }
        let head_w = params.add(
            "head.weight",
            xavier(&mut rng, vec![c_in, num_classes], c_in, num_classes),
        );
        let head_b = params.add("head.bias", Tensor::zeros(vec![num_classes]));
        Ok(ConvNet {
            params,
            blocks,
            head_w,
            head_b,
            kind,
            num_classes,
            in_channels,
            specs: specs.to_vec(),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_channels(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.out_channels).collect()
    }

    pub fn specs(&self) -> &[ConvBlockSpec] {
        &self.specs
    }

    /// One full network traversal, counted as a forward pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: BnMode,
        counter: &mut PassCounter,
    ) -> Result<ConvNetOutput, TensorError> {
        counter.record_forward(self.kind);
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            let kernel = g.param(&self.params, block.kernel);
            let conv = g.conv2d(h, kernel, block.spec.stride, block.spec.kernel / 2)?;
            let (normed, batch) = block.bn.forward(g, &self.params, conv, mode)?;
            stats.push(batch);
            let act = g.relu(normed);
            h = if block.spec.pool { g.avg_pool2d(act, 2, 2)? } else { act };
            feats.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        let logits = g.linear(pooled, w, b)?;
        Ok(ConvNetOutput { logits, block_feats: feats, batch_stats: stats })
    }

    pub fn update_running_stats(&mut self, stats: &[Option<BnStats>]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                block.bn.update_running(s);
            }
        }
    }

    /// Evaluation logits for a host-side batch.
    pub fn eval_logits(&self, x: &Tensor, counter: &mut PassCounter) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, BnMode::Eval, counter)?;
        Ok(g.value_tensor(out.logits))
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(&self.params, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), CheckpointError> {
        load_checkpoint(&mut self.params, path)
    }
}

struct TargetBlock {
    kernel: ParamId,
    abn: AdaptiveBatchNorm,
    spec: ConvBlockSpec,
}

/// Target backbone: every block is followed by an adaptive BN layer fed by
/// a substitute feature.
pub struct TargetNet {
    pub params: ParamStore,
    blocks: Vec<TargetBlock>,
    head_w: ParamId,
    head_b: ParamId,
    pub num_classes: usize,
    pub in_channels: usize,
    specs: Vec<ConvBlockSpec>,
}

impl TargetNet {
    /// `sub_channels[i]` is the channel count of the substitute feature that
    /// feeds block `i`'s encoder.
    pub fn build(
        specs: &[ConvBlockSpec],
        sub_channels: &[usize],
        in_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        if specs.is_empty() {
            return Err(NetError::EmptySpec);
        }
        assert_eq!(specs.len(), sub_channels.len(), "one substitute feed per block");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut c_in = in_channels;
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let k = spec.kernel;
            let kernel = params.add(
                format!("block{i}.conv.kernel"),
                xavier(
                    &mut rng,
                    vec![spec.out_channels, c_in, k, k],
                    c_in * k * k,
                    spec.out_channels * k * k,
                ),
            );
            let abn = AdaptiveBatchNorm::new(
                &mut params,
                &format!("block{i}"),
                sub_channels[i],
                spec.out_channels,
                &mut rng,
            );
            blocks.push(TargetBlock { kernel, abn, spec: *spec });
            c_in = spec.out_channels;
        }
        let head_w = params.add(
            "head.weight",
            xavier(&mut rng, vec![c_in, num_classes], c_in, num_classes),
        );
        let head_b = params.add("head.bias", Tensor::zeros(vec![num_classes]));
        Ok(TargetNet {
            params,
            blocks,
            head_w,
            head_b,
            num_classes,
            in_channels,
            specs: specs.to_vec(),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Forward with one substitute feature per block. Counted as one
    /// target-network traversal.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        sub_feats: &[Var],
        over: Option<NormOverride>,
        counter: &mut PassCounter,
    ) -> Result<Var, TensorError> {
        assert_eq!(sub_feats.len(), self.blocks.len(), "one substitute feed per block");
        counter.record_forward(NetKind::Target);
        let mut h = x;
        for (block, &feat) in self.blocks.iter().zip(sub_feats) {
            let kernel = g.param(&self.params, block.kernel);
            let conv = g.conv2d(h, kernel, block.spec.stride, block.spec.kernel / 2)?;
            let normed = block.abn.forward(g, &self.params, conv, feat, over)?;
            let act = g.relu(normed);
            h = if block.spec.pool { g.avg_pool2d(act, 2, 2)? } else { act };
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        g.linear(pooled, w, b)
    }

    /// The same network with every normalization layer removed
    /// (conv -> relu -> pool only). Comparison path for the
    /// identity-reduction property.
    pub fn forward_without_norm(
        &self,
        g: &mut Graph,
        x: Var,
        counter: &mut PassCounter,
    ) -> Result<Var, TensorError> {
        counter.record_forward(NetKind::Target);
        let mut h = x;
        for block in &self.blocks {
            let kernel = g.param(&self.params, block.kernel);
            let conv = g.conv2d(h, kernel, block.spec.stride, block.spec.kernel / 2)?;
            let act = g.relu(conv);
            h = if block.spec.pool { g.avg_pool2d(act, 2, 2)? } else { act };
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        g.linear(pooled, w, b)
    }

    /// Clone the conv kernels and head into a plain-BN net with unit scale
    /// and zero shift. Comparison model for the standardize override.
    pub fn as_plain_bn(&self) -> ConvNet {
        let mut plain = ConvNet::build(
            &self.specs,
            self.in_channels,
            self.num_classes,
            NetKind::Target,
            0,
        )
        .expect("specs validated at build time");
        for (i, block) in self.blocks.iter().enumerate() {
            let src = self.params.get(block.kernel).value.clone();
            plain.params.get_mut(plain.blocks[i].kernel).value = src.with_grad();
        }
        plain.params.get_mut(plain.head_w).value =
            self.params.get(self.head_w).value.clone().with_grad();
        plain.params.get_mut(plain.head_b).value =
            self.params.get(self.head_b).value.clone().with_grad();
        plain
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(&self.params, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), CheckpointError> {
        load_checkpoint(&mut self.params, path)
    }
}

/// Whether attack gradients may flow through the substitute path or must
/// treat substitute features as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubGrad {
    /// Substitute features are detached: gradient reaches encoder
    /// parameters and the target path only. Training always uses this.
    Detached,
    /// Input gradients flow through the substitute's effect on the
    /// statistics as well (full white-box surface).
    Full,
}

/// Uniform subsample pairing substitute block indices onto target blocks.
pub fn map_blocks(sub_blocks: usize, tgt_blocks: usize) -> Result<Vec<usize>, NetError> {
    if sub_blocks < tgt_blocks {
        return Err(NetError::BlockCount { sub: sub_blocks, tgt: tgt_blocks });
    }
    Ok((0..tgt_blocks)
        .map(|i| ((i as f64 + 0.5) * sub_blocks as f64 / tgt_blocks as f64) as usize)
        .collect())
}

/// Frozen substitute + trainable target with per-block statistic routing.
pub struct AbnnModel {
    pub target: TargetNet,
    pub substitute: ConvNet,
    pub block_map: Vec<usize>,
}

impl AbnnModel {
    /// Assemble around an existing (typically pre-trained) substitute. The
    /// substitute is frozen here; inside the composite it only ever supplies
    /// features and statistics.
    pub fn with_substitute(
        target_specs: &[ConvBlockSpec],
        mut substitute: ConvNet,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        let block_map = map_blocks(substitute.num_blocks(), target_specs.len())?;
        let sub_channels: Vec<usize> =
            block_map.iter().map(|&i| substitute.block_channels()[i]).collect();
        let target = TargetNet::build(
            target_specs,
            &sub_channels,
            substitute.in_channels,
            num_classes,
            seed,
        )?;
        substitute.freeze();
        Ok(AbnnModel { target, substitute, block_map })
    }

    /// Build both networks from scratch (substitute untrained but frozen).
    pub fn build(
        target_specs: &[ConvBlockSpec],
        substitute_specs: &[ConvBlockSpec],
        in_channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        let substitute = ConvNet::build(
            substitute_specs,
            in_channels,
            num_classes,
            NetKind::Substitute,
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        )?;
        Self::with_substitute(target_specs, substitute, num_classes, seed)
    }

    /// Run the composite: the substitute first (eval mode, its own running
    /// statistics), then the target consuming the mapped block features.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        surface: SubGrad,
        over: Option<NormOverride>,
        counter: &mut PassCounter,
    ) -> Result<Var, TensorError> {
        let sub_out = self.substitute.forward(g, x, BnMode::Eval, counter)?;
        let feats: Vec<Var> = self
            .block_map
            .iter()
            .map(|&i| {
                let f = sub_out.block_feats[i];
                match surface {
                    SubGrad::Detached => g.detach(f),
                    SubGrad::Full => f,
                }
            })
            .collect();
        self.target.forward(g, x, &feats, over, counter)
    }

    pub fn eval_logits(
        &self,
        x: &Tensor,
        surface: SubGrad,
        counter: &mut PassCounter,
    ) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = self.forward(&mut g, xv, surface, None, counter)?;
        Ok(g.value_tensor(logits))
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────────
//
// magic "ABNC", version byte, u32 count, then per parameter: u16 name
// length + UTF-8 name, u8 flags (bit 0 = frozen), u8 ndim, u32 dims,
// f64 LE data. Round-trips bit-exactly.

const CKPT_MAGIC: &[u8; 4] = b"ABNC";
const CKPT_VERSION: u8 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.frozen as u8);
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let corrupt = |detail: &str| CheckpointError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 9 || &bytes[0..4] != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
    }
    if bytes[4] != CKPT_VERSION {
        return Err(CheckpointError::BadVersion { path: path.to_path_buf(), version: bytes[4] });
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if count != store.len() {
        return Err(CheckpointError::Mismatch {
            detail: format!("checkpoint has {count} tensors, model has {}", store.len()),
        });
    }
    let mut off = 9;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *off + n > bytes.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    for idx in 0..count {
        let name_len = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| corrupt("invalid name"))?;
        let frozen = take(&mut off, 1)?[0] != 0;
        let ndim = take(&mut off, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
        }
        let param = store.get_mut(crate::tensor::ParamId(idx));
        if param.name != name || param.value.shape() != &shape[..] {
            return Err(CheckpointError::Mismatch {
                detail: format!(
                    "tensor {idx}: checkpoint has {name} {shape:?}, model has {} {:?}",
                    param.name,
                    param.value.shape()
                ),
            });
        }
        param.value = Tensor::new(data, shape).expect("validated").with_grad();
        param.frozen = frozen;
    }
    if off != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
