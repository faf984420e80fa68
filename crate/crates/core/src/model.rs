//! Model topology: a small convolutional backbone shared up to the last
//! block, a global branch, and two regional branches that replicate the
//! final block (separate parameters), slice the feature map into two
//! horizontal stripes and reduce each with a 1x1 convolution. Every branch
//! ends in an objective module: global average pooling, clipping, batch
//! norm and a bias-free classifier. Retrieval embeddings are taken after
//! the clip and before the batch norm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, init_bound, BatchNorm, ClipLayer, Conv2D, DenseLayer, Mode, ParamAllocator,
    ParamInfo,
};
use crate::tape::{ParamId, Tape, ValueId};
use crate::tensor::Tensor;
use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Output channels per backbone block; the last entry is replicated
    /// into the global and regional final blocks.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub reduction_channels: usize,
    pub stripes: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub conv_bias_init: f64,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 32,
            input_w: 16,
            channels: vec![8, 16, 32],
            kernel_size: 3,
            reduction_channels: 16,
            stripes: 2,
            clip_lo: 0.0,
            clip_hi: 6.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            conv_bias_init: 0.0,
            num_classes: 1,
        }
    }
}

impl ModelConfig {
    /// Spatial size after the backbone's 2x2 pools.
    pub fn final_spatial(&self) -> Result<(usize, usize)> {
        let blocks = self.channels.len();
        let (mut h, mut w) = (self.input_h, self.input_w);
        for b in 0..blocks {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(
                    "model config",
                    format!("spatial size {}x{} not divisible by 2 at block {}", h, w, b + 1),
                ));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("model config", "channels list is empty"));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(
                "model config",
                format!("kernel size must be odd, got {}", self.kernel_size),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("model config", "num_classes must be positive"));
        }
        if self.stripes == 0 {
            return Err(Error::invalid("model config", "stripes must be >= 1"));
        }
        if self.reduction_channels == 0 {
            return Err(Error::invalid("model config", "reduction_channels must be >= 1"));
        }
        if self.clip_lo >= self.clip_hi {
            return Err(Error::invalid(
                "model config",
                format!("clip interval [{}, {}] is empty", self.clip_lo, self.clip_hi),
            ));
        }
        let (h, w) = self.final_spatial()?;
        if h == 0 || w == 0 {
            return Err(Error::invalid("model config", "feature map collapses to zero size"));
        }
        if h % self.stripes != 0 {
            return Err(Error::invalid(
                "model config",
                format!("final height {} not divisible by {} stripes", h, self.stripes),
            ));
        }
        Ok(())
    }

    /// Embedding width of the concatenated inference descriptor.
    pub fn embedding_dim(&self) -> usize {
        self.channels.last().unwrap() + self.stripes * self.reduction_channels
    }
}

/// conv -> batch norm -> relu -> 2x2 average pool
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2D<Real>,
    pub bn: BatchNorm<Real>,
}

impl ConvBlock {
    fn forward(&mut self, tape: &mut Tape<Real>, x: ValueId, mode: Mode) -> Result<ValueId> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        let y = tape.relu(y);
        tape.avg_pool2(y)
    }
}

/// Objective module head: gap -> clip -> (embedding) -> bn -> classifier.
#[derive(Clone, Debug)]
pub struct ObjectiveModule {
    pub clip: ClipLayer<Real>,
    pub bn: BatchNorm<Real>,
    pub classifier: DenseLayer<Real>,
}

pub struct HeadOutput {
    /// Pre-batch-norm embedding, the retrieval representation.
    pub embedding: ValueId,
    pub logits: ValueId,
}

impl ObjectiveModule {
    pub fn forward(
        &mut self,
        tape: &mut Tape<Real>,
        feature_map: ValueId,
        mode: Mode,
    ) -> Result<HeadOutput> {
        let pooled = global_avg_pool(tape, feature_map)?;
        let embedding = self.clip.forward(tape, pooled)?;
        let normed = self.bn.forward(tape, embedding, mode)?;
        let logits = self.classifier.forward(tape, normed)?;
        Ok(HeadOutput { embedding, logits })
    }
}

#[derive(Clone, Debug)]
pub struct ReidModel {
    pub cfg: ModelConfig,
    shared: Vec<ConvBlock>,
    global_block: ConvBlock,
    regional_block: ConvBlock,
    reductions: Vec<Conv2D<Real>>,
    /// Heads in fixed order: global, then one per stripe top-down.
    heads: Vec<ObjectiveModule>,
    inventory: Vec<ParamInfo>,
}

fn conv_kernel_init(
    shape: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Tensor<Real> {
    match rng {
        Some(rng) => {
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound: f64 = init_bound(fan_in);
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        }
        None => Tensor::zeros(shape),
    }
}

fn dense_kernel_init(shape: &[usize], rng: Option<&mut ChaCha8Rng>) -> Tensor<Real> {
    match rng {
        Some(rng) => {
            let bound: f64 = init_bound(shape[0]);
            Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
        }
        None => Tensor::zeros(shape),
    }
}

fn build_conv_block(
    alloc: &mut ParamAllocator,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    cfg: &ModelConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ConvBlock> {
    let k = cfg.kernel_size;
    let kernel = conv_kernel_init(&[out_ch, in_ch, k, k], rng.as_deref_mut());
    let bias = Tensor::full(&[out_ch], cfg.conv_bias_init);
    let conv = Conv2D::new(
        alloc,
        &format!("{name}.conv"),
        kernel,
        Some(bias),
        1,
        k / 2,
    )?;
    let bn = BatchNorm::new(
        alloc,
        &format!("{name}.bn"),
        out_ch,
        cfg.bn_momentum,
        cfg.bn_eps,
    )?;
    Ok(ConvBlock { conv, bn })
}

fn build_head(
    alloc: &mut ParamAllocator,
    name: &str,
    dim: usize,
    cfg: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ObjectiveModule> {
    let clip = ClipLayer::new(cfg.clip_lo, cfg.clip_hi)?;
    let bn = BatchNorm::new(alloc, &format!("{name}.bn"), dim, cfg.bn_momentum, cfg.bn_eps)?;
    let kernel = dense_kernel_init(&[dim, cfg.num_classes], rng);
    let classifier = DenseLayer::new(alloc, &format!("{name}.classifier"), kernel, None)?;
    Ok(ObjectiveModule {
        clip,
        bn,
        classifier,
    })
}

impl ReidModel {
    /// Builds the model, drawing initial values from `rng`; `None` builds a
    /// zero-initialized skeleton for checkpoint restoration.
    pub fn build(cfg: ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        cfg.validate()?;
        let mut alloc = ParamAllocator::new();
        let blocks = cfg.channels.len();
        let mut shared = Vec::new();
        let mut in_ch = 1;
        for (i, &out_ch) in cfg.channels.iter().take(blocks - 1).enumerate() {
            shared.push(build_conv_block(
                &mut alloc,
                &format!("shared.{i}"),
                in_ch,
                out_ch,
                &cfg,
                rng.as_deref_mut(),
            )?);
            in_ch = out_ch;
        }
        let last_ch = *cfg.channels.last().unwrap();
        let global_block = build_conv_block(
            &mut alloc,
            "global_block",
            in_ch,
            last_ch,
            &cfg,
            rng.as_deref_mut(),
        )?;
        // replicated final block with its own parameters, not shared with
        // the global branch
        let regional_block = build_conv_block(
            &mut alloc,
            "regional_block",
            in_ch,
            last_ch,
            &cfg,
            rng.as_deref_mut(),
        )?;
        let mut reductions = Vec::new();
        for s in 0..cfg.stripes {
            let kernel = conv_kernel_init(
                &[cfg.reduction_channels, last_ch, 1, 1],
                rng.as_deref_mut(),
            );
            let bias = Tensor::full(&[cfg.reduction_channels], cfg.conv_bias_init);
            reductions.push(Conv2D::new(
                &mut alloc,
                &format!("reduction.{s}"),
                kernel,
                Some(bias),
                1,
                0,
            )?);
        }
        let mut heads = Vec::new();
        heads.push(build_head(
            &mut alloc,
            "head.global",
            last_ch,
            &cfg,
            rng.as_deref_mut(),
        )?);
        for s in 0..cfg.stripes {
            heads.push(build_head(
                &mut alloc,
                &format!("head.stripe{s}"),
                cfg.reduction_channels,
                &cfg,
                rng.as_deref_mut(),
            )?);
        }
        Ok(ReidModel {
            cfg,
            shared,
            global_block,
            regional_block,
            reductions,
            heads,
            inventory: alloc.into_infos(),
        })
    }

    pub fn inventory(&self) -> &[ParamInfo] {
        &self.inventory
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Shared trunk up to (excluding) the final blocks.
    fn trunk(&mut self, tape: &mut Tape<Real>, images: &Tensor<Real>, mode: Mode) -> Result<ValueId> {
        if images.rank() != 4
            || images.shape()[1] != 1
            || images.shape()[2] != self.cfg.input_h
            || images.shape()[3] != self.cfg.input_w
        {
            return Err(Error::invalid(
                "model input",
                format!(
                    "expected [N, 1, {}, {}], got {:?}",
                    self.cfg.input_h,
                    self.cfg.input_w,
                    images.shape()
                ),
            ));
        }
        let mut x = tape.leaf(images.clone());
        for block in &mut self.shared {
            x = block.forward(tape, x, mode)?;
        }
        Ok(x)
    }

    /// Training forward pass: one output per objective module, in the
    /// fixed order global, stripe 0 (top), stripe 1.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<Real>,
        images: &Tensor<Real>,
    ) -> Result<Vec<HeadOutput>> {
        self.forward(tape, images, Mode::Train)
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<Real>,
        images: &Tensor<Real>,
        mode: Mode,
    ) -> Result<Vec<HeadOutput>> {
        let trunk = self.trunk(tape, images, mode)?;
        let mut outputs = Vec::with_capacity(self.heads.len());
        let xg = self.global_block.forward(tape, trunk, mode)?;
        outputs.push(self.heads[0].forward(tape, xg, mode)?);
        let xr = self.regional_block.forward(tape, trunk, mode)?;
        let h = tape.value(xr).shape()[2];
        let stripe_h = h / self.cfg.stripes;
        for s in 0..self.cfg.stripes {
            let stripe = tape.slice_rows(xr, s * stripe_h, stripe_h)?;
            let reduced = self.reductions[s].forward(tape, stripe)?;
            outputs.push(self.heads[1 + s].forward(tape, reduced, mode)?);
        }
        Ok(outputs)
    }

    /// Inference descriptor: pre-batch-norm embeddings of every head,
    /// concatenated [global | stripe 0 | stripe 1].
    pub fn infer_embeddings(&mut self, images: &Tensor<Real>) -> Result<Tensor<Real>> {
        let mut tape = Tape::new();
        let outputs = self.forward(&mut tape, images, Mode::Infer)?;
        let n = images.shape()[0];
        let dims: Vec<usize> = outputs
            .iter()
            .map(|o| tape.value(o.embedding).shape()[1])
            .collect();
        let total: usize = dims.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0;
        for (o, &d) in outputs.iter().zip(&dims) {
            let emb = tape.value(o.embedding);
            for r in 0..n {
                data[r * total + offset..r * total + offset + d]
                    .copy_from_slice(&emb.data()[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        Tensor::new(vec![n, total], data)
    }

    pub fn for_each_param(&self, mut f: impl FnMut(ParamId, &Tensor<Real>)) {
        let blocks = self
            .shared
            .iter()
            .chain([&self.global_block, &self.regional_block]);
        for block in blocks {
            f(block.conv.kernel_id, &block.conv.kernel);
            if let Some((id, b)) = &block.conv.bias {
                f(*id, b);
            }
            f(block.bn.gamma_id, &block.bn.gamma);
            f(block.bn.beta_id, &block.bn.beta);
        }
        for conv in &self.reductions {
            f(conv.kernel_id, &conv.kernel);
            if let Some((id, b)) = &conv.bias {
                f(*id, b);
            }
        }
        for head in &self.heads {
            f(head.bn.gamma_id, &head.bn.gamma);
            f(head.bn.beta_id, &head.bn.beta);
            f(head.classifier.kernel_id, &head.classifier.kernel);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamId, &mut Tensor<Real>)) {
        let blocks = self
            .shared
            .iter_mut()
            .chain([&mut self.global_block, &mut self.regional_block]);
        for block in blocks {
            f(block.conv.kernel_id, &mut block.conv.kernel);
            if let Some((id, b)) = &mut block.conv.bias {
                f(*id, b);
            }
            f(block.bn.gamma_id, &mut block.bn.gamma);
            f(block.bn.beta_id, &mut block.bn.beta);
        }
        for conv in &mut self.reductions {
            f(conv.kernel_id, &mut conv.kernel);
            if let Some((id, b)) = &mut conv.bias {
                f(*id, b);
            }
        }
        for head in &mut self.heads {
            f(head.bn.gamma_id, &mut head.bn.gamma);
            f(head.bn.beta_id, &mut head.bn.beta);
            f(head.classifier.kernel_id, &mut head.classifier.kernel);
        }
    }

    /// Parameter values in registration (inventory) order.
    pub fn param_values(&self) -> Vec<(ParamId, Tensor<Real>)> {
        let mut out = Vec::new();
        self.for_each_param(|id, t| out.push((id, t.clone())));
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Non-trainable state (batch norm running stats) in a fixed order.
    pub fn for_each_state(&self, mut f: impl FnMut(String, &[Real])) {
        let blocks = self
            .shared
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("shared.{i}.bn"), b))
            .chain([
                ("global_block.bn".to_string(), &self.global_block),
                ("regional_block.bn".to_string(), &self.regional_block),
            ]);
        for (name, block) in blocks {
            f(format!("{name}.running_mean"), &block.bn.running_mean);
            f(format!("{name}.running_var"), &block.bn.running_var);
        }
        for (i, head) in self.heads.iter().enumerate() {
            let name = if i == 0 {
                "head.global.bn".to_string()
            } else {
                format!("head.stripe{}.bn", i - 1)
            };
            f(format!("{name}.running_mean"), &head.bn.running_mean);
            f(format!("{name}.running_var"), &head.bn.running_var);
        }
    }

    pub fn for_each_state_mut(&mut self, mut f: impl FnMut(String, &mut Vec<Real>)) {
        let blocks = self
            .shared
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("shared.{i}.bn"), b))
            .collect::<Vec<_>>();
        for (name, block) in blocks {
            f(format!("{name}.running_mean"), &mut block.bn.running_mean);
            f(format!("{name}.running_var"), &mut block.bn.running_var);
        }
        f(
            "global_block.bn.running_mean".to_string(),
            &mut self.global_block.bn.running_mean,
        );
        f(
            "global_block.bn.running_var".to_string(),
            &mut self.global_block.bn.running_var,
        );
        f(
            "regional_block.bn.running_mean".to_string(),
            &mut self.regional_block.bn.running_mean,
        );
        f(
            "regional_block.bn.running_var".to_string(),
            &mut self.regional_block.bn.running_var,
        );
        for (i, head) in self.heads.iter_mut().enumerate() {
            let name = if i == 0 {
                "head.global.bn".to_string()
            } else {
                format!("head.stripe{}.bn", i - 1)
            };
            f(format!("{name}.running_mean"), &mut head.bn.running_mean);
            f(format!("{name}.running_var"), &mut head.bn.running_var);
        }
    }

    /// Total squared L2 norm over all trainable arrays.
    pub fn total_weight_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each_param(|_, t| acc += t.sum_squares());
        acc
    }

    /// Mutable access to one block's parameters, used by tests.
    pub fn regional_block_mut(&mut self) -> &mut ConvBlock {
        &mut self.regional_block
    }

    pub fn shared_blocks(&self) -> &[ConvBlock] {
        &self.shared
    }

    pub fn shared_blocks_mut(&mut self) -> &mut [ConvBlock] {
        &mut self.shared
    }
}
