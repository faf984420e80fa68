//! Layers used by the model topology: dense, 2-D convolution, batch
//! normalization with train/inference modes, global average pooling and
//! the clipping layer.

use crate::error::{Error, Result};
use crate::reg::{classify_category, Category, FieldKind, LayerField, LayerKind};
use crate::scalar::{cast, Scalar};
use crate::tape::{ParamId, ReduceKind, Tape, ValueId};
use crate::tensor::Tensor;

/// Forward-pass mode. Train-mode batch norm uses batch statistics and
/// updates running stats; inference mode reads running stats only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Registry entry for one trainable array. Thetas and other parameters
/// outside the five-category taxonomy carry `category: None` and are never
/// regularized.
#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub id: ParamId,
    pub name: String,
    pub category: Option<Category>,
}

/// Hands out dense parameter ids and records the registry. The allocation
/// order fixes both the penalty summation order and the checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamAllocator {
    infos: Vec<ParamInfo>,
}

impl ParamAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, field: LayerField) -> Result<ParamId> {
        let category = classify_category(field)?;
        let id = ParamId(self.infos.len());
        self.infos.push(ParamInfo {
            id,
            name: name.into(),
            category: Some(category),
        });
        Ok(id)
    }

    /// Allocates a parameter with no factor category (theta scalars).
    pub fn alloc_raw(&mut self, name: impl Into<String>) -> ParamId {
        let id = ParamId(self.infos.len());
        self.infos.push(ParamInfo {
            id,
            name: name.into(),
            category: None,
        });
        id
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn into_infos(self) -> Vec<ParamInfo> {
        self.infos
    }
}

/// Fully-connected layer. Classifier instances carry no bias.
#[derive(Clone, Debug)]
pub struct DenseLayer<F> {
    pub kernel_id: ParamId,
    pub kernel: Tensor<F>,
    pub bias: Option<(ParamId, Tensor<F>)>,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        kernel: Tensor<F>,
        bias: Option<Tensor<F>>,
    ) -> Result<Self> {
        if kernel.rank() != 2 {
            return Err(Error::invalid(
                "dense kernel",
                format!("expected rank-2 kernel, got {:?}", kernel.shape()),
            ));
        }
        let out_dim = kernel.shape()[1];
        let kernel_id = alloc.alloc(
            format!("{name}.kernel"),
            LayerField::new(LayerKind::Dense, FieldKind::Kernel),
        )?;
        let bias = match bias {
            Some(b) => {
                if b.shape() != [out_dim] {
                    return Err(Error::invalid(
                        "dense bias",
                        format!("expected shape [{}], got {:?}", out_dim, b.shape()),
                    ));
                }
                // dense biases sit outside the factor taxonomy; this fails
                // loudly instead of guessing a category
                let id = alloc.alloc(
                    format!("{name}.bias"),
                    LayerField::new(LayerKind::Dense, FieldKind::Bias),
                )?;
                Some((id, b))
            }
            None => None,
        };
        Ok(DenseLayer {
            kernel_id,
            kernel,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: ValueId) -> Result<ValueId> {
        let k = tape.param(self.kernel_id, &self.kernel);
        let y = tape.matmul(x, k)?;
        match &self.bias {
            Some((id, b)) => {
                let bv = tape.param(*id, b);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution, stored OIHW, applied as cross-correlation with zero
/// padding.
#[derive(Clone, Debug)]
pub struct Conv2D<F> {
    pub kernel_id: ParamId,
    pub kernel: Tensor<F>,
    pub bias: Option<(ParamId, Tensor<F>)>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2D<F> {
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        kernel: Tensor<F>,
        bias: Option<Tensor<F>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel.rank() != 4 {
            return Err(Error::invalid(
                "conv kernel",
                format!("expected rank-4 kernel, got {:?}", kernel.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride", "stride must be >= 1"));
        }
        let out_ch = kernel.shape()[0];
        let kernel_id = alloc.alloc(
            format!("{name}.kernel"),
            LayerField::new(LayerKind::Conv, FieldKind::Kernel),
        )?;
        let bias = match bias {
            Some(b) => {
                if b.shape() != [out_ch] {
                    return Err(Error::invalid(
                        "conv bias",
                        format!("expected shape [{}], got {:?}", out_ch, b.shape()),
                    ));
                }
                let id = alloc.alloc(
                    format!("{name}.bias"),
                    LayerField::new(LayerKind::Conv, FieldKind::Bias),
                )?;
                Some((id, b))
            }
            None => None,
        };
        Ok(Conv2D {
            kernel_id,
            kernel,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: ValueId) -> Result<ValueId> {
        let k = tape.param(self.kernel_id, &self.kernel);
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        match &self.bias {
            Some((id, b)) => {
                let bv = tape.param(*id, b);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization. Gamma and beta are trainable; the running
/// statistics are plain state updated by an EMA in train mode.
#[derive(Clone, Debug)]
pub struct BatchNorm<F> {
    pub gamma_id: ParamId,
    pub gamma: Tensor<F>,
    pub beta_id: ParamId,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: F,
    pub eps: F,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(
        alloc: &mut ParamAllocator,
        name: &str,
        channels: usize,
        momentum: F,
        eps: F,
    ) -> Result<Self> {
        if momentum <= F::zero() || momentum >= F::one() {
            return Err(Error::invalid(
                "batch norm momentum",
                format!("must be in (0, 1), got {}", momentum),
            ));
        }
        if eps <= F::zero() {
            return Err(Error::invalid("batch norm epsilon", "must be positive"));
        }
        let gamma_id = alloc.alloc(
            format!("{name}.gamma"),
            LayerField::new(LayerKind::BatchNorm, FieldKind::Gamma),
        )?;
        let beta_id = alloc.alloc(
            format!("{name}.beta"),
            LayerField::new(LayerKind::BatchNorm, FieldKind::Beta),
        )?;
        Ok(BatchNorm {
            gamma_id,
            gamma: Tensor::full(&[channels], F::one()),
            beta_id,
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, tape: &mut Tape<F>, x: ValueId, mode: Mode) -> Result<ValueId> {
        let g = tape.param(self.gamma_id, &self.gamma);
        let b = tape.param(self.beta_id, &self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = self.momentum;
                let keep = F::one() - m;
                for (r, v) in self.running_mean.iter_mut().zip(mean) {
                    *r = keep * *r + m * v;
                }
                for (r, v) in self.running_var.iter_mut().zip(var) {
                    *r = keep * *r + m * v;
                }
                Ok(y)
            }
            Mode::Infer => {
                tape.batch_norm_infer(x, g, b, &self.running_mean, &self.running_var, self.eps)
            }
        }
    }
}

/// Element-wise clamp to a fixed closed interval, placed between global
/// average pooling and batch norm.
#[derive(Clone, Copy, Debug)]
pub struct ClipLayer<F> {
    pub lo: F,
    pub hi: F,
}

impl<F: Scalar> ClipLayer<F> {
    pub fn new(lo: F, hi: F) -> Result<Self> {
        if lo >= hi {
            return Err(Error::invalid(
                "clip interval",
                format!("need lo < hi, got [{}, {}]", lo, hi),
            ));
        }
        Ok(ClipLayer { lo, hi })
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: ValueId) -> Result<ValueId> {
        tape.clamp(x, self.lo, self.hi)
    }
}

/// Global average pooling: per-channel spatial mean, NCHW -> N x C.
pub fn global_avg_pool<F: Scalar>(tape: &mut Tape<F>, x: ValueId) -> Result<ValueId> {
    if tape.value(x).rank() != 4 {
        return Err(Error::invalid(
            "global average pool",
            format!("expected rank-4 input, got {:?}", tape.value(x).shape()),
        ));
    }
    tape.reduce(x, ReduceKind::Mean, &[2, 3])
}

/// Kaiming-uniform style init bound for a given fan-in.
pub fn init_bound<F: Scalar>(fan_in: usize) -> F {
    cast::<F>((6.0 / fan_in as f64).sqrt())
}
