//! The segmentation model: a small multi-stage convolutional encoder with a
//! tap boundary exposing low-level features, a prototype comparison head
//! producing a two-channel score map, BCE training with manual
//! backpropagation, and SGD-with-momentum updates.

mod checkpoint;
mod forward;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_activations, predict, prototypes, prototypes_multi, score_map};
pub use loss::bce_loss;
pub use train::{episode_gradients, episode_loss, train_step, EpisodeGradients, Sgd, TapHook};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::ConvKernel;

/// Softmax temperature applied to cosine scores before the BCE loss; raw
/// cosines in [-1, 1] give vanishing gradients without it.
pub const TEMPERATURE: f64 = 10.0;

/// One encoder stage: 3x3 same-padded convolution, bias, optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub kernel: ConvKernel<T>,
    pub bias: Vec<T>,
    pub relu: bool,
}

/// Geometry of one stage, used by the builder and the checkpoint reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub relu: bool,
}

/// Fixed four-stage architecture: the smallest stack with a usable
/// shallow-vs-deep split. The last stage drops the ReLU.
pub const DEFAULT_ARCH: [StageSpec; 4] = [
    StageSpec { in_c: 3, out_c: 8, stride: 1, relu: true },
    StageSpec { in_c: 8, out_c: 16, stride: 2, relu: true },
    StageSpec { in_c: 16, out_c: 32, stride: 1, relu: true },
    StageSpec { in_c: 32, out_c: 32, stride: 2, relu: false },
];

pub const KERNEL_SIZE: usize = 3;

/// Encoder weights plus the tap boundary and per-stage freeze flags.
///
/// Boundary `i` of the tap means "after stage i"; 0 is the raw input image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    stages: Vec<Stage<T>>,
    tap_index: usize,
    freeze: Vec<bool>,
    init_seed: u64,
}

impl<T: Scalar> EncoderState<T> {
    pub fn from_parts(stages: Vec<Stage<T>>, tap_index: usize, freeze: Vec<bool>, init_seed: u64) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if stages.last().unwrap().relu {
            return Err(Error::Config("final encoder stage must not apply ReLU".into()));
        }
        if freeze.len() != stages.len() {
            return Err(Error::Config(format!(
                "freeze mask has {} entries for {} stages",
                freeze.len(),
                stages.len()
            )));
        }
        if tap_index > stages.len() {
            return Err(Error::Config(format!("tap index {tap_index} beyond {} stages", stages.len())));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.bias.len() != s.kernel.out_c() {
                return Err(Error::Config(format!("stage {} bias length mismatch", i + 1)));
            }
            if i + 1 < stages.len() && stages[i + 1].kernel.in_c() != s.kernel.out_c() {
                return Err(Error::Config(format!("stage {} -> {} channel mismatch", i + 1, i + 2)));
            }
        }
        Ok(Self { stages, tap_index, freeze, init_seed })
    }

    /// Kaiming-style fan-in scaled uniform initialization, biases zero.
    pub fn init(arch: &[StageSpec], tap_index: usize, seed: u64) -> Result<Self> {
        let stages = arch
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let fan_in = (spec.in_c * KERNEL_SIZE * KERNEL_SIZE) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let mut r = rng::stream(seed, "init", i as u64);
                let weights = (0..spec.out_c * spec.in_c * KERNEL_SIZE * KERNEL_SIZE)
                    .map(|_| T::of(r.gen_range(-bound..bound)))
                    .collect();
                Ok(Stage {
                    kernel: ConvKernel::new(
                        spec.out_c,
                        spec.in_c,
                        KERNEL_SIZE,
                        KERNEL_SIZE,
                        spec.stride,
                        KERNEL_SIZE / 2,
                        weights,
                    )?,
                    bias: vec![T::zero(); spec.out_c],
                    relu: spec.relu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = stages.len();
        Self::from_parts(stages, tap_index, vec![false; n], seed)
    }

    pub fn default_init(seed: u64, tap_index: usize) -> Result<Self> {
        Self::init(&DEFAULT_ARCH, tap_index, seed)
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub(crate) fn stages_mut(&mut self) -> &mut [Stage<T>] {
        &mut self.stages
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn set_tap_index(&mut self, tap: usize) -> Result<()> {
        if tap > self.stages.len() {
            return Err(Error::Config(format!("tap index {tap} beyond {} stages", self.stages.len())));
        }
        self.tap_index = tap;
        Ok(())
    }

    pub fn freeze_mask(&self) -> &[bool] {
        &self.freeze
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Freezes the named stages (`stage1`..`stageN`), unfreezing the rest.
    pub fn set_frozen_by_name(&mut self, names: &[String]) -> Result<()> {
        let mut freeze = vec![false; self.stages.len()];
        for name in names {
            let idx: usize = name
                .strip_prefix("stage")
                .and_then(|s| s.parse().ok())
                .filter(|&i| i >= 1 && i <= self.stages.len())
                .ok_or_else(|| Error::Config(format!("freeze: unknown stage `{name}`")))?;
            freeze[idx - 1] = true;
        }
        self.freeze = freeze;
        Ok(())
    }

    pub fn set_freeze_mask(&mut self, freeze: Vec<bool>) -> Result<()> {
        if freeze.len() != self.stages.len() {
            return Err(Error::Config("freeze mask length mismatch".into()));
        }
        self.freeze = freeze;
        Ok(())
    }

    /// Total spatial downsampling factor of the full stack.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.kernel.stride()).product()
    }
}

/// Per-pixel two-channel similarity grid; channel 0 is background,
/// channel 1 foreground. Entries are cosine-valued in [-1, 1] until the
/// foreground channel is calibrated, after which it may exceed that range.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T> {
    bg: Vec<T>,
    fg: Vec<T>,
    h: usize,
    w: usize,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(h: usize, w: usize, bg: Vec<T>, fg: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || bg.len() != h * w || fg.len() != h * w {
            return Err(Error::Shape(format!(
                "score map {h}x{w} with planes {} / {}",
                bg.len(),
                fg.len()
            )));
        }
        if bg.iter().chain(fg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite score entry".into()));
        }
        Ok(Self { bg, fg, h, w })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn bg(&self) -> &[T] {
        &self.bg
    }
    pub fn fg(&self) -> &[T] {
        &self.fg
    }
    pub fn fg_mut(&mut self) -> &mut [T] {
        &mut self.fg
    }
    pub fn bg_at(&self, y: usize, x: usize) -> T {
        self.bg[y * self.w + x]
    }
    pub fn fg_at(&self, y: usize, x: usize) -> T {
        self.fg[y * self.w + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = EncoderState::<f32>::default_init(9, 1).unwrap();
        let b = EncoderState::<f32>::default_init(9, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_stages(), 4);
        assert_eq!(a.total_stride(), 4);
        assert!(!a.stages()[3].relu);
        let c = EncoderState::<f32>::default_init(10, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn last_stage_relu_is_rejected() {
        let mut st = EncoderState::<f64>::default_init(1, 0).unwrap().stages().to_vec();
        st[3].relu = true;
        assert!(EncoderState::from_parts(st, 0, vec![false; 4], 1).is_err());
    }

    #[test]
    fn freeze_by_name() {
        let mut e = EncoderState::<f32>::default_init(3, 1).unwrap();
        e.set_frozen_by_name(&["stage1".into(), "stage2".into()]).unwrap();
        assert_eq!(e.freeze_mask(), &[true, true, false, false]);
        assert!(e.set_frozen_by_name(&["stage9".into()]).is_err());
        assert!(e.set_frozen_by_name(&["conv1".into()]).is_err());
    }
}
