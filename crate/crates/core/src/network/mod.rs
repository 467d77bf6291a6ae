//! Encoder / residual / decoder segmentation CNN.
//!
//! Fourteen layers: a 5×5×5 input convolution, three in-plane stride-2
//! convolutions, six residual blocks at the bottleneck, three stride-2 transposed
//! convolutions and a 5×5×1 softmax head. Gradients are hand-derived per layer
//! (see [`ops`]); there is no general autodiff.

mod loss;
mod model;
pub mod ops;
mod params;

pub use loss::{soft_dice_loss, soft_dice_loss_grad, DICE_EPS};
pub use model::{
    backward, bottleneck_dims, eval_forward, forward, forward_train, residual_block_eval, Mode, Tape,
    TrainStep,
};
pub use params::{build, layout, trainable_count, NamedTensor, ParamSet, Slot};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume_io::NUM_CLASSES;

/// Shape of a 5D activation tensor: `(batch, channels, x, y, z)`.
pub type Shape5 = [usize; 5];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels of the first layer; deeper layers use 2×, 4× and 8× this.
    pub base_width: usize,
    pub num_resblocks: usize,
    pub patch_shape: [usize; 3],
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            base_width: 16,
            num_resblocks: 6,
            patch_shape: [256, 256, 5],
        }
    }
}

impl NetworkSpec {
    /// Desk-scale variant: quarter width, 64×64×5 patches.
    pub fn desk() -> Self {
        Self {
            base_width: 4,
            patch_shape: [64, 64, 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 {
            return Err(Error::Spec("in_channels must be 1".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Spec(format!("num_classes must be {NUM_CLASSES}")));
        }
        if self.base_width == 0 {
            return Err(Error::Spec("base_width must be >= 1".into()));
        }
        let [px, py, pz] = self.patch_shape;
        if px == 0 || py == 0 || px % 8 != 0 || py % 8 != 0 {
            return Err(Error::Spec(format!(
                "patch {px}×{py} must be divisible by 8 in-plane"
            )));
        }
        if pz == 0 {
            return Err(Error::Spec("patch depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Channel widths of the four resolution stages.
    pub fn widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    /// Spatial extent at the bottleneck for a given input extent.
    pub fn bottleneck(&self, input: [usize; 3]) -> [usize; 3] {
        [input[0] / 8, input[1] / 8, input[2]]
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
