//! CvT building blocks: convolutional token embedding, convolutional
//! projection, squeezed multi-head self-attention, and the transformer block.

pub mod attention;
pub mod block;
pub mod embed;
pub(crate) mod init;
pub mod norm;
pub mod projection;

pub use attention::{AttnSpec, MhsaConv};
pub use block::{ConvTransformerBlock, Linear, Mlp};
pub use embed::{ConvEmbedSpec, ConvTokenEmbed};
pub use norm::{BatchNorm2d, LayerNorm};
pub use projection::{ConvProjSpec, ConvProjection};

/// Forward-pass mode: training uses batch statistics and updates batch-norm
/// running stats; eval freezes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}
