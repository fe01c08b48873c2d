//! Target classifier, joint embedder and their checkpoint container.

pub mod checkpoint;
pub mod classifier;
pub mod embedder;
pub mod encoder;

pub use checkpoint::Checkpoint;
pub use classifier::{
    argmax, finetune_multilabel_head, train_classifier, ClassifierConfig, ClassifierModel, HeadConfig,
};
pub use embedder::{train_embedder, EmbedderConfig, JointEmbedder, Vocabulary};
pub use encoder::{Architecture, Encoder, EncoderKind};
