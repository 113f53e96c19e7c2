//! Target/auxiliary corpora, augmentation, mixing-ratio sampling and mixed
//! pretraining batches.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod lambda;
pub mod mixing;
pub mod synthetic;

pub use augment::{augment, AugmentationSpec, ColorJitter, GaussianBlur};
pub use dataset::{content_hash, load_dataset, write_dataset, Dataset};
pub use image::{stack_images, unstack_images, ImageTensor, LabeledImage, Split};
pub use lambda::{LambdaMode, LambdaSampler};
pub use mixing::{make_pretrain_batch, mix, BatchSpec, MixedBatch};
pub use synthetic::{generate_synthetic, SyntheticCorpora, SyntheticSpec};
