//! Task-split, blurred task-free and semi-supervised data streams, plus the
//! two-view augmentation pipeline.

pub mod augment;
pub mod blurred;
pub mod dataset;
pub mod masking;
pub mod splits;
pub mod synthetic;

pub use augment::{augment_batch, two_view_augment, AugConfig, ViewPair};
pub use blurred::{blurred_schedule, make_blurred_stream, BlurredStream};
pub use dataset::{load_image_dir, read_packed, write_packed, DataBundle, LabeledDataset, Normalization, Split};
pub use masking::{mask_labels, SemiSupDataset};
pub use splits::{make_class_splits, split_classes, StreamManifest, TaskStream};
pub use synthetic::{synthetic_dataset, Pattern, SyntheticSpec};
