//! Dataset ingestion, augmentation, batching and fold splitting.

mod augment;
mod dataset;
mod image_io;
mod split;

pub use augment::{
    augment_train, augment_with_plan, center_offsets, crop, denormalize, flip_horizontal,
    normalize, preprocess_eval, resize_bilinear, resize_shorter, sample_crop_plan,
    AugmentConfig, CropPlan, IMAGENET_MEAN, IMAGENET_STD,
};
pub use dataset::{load_dataset, DatasetIndex, LabeledSet, Sample, MANIFEST_FILE};
pub use image_io::{
    decode_bytes, decode_image, decode_raw_tensor, encode_pnm, encode_raw_tensor,
    has_image_extension, probe_image, read_raw_tensor, write_raw_tensor, IMAGE_EXTENSIONS,
};
pub use split::{kfold_split, kfold_split_stratified, make_batches, FoldSplit};
