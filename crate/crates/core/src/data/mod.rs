//! Dataset construction: synthetic teacher tasks, transfer pairs, MNIST
//! ingestion and the correlation-shift digit splits.

pub mod mnist;
pub mod ood;
pub mod synth;

pub use mnist::{load_mnist_idx, LabeledImages};
pub use ood::{accuracy, argmax_columns, build_ood, one_hot, OodDataset, OodSizes, OodSplit};
pub use synth::{
    calibrate_sigma, make_spectrum, make_teacher, make_transfer_pair, softplus, synth_generate,
    synth_generate_with_sigma, teacher_label, teacher_signal, Case, Dataset, DatasetMeta, SpectrumSpec,
    TeacherSpec, TransferDirection, TransferPair,
};
