//! Configuration, synthetic data, checkpoints, training loops and the
//! length-generalization sweep.

pub mod checkpoint;
pub mod config;
pub mod render;
pub mod sweep;
pub mod task;
pub mod train;

pub use checkpoint::{Checkpoint, ModuleKind, DVECTORS_KEY};
pub use config::{ExperimentConfig, ModelKind, ScheduleKind, UsizeList};
pub use task::{gen_dataset, sub_seed, Dataset, SpeakerTransform, SyntheticTask, Utterance};
pub use train::{
    build_encoder, build_synthesizer, enrolled_dvectors, evaluate_encoder, load_encoder, load_synthesizer, random_dvectors, train_encoder,
    train_synth, write_log, EncoderEval, LogRow, TrainOutcome,
};
pub use render::render_waveform;
pub use sweep::{evaluate_length_sweep, export_report, ExportedFiles, SweepEncoder, SweepModel};
