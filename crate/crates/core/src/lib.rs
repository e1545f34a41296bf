pub mod adaptive;
pub mod augmentation;
pub mod evaluation;
pub mod exec;
pub mod ingest;
pub mod labeling;
pub mod scorer;
pub mod segmentation;
pub mod synth;
