//! Cued Speech gesture generation: gloss compilation, contrastive encoders,
//! latent diffusion with classifier-free guidance, an audio rhythm module and
//! evaluation metrics, with a synthetic landmark oracle for training data.

pub mod audio;
pub mod error;
pub mod mock;
pub mod motion;
pub mod nn;
pub mod rules;
pub mod stats;
pub mod encoders;
pub mod train;
pub mod latent;
pub mod diffusion;
pub mod rhythm;
pub mod metrics;
pub mod pipeline;

pub use audio::{AudioFeatures, AudioTrack, FeatureExtractor};
pub use diffusion::{DiffusionSchedule, NoisePredictor};
pub use encoders::ClipModel;
pub use error::{Error, Result, StageExt};
pub use latent::{Autoencoder, LatentSequence};
pub use metrics::MetricReport;
pub use motion::{JointMap, MeanMotion, MotionSequence, PoseTable, Segment, SegmentAnnotation, Stream};
pub use pipeline::{Item, Models, RunManifest, TrainConfig};
pub use rhythm::{RhythmGenerator, RhythmOffset};
pub use rules::{CsUnit, Gloss, MappingTable};
