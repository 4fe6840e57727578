//! Video features and the contrastive audio/text encoders.

pub mod contrastive;
pub mod video;

pub use video::{extract_video_features, VideoFeatures, VideoFrames};
pub use contrastive::{
    caption_words, project_audio, project_video, AudioEmbedding, ContrastiveConfig, ContrastiveModel, ContrastiveReport,
    Projector, EMBED_DIM,
};
