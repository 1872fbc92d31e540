//! Core of the grace transcoding proxy: translation rules, image codecs, the
//! transcoding pipeline, the remote conversion client and the transform cache.

pub mod cache;
pub mod codecs;
pub mod external;
pub mod media;
pub mod pipeline;
pub mod rules;

pub use media::MediaType;
