//! Dataset ingestion: manifests, rating tables, mel extraction and the
//! augmented MOS-prediction corpus.

mod augment;
mod manifest;
mod mel;
mod ratings;
mod wav;

pub use augment::{
    augment_from_mels, augment_mos_dataset, dedup_rated, AugmentOptions, Origin, RatedUtterance,
};
pub use manifest::{load_manifest, parse_manifest, AudioManifest, ManifestEntry};
pub use mel::{
    extract_mel, mel_filter_centers, hz_to_mel, mel_to_hz, MelAffine, MelConfig, MelExtractor,
    MelSpectrogram, N_MELS,
};
pub use ratings::{load_ratings, mos_labels, parse_ratings, write_ratings, RatingRecord, RatingTest};
pub use wav::{read_wav, write_wav};
