//! Waveform I/O, energy-based voice activity detection and MFCC features.

mod features;
mod mfcc;
mod vad;
mod wav;

pub use features::{frame_align_20ms, read_fmat, write_fmat, FeatureMatrix, FMAT_MAGIC};
pub use mfcc::{log_mel_spectrum, mel_filterbank, mfcc, num_frames, MfccConfig};
pub use vad::{energy_vad, energy_vad_with, strip_silence, VadConfig};
pub use wav::{load_wav, write_wav, Waveform};
