//! CTC loss, decoding, error rates and CTC fine-tuning.

mod decode;
mod finetune;
mod loss;
mod metrics;
mod vocab;

pub use decode::{collapse_path, ctc_beam_decode, ctc_greedy_decode};
pub use finetune::{
    finetune, read_hypotheses, read_manifest, write_hypotheses, write_manifest, CtcModel, FinetuneConfig,
    FinetuneLogEntry, LabeledUtterance, ManifestEntry,
};
pub use loss::{ctc_loss, min_frames};
pub use metrics::{corpus_error_rate, edit_distance, error_rate, tokenize, TokenLevel};
pub use vocab::{CtcVocab, BLANK, BLANK_SYMBOL};
