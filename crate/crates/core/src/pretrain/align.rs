use crate::error::{Error, Result};
use crate::kmeans::CodeSequence;

pub const DEFAULT_TOLERANCE: usize = 3;

/// Truncates `codes` to `t_enc` frames when it is longer by at most `tolerance`.
///
/// A shorter code stream is returned unchanged (within tolerance); the caller then truncates
/// the encoder frames to match.
pub fn align_targets(codes: &CodeSequence, t_enc: usize, tolerance: usize) -> Result<CodeSequence> {
    let n = codes.codes.len();
    if n.abs_diff(t_enc) > tolerance {
        return Err(Error::Utterance {
            utt: codes.id.clone(),
            msg: format!("{n} target frames vs {t_enc} encoder frames exceeds tolerance {tolerance}"),
        });
    }
    let mut out = codes.clone();
    out.codes.truncate(t_enc);
    Ok(out)
}
