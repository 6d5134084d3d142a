//! Library surface of the MAR command-line tool; the binary in `main.rs`
//! is a thin argument-parsing shell over [`commands`].

pub mod commands;
pub mod config;
pub mod png_out;

/// Process exit codes: 0 success, 2 configuration error, 3 numerical
/// divergence, 4 missing input, 1 anything else.
pub fn exit_code_for(err: &mar_core::MarError) -> i32 {
    use mar_core::MarError::*;
    match err {
        InvalidConfig(_) | EvenFilterSize(_) | DimensionMismatch { .. } => 2,
        Divergence { .. } | StageNan { .. } | NonFinite(_) => 3,
        MissingInput(_) => 4,
        _ => 1,
    }
}
