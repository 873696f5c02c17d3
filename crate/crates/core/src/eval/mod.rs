//! Detection and segmentation scoring.

pub mod dice;
pub mod froc;
pub mod maxima;

pub use dice::{dice, dice_global, dice_per_case};
pub use froc::{froc, froc_sweep, match_findings, FrocPoint, MatchResult, SweepPoint, DEFAULT_FP_GRID};
pub use maxima::{extract_maxima, Finding, NmsConfig};
