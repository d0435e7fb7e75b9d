//! Temporal action proposal generation with a learned background constraint.
//!
//! The pipeline: ingest per-step video features, derive supervision labels
//! from interval overlap, run an attention-based model that scores frames,
//! anchors, and boundaries, train it with balanced logistic losses, and
//! post-process raw scores into ranked proposals whose confidence is damped
//! by the predicted background score. Evaluation covers AR@AN, AUC of the
//! AR-AN curve, and mAP at tIoU thresholds.

pub mod abi;
pub mod attention;
pub mod bp;
pub mod datamodel;
pub mod eval;
pub mod inference;
pub mod labels;
pub mod model;
pub mod numeric;
pub mod params;
pub mod training;
