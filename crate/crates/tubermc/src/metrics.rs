//! Tube evaluation metrics.
