//! Spatio-temporal model.
