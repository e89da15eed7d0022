//! Run manifests and artifact verification.
