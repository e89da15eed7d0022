//! Evaluation loop: model and baseline tubes scored against ground truth.
