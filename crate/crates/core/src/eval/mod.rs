//! Evaluation suite (placeholder).
