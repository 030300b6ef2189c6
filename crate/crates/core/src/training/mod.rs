//! Training engine (placeholder).
