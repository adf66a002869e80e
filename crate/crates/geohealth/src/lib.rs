//! Predict county-level health statistics from tags attached to geo-referenced
//! social-media images.
//!
//! The pipeline ingests image metadata, resolves each image to a U.S. county,
//! acquires machine-generated tags from an auto-tagging service, builds
//! county × tag feature matrices, fits ridge regressions under k-fold
//! cross-validation, and evaluates the pooled out-of-fold predictions with
//! Pearson's r and SMAPE. A synthetic-corpus generator with a planted linear
//! signal makes the whole chain verifiable end to end.
//!
//! The numeric core (ridge solver, metrics, row normalization) is generic
//! over the scalar type through [`num::Scalar`]; the pipeline instantiates
//! everything at `f64` via the aliases below.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geo;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod num;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tagging;

pub use error::{Error, Result};

/// Scalar type used by the concrete pipeline.
pub type Real = f64;
/// Dense matrix over [`Real`].
pub type Matrix = ndarray::Array2<Real>;
/// Dense vector over [`Real`].
pub type Vector = ndarray::Array1<Real>;
/// Fitted ridge model over [`Real`].
pub type RidgeModel = model::FittedModel<Real>;
/// Cross-validation result over [`Real`].
pub type CrossVal = model::CrossValResult<Real>;
