//! Separable-function digital predistortion.
//!
//! The crate models a predistorter as a `K x Q` matrix of univariate envelope
//! functions combined either multiplicatively (each row a product over the
//! memory taps) or additively, fits it by indirect learning against simulated
//! power-amplifier models, and evaluates the result spectrally.
//!
//! Module map:
//!
//! * [`operators`] – complex sequences and induced (sliding-kernel) operators
//! * [`signals`] – test waveforms and envelope histograms
//! * [`basis`] – density-weighted orthonormal polynomials and LUT entries
//! * [`predistorter`] – the predistorter matrix and its file format
//! * [`hpa`] – memory-polynomial and static amplifier models
//! * [`training`] – least-squares, alternating and conjugate-gradient fits
//! * [`metrics`] – Welch PSD, NMSE and shoulder levels

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basis;
pub mod error;
pub mod hpa;
pub mod metrics;
pub mod operators;
pub mod predistorter;
pub mod signals;
pub mod training;

pub use num_complex::Complex64;

pub use basis::{build_basis, normalize_for_plot, poly_to_lut, OrthonormalBasis, UnivariateFunction};
pub use error::{Error, Result};
pub use hpa::{HpaKind, HpaModel, StaticCurve};
pub use operators::{measure_gain, ComplexSequence, InducedOperator, Operator};
pub use predistorter::{PredistorterMatrix, Structure};
pub use signals::{envelope_histogram, generate, DensityTable, Modulation, WaveformConfig, WaveformKind};
pub use metrics::{nmse_db, shoulder_level_db, welch_psd, SpectrumEstimate, Window};
pub use training::{indirect_learning_loop, AdaptationRun, PredistorterSpec, Solver, TrainingConfig, TrainingRun};
