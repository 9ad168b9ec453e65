//! Sampling, Monte-Carlo error propagation, model fitting and efficiency
//! estimation.

pub mod fit;
pub mod klyshko;
pub mod montecarlo;
pub mod optimize;
pub mod pump;
pub mod sampling;

pub use fit::{fidelity, fit_model, FitOptions, FitResult, ForwardModel};
pub use klyshko::{klyshko_efficiency, KlyshkoEstimate};
pub use montecarlo::{mc_g_surface, mc_std, mc_vector, MCReport, MCVectorReport, Statistic};
pub use pump::{fit_pump_curve, PumpFit};
pub use sampling::{sample_counts, EventSampler};
