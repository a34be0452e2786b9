//! Numerical toolkit for Schrödinger bridges.
//!
//! The crate is split by problem class:
//!
//! * [`entropic_ot`]: static bridges on finite supports (Sinkhorn) and the
//!   Gaussian entropic coupling.
//! * [`gaussian_bridge`]: closed-form Gaussian bridges for linear reference SDEs.
//! * [`path_sim`]: Euler–Maruyama ensembles, Brownian-bridge mixtures and
//!   Girsanov likelihood ratios.
//! * [`soc`]: value functions on grids, optimal controls and SOC losses.
//! * [`imf`]: iterative Markovian fitting with regression drifts.
//! * [`discrete_sb`]: bridges between laws on a finite state space driven by CTMCs.
//!
//! The deterministic kernels in `entropic_ot` and `gaussian_bridge` are generic
//! over [`Real`]; everything that simulates works in `f64`.

pub mod discrete_sb;
pub mod entropic_ot;
pub mod error;
pub mod gaussian_bridge;
pub mod imf;
pub mod path_sim;
pub mod rng;
pub mod soc;
pub mod stats;

pub use error::{BridgeError, Result};

/// Scalar type accepted by the generic kernels.
pub trait Real:
    nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type DiscreteMeasure = entropic_ot::DiscreteMeasure<f64>;
pub type DiscreteMeasureF32 = entropic_ot::DiscreteMeasure<f32>;
pub type Coupling = entropic_ot::Coupling<f64>;
pub type CouplingF32 = entropic_ot::Coupling<f32>;
pub type DualPotentials = entropic_ot::DualPotentials<f64>;
pub type SinkhornConfig = entropic_ot::SinkhornConfig<f64>;
pub type SinkhornConfigF32 = entropic_ot::SinkhornConfig<f32>;
pub type SinkhornReport = entropic_ot::SinkhornReport<f64>;
pub type GaussianMarginal = gaussian_bridge::GaussianMarginal<f64>;
pub type GaussianMarginalF32 = gaussian_bridge::GaussianMarginal<f32>;
pub type LinearReferenceSde = gaussian_bridge::LinearReferenceSde<f64>;
pub type BridgeSchedule = gaussian_bridge::BridgeSchedule<f64>;
pub type GaussianBridgePath = gaussian_bridge::GaussianBridgePath<f64>;
