//! Thermodynamic variational objective toolkit.
//!
//! The geometric path `π_β ∝ q^{1-β} p^β` between an encoder `q(z|x)` and a
//! joint `p(x, z)` turns `log p(x)` into the integral of `η_β = E_{π_β}[log w]`
//! over `β ∈ [0, 1]`. The integrand is evaluated exactly on small models or
//! by self-normalized importance sampling. Partitions of the unit interval
//! turn it into left/right Riemann-sum bounds whose gaps split into KL terms.
//! Gradient estimators for both parameter sets live in [`gradients`].

pub mod battery;
pub mod bounds;
pub mod error;
pub mod gradients;
pub mod models;
pub mod numeric;
pub mod schedules;
pub mod snis;

pub use bounds::{tvo_lower, tvo_upper, BoundReport};
pub use error::{Result, TvoError};
pub use gradients::{Atoms, GradEstimate, ParamVector, TestFunction};
pub use models::{
    DiscreteLatentModel, ExactModel, GaussianPath, LinearGaussianModel, ModelSpec, MomentCurve, PathFamily,
    PathMoments,
};
pub use schedules::Schedule;
pub use snis::LogWeightGrid;
