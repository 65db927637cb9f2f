//! Energy growth in geodesic flows coupled to recurrent external dynamics.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod config;
pub mod experiment;
pub mod extflow;
pub mod integrate;
pub mod invariant;
pub mod melnikov;
pub mod models;
pub mod quad;
pub mod scalar;
pub mod scheduler;
pub mod windows;

pub use config::RunConfig;

/// Double-precision instantiations of the scalar-generic types.
pub type Model = models::SystemModel<f64>;
pub type State = models::CotangentState<f64>;
pub type Extended = models::ExtendedState<f64>;
pub type Scaled = models::ScaledState<f64>;
pub type Flow = extflow::ExternalFlowModel<f64>;
pub type Integrator = integrate::IntegratorConfig<f64>;
