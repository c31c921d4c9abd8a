//! Simulation laboratory for symbiotic branching systems on finite site
//! sets: correlated-noise Euler schemes, exact dual particle systems,
//! planar exit-time samplers, and the infinite-branching-rate limit, plus
//! the migration-kernel analysis (semigroups, Green functions, recurrence
//! diagnostics) the longtime-behavior questions hinge on.

pub mod dual;
pub mod error;
pub mod infinite_rate;
pub mod linalg;
pub mod migration;
pub mod noise;
pub mod quadrant;
pub mod sbm;
pub mod stats;
pub mod uniformization;

pub use error::{Result, SimError};
