//! Spatial discretization: periodic grids, complex fields, norms and
//! Strichartz-pair arithmetic.

pub mod field;
pub mod grid;
pub mod snapshot;
pub mod strichartz;

pub use field::{lp_norm, Field, RealField};
pub use grid::{make_grid, Grid, GridSpec};
pub use strichartz::{holder_exponent, is_admissible_pair, strichartz_norm, Exponent, StrichartzPair};
