//! Inverse differential games for nonlinear input-affine N-player systems.
//!
//! From demonstrations of a feedback Nash equilibrium the offline path
//! identifies every player's strategy and the affine set of cost parameters
//! consistent with the coupled HJB equations. The online path learns the
//! same quantities with gradient flows on a streamed closed loop. Both are
//! checked by solving the forward game with policy iteration.

// `!(a > b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod expr;
pub mod forward;
pub mod game;
pub mod linalg;
pub mod offline;
pub mod online;
pub mod repro;
pub mod scenario;
pub mod sim;
