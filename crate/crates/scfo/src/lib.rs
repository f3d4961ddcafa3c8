//! Feasible-side safeguards for iterative real-time optimization (RTO).
//!
//! An RTO algorithm proposes a new operating point at every iteration from
//! measured plant data. Applied raw, such proposals can violate hard plant
//! constraints or increase the cost before they ever reach an optimum. This
//! crate wraps *any* target-generating algorithm with a per-iteration
//! safeguard layer:
//!
//! 1. the proposed target is projected onto a robust local feasible-descent
//!    cone built from bounded gradient estimates ([`projection`]),
//! 2. the step toward the projected target is damped by a scalar filter gain
//!    chosen so that worst-case constraint growth stays on the feasible side
//!    and the cost decreases monotonically ([`gain`]),
//! 3. all required bounds (constraint-value upper bounds, gradient boxes,
//!    directional Lipschitz envelopes, quadratic cost bounds) are maintained
//!    from noisy measurements ([`uncertainty`]),
//! 4. a supervisor schedules the projection parameters, searches for feasible
//!    robustness levels, and declares convergence ([`supervisor`]).
//!
//! The projection subproblems are small dense quadratic programs solved by a
//! dual active-set method ([`qp`]). A simulation harness with two benchmark
//! problems, reference algorithms, a seeded noise model, and a reproducible
//! experiment grid lives in [`bench`] and [`algorithms`]; declarative problem
//! and campaign configuration is handled by [`config`].
//!
//! # Example
//!
//! Run the ideal-target algorithm on benchmark problem B for 100 iterations
//! with exact gradients and assert that no hard constraint was ever violated:
//!
//! ```
//! use scfo::bench::builtin_problem;
//! use scfo::supervisor::{run_campaign, CampaignConfig};
//!
//! let problem = builtin_problem("B").unwrap();
//! let cfg = CampaignConfig { k_f: 100, seed: 1, ..CampaignConfig::default() };
//! let trace = run_campaign(&problem, &cfg).unwrap();
//! assert!(trace.max_true_violation() <= 1e-9);
//! ```

pub mod algorithms;
pub mod bench;
pub mod config;
pub mod gain;
pub mod poly;
pub mod problem;
pub mod projection;
pub mod qp;
pub mod supervisor;
pub mod uncertainty;
pub(crate) mod vecops;

pub use problem::{apply_input_filter, optimality_loss, CampaignTrace, IterateState, RtoProblem};
pub use qp::{is_feasible, project_point, LinearSystem};
pub use supervisor::{run_campaign, CampaignConfig};
