//! Discrete tâtonnement in Fisher markets: market parsing and normalization,
//! demand oracles for the CES/Leontief utility families, the Eisenberg-Gale
//! dual objective with analytic derivatives, the price dynamics themselves,
//! and checkers that certify approximate equilibria and convergence claims.

pub mod demand;
pub mod duality;
pub mod dynamics;
pub mod fd;
pub mod market;
pub mod verify;

pub use demand::{demand, demands, excess_demand, utility, Bundle, ExcessDemand, Prices};
pub use duality::{
    estimate_bounds, grad_phi, hessian_phi, phi, phi_closed_form, psi, solve_equilibrium,
    BoundsEstimate, EquilibriumReport,
};
pub use dynamics::{
    choose_epsilon, distort, init_prices, run, step, InitMode, RunConfig, RunResult, StopReason,
    Trace,
};
pub use market::{load_market, parse_market, Agent, Market, MarketError, UtilitySpec};
pub use verify::{
    assert_invariants, check_def1, check_def2, fit_rate, mwu_certificate,
    ApproxEquilibriumReport, InvariantReport, MwuCertificate, RateFit,
};
