//! Invariant likelihood estimation for the dynamic panel AR(1) model with
//! fixed effects.
//!
//! ```
//! use dynpanel::dgp::{simulate, DgpConfig, EtaLaw, InitRegime};
//! use dynpanel::estimators::{estimate_mile, lancaster_roots, SearchConfig};
//!
//! let data = simulate(
//!     &DgpConfig::new(0.5, 1.0, 500, 4, 42)
//!         .with_eta(EtaLaw::ScaledToOmega { omega2: 1.0 })
//!         .with_init(InitRegime::Zero),
//! )?;
//! let cfg = SearchConfig::default();
//! let mile = estimate_mile(&data, &cfg)?;
//! let lanc = lancaster_roots(&data, &cfg)?;
//! assert!((mile.theta_hat.rho - 0.5).abs() < 0.1);
//! assert!(lanc.n_local_maxima.unwrap() >= 1);
//! # Ok::<(), dynpanel::Error>(())
//! ```

// `!(x > 0.0)` guards reject NaN as well; keep them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod likelihoods;
pub mod moments;
pub mod montecarlo;
pub mod optim;

pub use error::{Error, Result};
