//! Bayesian survival analysis with a sigmoidal hazard modulated by a locally
//! linearized feedforward network.
//!
//! Fitting runs in two stages: an EM procedure over the Pólya–Gamma / marked
//! Poisson process augmented model gives the MAP network parameters, then
//! coordinate-ascent variational inference in the linearized model gives a
//! Gamma posterior for the baseline scale and a Gaussian posterior for the
//! network weights. Posterior survival curves, credible bands and the usual
//! survival metrics (Antolini C-index, IPCW Brier / integrated Brier) are
//! computed from the fitted state.
//!
//! Per-observation and per-draw work is data-parallel through [`exec`]; with
//! the `parallel` feature disabled (or [`exec::set_sequential`]) everything
//! runs on the calling thread and produces bit-identical results.

pub mod cavi;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod exec;
pub mod map_em;
pub mod model;
pub mod net;
pub mod numkit;
pub mod optim;
pub mod pipeline;
pub mod predict;
pub mod selfcheck;

pub use cavi::{CaviConfig, CaviTrace, SigmaRepr, VariationalState};
pub use data::{Dataset, Normalization};
pub use map_em::{EmConfig, EmState, EmTrace};
pub use model::{BaselinePrior, HazardContext};
pub use net::{LinearizedModel, MlpModel};
pub use numkit::{QuadratureGrid, RngStream};
pub use pipeline::{FitConfig, FitResult, Posterior};
pub use predict::{ParamPosterior, PosteriorSurvival};
pub use checkpoint::Checkpoint;
