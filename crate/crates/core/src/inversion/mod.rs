//! Model inversion attacks: the simple gradient attack, attack losses, a
//! linear generative prior, and the three-stage sampling/optimization/
//! selection pipeline.

mod attack;
mod loss;
mod prior;

pub use attack::{
    optimize_latents, run_ppa, sample_candidates, select_results, simple_invert, AttackConfig,
    AttackOptimizer, AttackRun, ClassAttack, ClassSelection, OptimizeOutcome, OptimizedCandidate,
    SampleSelection, SelectedResult, StopReason, Trajectory, TrajectoryStep,
};
pub use loss::{
    ce_identity_grad, ce_identity_loss, poincare_distance, poincare_grad, poincare_loss,
    PoincareEval,
};
pub use prior::{fit_pca_prior, Prior};
