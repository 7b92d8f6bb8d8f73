//! Simulation of stochastic approximation under state-dependent
//! (performative) data distributions.
//!
//! A learner deploys θ, a population of agents reacts through a controlled
//! Markov kernel, and the learner takes a gradient step on the sample it
//! sees. The crate provides the kernels, the losses, the learner loop, a
//! fixed-point oracle for the performative stable point, and an experiment
//! harness that writes traces and summaries.

pub mod agents;
pub mod harness;
pub mod losses;
pub mod numeric;
pub mod oracle;
pub mod solver;

pub use agents::{
    AgentPool, ArKernel, BestResponseLaw, DistributionMap, GaussianEnv, GaussianIid, GreedyPool,
    InnerSolver, Kernel, KernelOutput, Utility, UtilityKind,
};
pub use losses::{LabeledSample, LossModel, Sample};
pub use numeric::{
    check_schedule, ParamVector, ProblemConstants, RngStream, StepSchedule, StreamRole,
};
pub use oracle::{fit_rate, theta_ps_fixed_point, theta_ps_gaussian, RateFit};
pub use solver::{lazy_run, rrm_run, sa_run, Recording, RunConfig, RunTrace, TraceRecord};
