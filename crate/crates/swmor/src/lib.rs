//! Certified balanced truncation for switched descriptor systems.
//!
//! The toolkit decomposes each mode of a switched DAE through Wong-sequence
//! subspaces, rewrites the system as a switched ODE with state jumps, solves
//! generalized Lyapunov equations for low-rank Gramian factors with rigorous
//! error radii, reduces by Petrov-Galerkin projection, and reports an
//! a-priori output error certificate that accounts for the numerical Gramian
//! error. Deterministic benchmark generators, a jump-aware simulator, and
//! brute-force verification oracles round out the pipeline.

pub mod balance;
pub mod bench;
pub mod densela;
pub mod gle;
pub mod inputs;
pub mod io;
pub mod jumpflow;
pub mod householder;
pub mod lyapunov;
pub mod oracle;
pub mod qwf;
pub mod rng;
pub mod sim;
pub mod system;
pub mod sparse;
