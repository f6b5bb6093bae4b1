//! Simultaneous navigation and characterization of a small body by a
//! spacecraft swarm: truth simulation, landmark correlation, stereovision,
//! unscented filtering and regularized shape fitting.

pub mod dynamics;
pub mod geometry;
pub mod shape;
pub mod truth;
pub mod stereo;
pub mod correlation;
pub mod ukf;
pub mod scenario;
