//! Distributed deep port-Hamiltonian control.
//!
//! This crate builds networks of port-Hamiltonian systems, closes the loop
//! with structured dynamic controllers whose energy is a neural network,
//! trains the discretized closed loop as a stack of layers, and certifies
//! the structural guarantees numerically: closed-loop energy dissipation,
//! non-vanishing backward sensitivities, and compliance with
//! communication-radius constraints.
//!
//! Modules:
//! - [`graph`]: graphs, k-hop neighborhoods, block-sparsity patterns
//! - [`blocklin`]: dense block matrices and structure-preserving maps
//! - [`plant`]: networked pH dynamics and the robot-fleet benchmark
//! - [`controller`]: the trainable pH policy and the MLP baseline
//! - [`simulate`]: closed-loop assembly and fixed-step integrators
//! - [`train`]: losses, reverse-mode gradients, Adam
//! - [`diagnostics`]: dissipation, sensitivity, and distributedness checks
//! - [`config`]: experiment configuration files
//! - [`experiment`]: end-to-end runs writing artifacts to disk

pub mod blocklin;
pub mod config;
pub mod controller;
pub mod diagnostics;
pub mod experiment;
pub mod graph;
pub mod plant;
pub mod simulate;
pub mod svg;
pub mod train;

pub use blocklin::BlockMatrix;
pub use controller::{Controller, ControllerInit, EnergySpec, EnergyVariant, MlpPolicy};
pub use graph::{BlockPattern, Graph};
pub use plant::{robot_benchmark, PHNetwork, RobotFleet};
pub use simulate::{ClosedLoop, Method, Trajectory};
pub use train::{AdamConfig, LossConfig};
