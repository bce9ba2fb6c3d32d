//! Spatially aware smart-device control: onboarding, detection, naming,
//! spatial topology, command resolution and actuation.

pub mod adapters;
pub mod command;
pub mod detection;
pub mod model;
pub mod onboarding;
pub mod refinement;
pub mod topology;
pub mod visualizer;
pub mod actuation;
pub mod protocol;
pub mod sim;
pub mod config;
pub mod pipeline;
pub mod session;
pub mod service;
