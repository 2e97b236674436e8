//! Tube MPC with an in-the-loop adaptive network for a skid-steer robot.
//!
//! The pipeline: estimate how much control authority the learning component
//! needs ([`bounds`]), plan a reference on tightened sets ([`governor`]),
//! then run the tracking MPC ([`controller`]) with or without the adaptive
//! network ([`net`], [`buffer`]). [`experiment`] wires it together and
//! writes CSV, JSON and SVG artifacts.

pub mod bounds;
pub mod buffer;
pub mod config;
pub mod controller;
pub mod experiment;
pub mod governor;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod ocp;
pub mod plant;
pub mod plot;
