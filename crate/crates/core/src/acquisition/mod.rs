//! The camera-side half of the robot link: a framed byte protocol, the
//! request responder with its frame buffer, pinhole ground-plane geometry,
//! and a closed-loop approach simulator.

pub mod geometry;
pub mod protocol;
pub mod responder;
pub mod sim;
