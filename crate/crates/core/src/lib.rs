//! Desk-scale simulator for one-shot federated prompt learning with
//! non-interfering attention masks and server-side prototype refinement.

pub mod cli;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod federation;
pub mod numerics;
