//! Self-play reasoning RL engine.
//!
//! One step of the loop takes a raw document through three roles played by a
//! single policy: a constructor masks a pivotal span to make a task, a solver
//! samples several answers, and a reviewer who can see the masked span scores
//! and critiques each answer. Rewards become group-relative advantages, and
//! the step either updates the built-in toy policy or exports training
//! batches for an external trainer.

pub mod backend;
pub mod datamodel;
pub mod engine;
pub mod optim;
pub mod promptio;
pub mod reward;
pub mod toypolicy;
