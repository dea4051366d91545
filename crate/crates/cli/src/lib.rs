//! Command-line driver and experiment harness.

pub mod commands;
pub mod config;
pub mod harness;
pub mod selftest;
