//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

pub mod gradients;
pub mod inference;
pub mod ranking;
