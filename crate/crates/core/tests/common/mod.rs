#![allow(dead_code)]

pub mod gradcheck;
pub mod metrics;
pub mod service;
