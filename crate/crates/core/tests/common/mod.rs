// Each test target uses a different subset of these helpers.
#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod oracles;
