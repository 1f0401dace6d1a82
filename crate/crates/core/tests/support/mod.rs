#![allow(dead_code)]

pub mod corpus;
pub mod gradcheck;
pub mod oracles;
pub mod suites;
