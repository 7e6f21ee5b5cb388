#![allow(dead_code)]

pub mod bn_probe;
pub mod grad;
pub mod oracles;
pub mod pipeline;
