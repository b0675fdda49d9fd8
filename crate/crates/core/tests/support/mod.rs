//! Test-only oracles, independent of the library's forward and backward
//! code paths.
#![allow(dead_code)]

pub mod reference;
