#![allow(dead_code)]

pub mod lad;
