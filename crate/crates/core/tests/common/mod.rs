#![allow(dead_code)]

pub mod counts;
pub mod linalg;
pub mod models;
pub mod plans;
pub mod toy;
