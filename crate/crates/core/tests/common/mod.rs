#![allow(dead_code)]

pub mod adapters;
pub mod grad;
pub mod quant;
pub mod search;
