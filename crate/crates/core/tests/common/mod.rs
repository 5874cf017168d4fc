//! Oracles and harnesses shared by several test targets. Each target uses a
//! subset.
#![allow(dead_code)]

pub mod blocks;
pub mod coco_oracle;
pub mod e2e;
