#![allow(dead_code)]
pub mod checks;
pub mod fixtures;
pub mod metric_oracle;
