pub mod contact;
pub mod diagnostics;
pub mod features;
pub mod metrics;
pub mod model;
pub mod negatives;
pub mod optim;
pub mod pairs;
pub mod physchem;
pub mod report;
pub mod sequence;
pub mod split;
pub mod store;
pub mod train;
