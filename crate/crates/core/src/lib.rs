//! Thresholded lexicographic Q-learning for multi-objective driving.

pub mod momdp;
pub mod neural;
pub mod tlq;
pub mod sim;
pub mod features;
pub mod objectives;
pub mod learner;
pub mod harness;
