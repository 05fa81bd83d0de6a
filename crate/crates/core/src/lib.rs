pub mod baselines;
pub mod cmnist;
pub mod invariance;
pub mod learners;
pub mod numkit;
pub mod sem;
pub mod theory;
