pub mod cli;
pub mod envs;
pub mod eval;
pub mod la;
pub mod policy;
pub mod seed;
pub mod trainer;
pub mod tt;
