pub mod agent;
pub mod canonical;
pub mod clock;
pub mod controller;
pub mod domain;
pub mod eval;
pub mod executors;
pub mod grading;
pub mod protocol;
pub mod registry;
pub mod schema;
pub mod tools;
