pub mod authorization;
pub mod controller;
pub mod crypto;
pub mod device;
pub mod harness;
pub mod link;
pub mod metadata;
pub mod repository;
