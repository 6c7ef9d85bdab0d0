//! Elastic, fault-tolerant knowledge distillation at desk scale.
//!
//! Teacher inference runs on elastic worker processes that register with a
//! coordinator and heartbeat under a TTL; student workers cache their data
//! shard, stream inputs to the teachers they were assigned, buffer the soft
//! labels that come back, and train with a combined hard/soft loss while
//! averaging gradients over a ring all-reduce.

pub mod allreduce;
pub mod clock;
pub mod coordinator;
pub mod exec;
pub mod harness;
pub mod nnkit;
pub mod protocol;
pub mod student;
pub mod teacher;
