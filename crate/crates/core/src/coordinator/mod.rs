//! Teacher service manager: a TTL-expiring registry of inference workers plus
//! exclusive assignment of teachers to students.

mod client;
mod registry;
mod server;

pub use client::CoordinatorClient;
pub use registry::{
    MemoryStore, Registry, RegistryConfig, RegistryError, RegistryStore, TeacherRecord, Transition,
};
pub use server::{handle_request, CoordinatorHandle, CoordinatorServer, LoggedOp};
