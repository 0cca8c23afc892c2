//! Interference-aware task orchestration for volunteer ("unmanaged") edge
//! devices, plus the simulation and analysis tooling needed to evaluate it.
//!
//! Volunteer edge devices — personal laptops, desktops, tablets — are
//! heterogeneous, leave and rejoin without warning, and slow down when their
//! owners use them. The orchestrator in this crate schedules the tasks of an
//! application instance onto such devices using only externally observable
//! signals:
//!
//! * a per-device table of pairwise incremental service-time lines
//!   ("how much slower does a task of type i get per co-located task of
//!   type j"), built by probing and completed by low-rank factorization
//!   when probing is cut short ([`profiling`]),
//! * a semi-Markov availability model fitted to each device's up/down
//!   history ([`availability`]),
//! * online gradient-descent correction of the table from the error between
//!   expected and actual service times ([`orchestrator`]).
//!
//! The [`sim`] module runs the whole loop inside a deterministic
//! discrete-event simulator with churn and capacity variation, against the
//! reference schedulers in [`baselines`]. The [`analysis`] module solves the
//! mean-field queueing chain of the homogeneous serial-dispatch model and
//! compares its expected service time against simulation.

pub mod analysis;
pub mod availability;
pub mod baselines;
pub mod interference;
pub mod model;
pub mod orchestrator;
pub mod profiling;
pub mod scenario;
pub mod sim;
pub mod snapshot;

pub use model::{
    ApplicationInstance, ApplicationProfile, Assignment, AvailabilityTrace, DeviceId, DeviceSpec,
    HyperParams, InterferencePair, ProfileMatrix, ProfileRow, TaskCountMatrix, TaskType,
};
