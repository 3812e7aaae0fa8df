//! Screening, spatio-temporal targeting and storage planning for radial
//! distribution feeders under growing EV charging load.

pub mod netmodel;
pub mod vva;
pub mod stat;
pub mod scenarios;
pub mod oep;
pub mod pipeline;
