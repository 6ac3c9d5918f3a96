//! Hourly locational marginal values of distributed energy resources on radial
//! distribution feeders, priced from the marginal cost of the wires investment
//! they would defer.

pub mod conic;
pub mod error;
pub mod network;
pub mod distflow;
pub mod oracle;
pub mod valuation;
pub mod io;
pub mod synthetic;
pub mod pipeline;
