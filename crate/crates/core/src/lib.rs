//! Statistical forensics for ballot-box level election results.
//!
//! The crate ingests per-box result tables and runs a battery of tests on
//! them:
//!
//! * [`fingerprint`] builds vote/turnout fingerprints (raw and standardized
//!   against local group means) and cumulative vote-share curves.
//! * [`stuffing`] fits the fraction of ballot-stuffed boxes `f` in a
//!   generative fraud model and attaches a parametric-bootstrap SD.
//! * [`rigging`] measures the displacement between standardized small and
//!   large units over a range of size thresholds and compares it with an
//!   envelope built from reference elections.
//! * [`voteshift`] compares two rounds box by box, estimates the modal vote
//!   shift and counts the excess votes implied by an asymmetric shift
//!   distribution.
//!
//! [`synth`] provides the generative election model used inside the stuffing
//! fit and as ground truth for validating every detector.

pub mod error;
pub mod fingerprint;
pub mod ingest;
pub mod kde;
pub mod optimize;
pub mod rigging;
pub mod rng;
pub mod stats;
pub mod stuffing;
pub mod synth;
pub mod voteshift;

pub use error::{Error, Result};
pub use ingest::{AreaLevel, BallotBox, DerivedShares, ElectionRound, IngestConfig};
