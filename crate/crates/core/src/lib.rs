//! Distribution-shift quantification over multi-modal embedding sets,
//! attention-based modality importance, and weight-space operators for
//! robust fine-tuning, with a deterministic toy trainer that exercises them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ingest;
pub mod stats;
pub mod shift;
pub mod correlation;
pub mod modality;
pub mod ft;
pub mod toy;
pub mod report;
pub mod cli;
