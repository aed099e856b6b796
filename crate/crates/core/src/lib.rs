//! Budget-constrained search for knowledge errors of a black-box
//! question-answering model over a paragraph knowledge base.

pub mod budget;
pub mod config;
pub mod corpus;
pub mod crossval;
pub mod dag;
pub mod embedding;
pub mod engine;
pub mod index;
pub mod prompts;
pub mod qa;
pub mod report;
pub mod retrieval;
pub mod store;
pub mod synthetic;
pub mod testee;
pub mod util;
