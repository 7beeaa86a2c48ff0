pub mod corpus;
pub mod java;
pub mod query;
pub mod selection;
pub mod assembly;
pub mod prompting;
pub mod llm;
pub mod verification;
pub mod metrics;
pub mod config;
pub mod pipeline;
pub mod cli;
