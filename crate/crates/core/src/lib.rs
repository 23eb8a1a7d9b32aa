pub mod backend;
pub mod dataset;
pub mod parser;
pub mod prompt;
pub mod report;
pub mod scoring;
pub mod session;
pub mod taxonomy;
