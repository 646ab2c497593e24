pub mod ad;
pub mod hvac_model;
pub mod numkit;
pub mod baseline_opt;
pub mod cli;
pub mod report;
pub mod scenario;
pub mod sensitivity;
