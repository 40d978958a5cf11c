//! Expected-utility robo-advisor engine.

pub mod analytics;
pub mod conic;
pub mod elicitation;
pub mod error;
pub mod io;
pub mod kantorovich;
pub mod lfm;
pub mod lottery;
pub mod portfolio;
pub mod questionnaire;
pub mod session;
pub mod service;
pub mod sim;
pub mod utility;

pub use error::{Error, Result};
