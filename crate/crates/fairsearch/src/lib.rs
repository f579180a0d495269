pub mod caratheodory;
pub mod constrained;
pub mod error;
pub mod grdip;
pub mod io;
pub mod jms;
pub mod pandora;
pub mod simlab;
pub mod tol;

pub use error::{Error, Result};
