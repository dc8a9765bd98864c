pub mod error;
pub mod governor;
pub mod lifted;
pub mod linprog;
pub mod moas;
pub mod monomial;
pub mod rational;
pub mod scenario;
pub mod simulate;

pub use error::{Error, Result};
