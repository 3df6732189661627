//! A two-player recognition game that records where people look.
//!
//! A player paints small bubbles over an image while a classifier partner sees
//! the same spots at a larger size. The round ends when the partner gets the
//! label into its top five or the timer runs out; either way the player's
//! bubbles become an importance map.

pub mod error;
pub mod partner;
pub mod round;
pub mod server;
pub mod store;

pub use error::{GameError, Result};
pub use partner::PartnerClassifier;
pub use round::{Bubble, RoundState, RoundStatus, Verdict};
pub use store::{Catalog, CatalogImage, GameStore};
