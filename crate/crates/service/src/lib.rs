//! HTTP/JSON API over a loaded synchronization model.
//!
//! * `POST /api/sync`: resynchronize the other text box after an edit
//! * `POST /api/prefix_alternatives`: completions after a forced target prefix
//! * `POST /api/paraphrase`: replacements for a selected target span
//! * `GET /api/config`: languages, defaults and model information

pub mod api;
pub mod engine;
pub mod error;

pub use api::{router, AppState, ConfigResponse};
pub use engine::{load_model, Engine};
pub use error::{ApiError, ErrorBody};
