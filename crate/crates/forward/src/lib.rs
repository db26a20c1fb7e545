//! Forward-in-time particle models whose genealogies are spatial
//! coalescents: the spatial Cannings model and the lookdown construction.

pub mod genealogy;
pub mod offspring;
pub mod run;

pub use genealogy::{extract_genealogy, ExtractedGenealogy};
pub use offspring::{cannings_p_rates, cannings_rate_table, OffspringLaw, PRate};
pub use run::{cannings_simulate, lookdown_simulate, EventKind, ForwardEvent, ForwardRun, RunOptions};
