//! Mutual information, MIG, ladder attribution and latent traversals.

mod mi;
mod mig;
mod traversal;

pub use mi::{discretize, entropy, mutual_info};
pub use mig::{ladder_attribution, mig, LadderAttribution, LatentFactorTable, MigReport, DEFAULT_BINS};
pub use traversal::{
    default_traversal_values, latent_traversal, traversal_reference, write_traversal_csv, write_traversal_svg,
};

#[cfg(test)]
mod proptests;
