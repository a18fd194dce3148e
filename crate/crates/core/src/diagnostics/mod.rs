//! Model criticism: parameter recovery, simulation-based calibration,
//! posterior contraction and embedding-space misspecification tests.

mod io;
mod mmd;
pub mod special;
mod workflow;

pub use io::{write_contraction_csv, write_misspec_csv, write_recovery_csv, write_sbc_ranks_csv, write_sbc_test_csv};
pub use mmd::{
    median_heuristic, misspecification_test, mmd2_unbiased, permutation_p_value, MisspecResult, MIN_NULL_REPLICAS,
};
pub use special::chi2_sf;
pub use workflow::{
    draw_moments, pearson, posterior_contraction, rank_statistic, recovery, sbc_ranks, uniformity_test, RecoveryReport,
    SbcResult, SBC_BINS,
};
