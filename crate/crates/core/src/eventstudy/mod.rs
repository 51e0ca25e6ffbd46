//! Poisson QMLE structural-break regressions with HAC inference,
//! multiple-testing correction, clustering primitives, and
//! partition-agreement metrics.

mod agreement;
mod cluster;
mod inference;
mod poisson;
mod selection;

pub use agreement::{ari, nmi};
pub use cluster::{kmeans, silhouette, Partition};
pub use inference::{bh_fdr, effect_pct, significance_stars, FdrResult};
pub use poisson::{
    build_design, newey_west_cov, poisson_qmle, poisson_qmle_hac, DesignMatrix, EventPanel,
    EventRow, EventSeries, QmleFit,
};
pub use selection::{k_selection, seed_stability, KSelectionReport, SeedStabilityReport};
