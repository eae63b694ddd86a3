//! Self-supervised encoder with prototype assignments, and the linear probe
//! trained on its frozen features.

mod msn;
mod probe;

pub use msn::{
    cross_entropy, ema_update, entropy, extract_features, make_views, msn_loss_and_grads,
    msn_loss_frozen, prototype_assignment, target_assignments, train_msn, MsnConfig, MsnOnline,
    MsnState, TrainedMsn, Views,
};
pub use probe::{predict, train_probe, LinearProbe, ProbeConfig};
