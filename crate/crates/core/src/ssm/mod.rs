//! State-space sequence kernels: LTI discretization, recurrent and
//! convolutional evaluation, and the input-conditioned selective scan.

mod lti;
mod selective;

pub use lti::{conv_apply, discretize_zoh, scan_recurrent, ssm_kernel, ContinuousSsm, DiscreteSsm, StateMatrix};
pub use selective::{
    selective_scan, selective_scan_backward, selective_scan_seq, selective_scan_step,
    SelectiveGrads, SelectiveScanCache, SelectiveSsmLayer,
};
