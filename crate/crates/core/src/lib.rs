//! Event-based motion deblurring.
//!
//! - [`event`]: event streams, polarity integrals and stacked event frames
//! - [`simulator`]: threshold-crossing event simulation and synthetic fixtures
//! - [`recon`]: closed-form sequential reconstruction of sharp frames from a
//!   blurred image and its events
//! - [`warp`]: bilinear backward warping and flow losses
//! - [`def`]: directional event filtering with analytic gradients
//! - [`metrics`]: PSNR, SSIM and content loss
//! - [`io`]: on-disk formats

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod def;
pub mod error;
pub mod event;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod metrics;
pub mod recon;
pub mod simulator;
pub mod warp;

pub use error::{Error, Result};
pub use event::{Event, EventStream, Polarity, PolarityIntegralMap, StackedEventFrames};
pub use image::Image;
pub use simulator::FrameSequence;
pub use warp::FlowField;
