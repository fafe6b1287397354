//! Digital phantom generation: region geometry, time-activity curves and
//! integration of activity over dynamic frames.

mod phantom;
mod tac;

pub use phantom::{make_phantom, PhantomReport, Region, RegionMap};
pub use tac::{
    integrate_frames, integrate_frames_with_step, mean_over_frame, BloodCurve, DynamicImageSet,
    FrameSchedule, TimeActivityModel, TissueCurve,
};
