use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::{Fft, FftDirection, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

/// Engine floating-point precision.
///
/// Training defaults to 32-bit; gradient checking runs in 64-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// Scalar type the engine computes in. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FftNum + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal fits the engine scalar")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// FFT plan from a per-thread planner cache.
    fn plan_fft(len: usize, direction: FftDirection) -> Arc<dyn Fft<Self>>;
}

thread_local! {
    static PLANNER_F32: RefCell<FftPlanner<f32>> = RefCell::new(FftPlanner::new());
    static PLANNER_F64: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    fn plan_fft(len: usize, direction: FftDirection) -> Arc<dyn Fft<f32>> {
        PLANNER_F32.with(|p| p.borrow_mut().plan_fft(len, direction))
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    fn plan_fft(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
        PLANNER_F64.with(|p| p.borrow_mut().plan_fft(len, direction))
    }
}
