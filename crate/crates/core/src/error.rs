use thiserror::Error;

/// Failure modes shared by every solver stage.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("potential is singular at centre {index}")]
    Singularity { index: usize },

    #[error("point outside the Hill region (V - 1 = {excess:.3e})")]
    HillBoundary { excess: f64 },

    #[error("angular speed undefined at the origin")]
    Origin,

    #[error("trajectory came within {distance:.3e} of centre {index} (collision radius {limit:.3e})")]
    CollisionProximity {
        index: usize,
        distance: f64,
        limit: f64,
    },

    #[error("integration exhausted {steps} steps at t = {time}")]
    StepExhaustion { steps: usize, time: f64 },

    #[error("no crossing of radius {radius} before t = {max_time}")]
    NoCrossing { radius: f64, max_time: f64 },

    #[error("start state violates the energy shell by {residual:.3e}")]
    OffShell { residual: f64 },

    #[error("shooting did not converge: {0}")]
    NoConvergence(String),

    #[error("partition blocks cannot be separated at this epsilon")]
    InfeasiblePartition,

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("path left its homotopy class")]
    ClassEscape,

    #[error("local geodesic not unique (spread {spread:.3e}); shrink the neighbourhood")]
    UniquenessFailure { spread: f64 },

    #[error("truncation condition violated: {0}")]
    ConditionViolation(String),

    #[error("point left the convex neighbourhood (distance {distance:.3e} > radius {radius:.3e})")]
    NeighborhoodExit { distance: f64, radius: f64 },

    #[error("Jacobi weight degenerates along the path")]
    DegenerateWeight,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("leg {leg} failed: {source}")]
    Leg {
        leg: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn on_leg(self, leg: usize) -> Self {
        Error::Leg {
            leg,
            source: Box::new(self),
        }
    }
}
