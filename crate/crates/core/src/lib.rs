pub mod cvt;
pub mod flowseg;
pub mod imaging;
pub mod metrics;
pub mod service;
pub mod stitch;
pub mod style;
pub mod synth;
