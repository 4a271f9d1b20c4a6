pub mod evaluate;
pub mod generate;
pub mod synth;
pub mod train;
