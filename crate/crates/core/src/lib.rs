pub mod cvsim;
pub mod datasim;
pub mod divergences;
pub mod flows;
pub mod ndiff;
pub mod privacy;
pub mod train;
