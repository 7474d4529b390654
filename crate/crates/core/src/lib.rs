pub mod bath;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod expbath;
pub mod heom;
pub mod nonmarkov;
pub mod quad;
pub mod system;
pub mod tcl;
