pub mod basis;
pub mod blockmat;
pub mod floquet;
pub mod fourier;
pub mod homology;
pub mod kam;
mod io;
pub mod lattice;
pub mod melnikov;
pub mod potential;
pub mod quadrature;
