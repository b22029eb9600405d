pub mod gpfit;
pub mod hmc;
pub mod io;
pub mod kernels;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod posterior;
