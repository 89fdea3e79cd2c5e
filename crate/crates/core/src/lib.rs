//! Scene-randomized demonstration generation for tabletop manipulation and a
//! small diffusion policy trained on the generated data.

pub mod augment;
pub mod dataset;
pub mod policy;
pub mod pose;
pub mod randomize;
pub mod sim;
pub mod tolerance;
pub mod trajectory;
