pub mod attention;
pub mod gradcheck;
pub mod init;
pub mod models;
pub mod noise;
pub mod rng;
pub mod tasks;
pub mod tensor;
