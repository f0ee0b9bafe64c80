pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
