pub mod broker;
pub mod calibrate;
pub mod dbmodel;
pub mod hammer;
pub mod migrate;
pub mod desengine;
pub mod namespace;
pub mod pools;
pub mod scenario;
pub mod tablestore;
