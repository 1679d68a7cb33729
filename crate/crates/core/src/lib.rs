pub mod canlog;
pub mod cli;
pub mod experiment;
pub mod fusionmodel;
pub mod neuralnet;
pub mod seeds;
pub mod sync;
pub mod videostream;
