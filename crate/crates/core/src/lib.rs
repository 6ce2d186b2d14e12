pub mod controller;
pub mod dataplane;
pub mod fabric;
pub mod flowmap;
pub mod frames;
pub mod ids;
pub mod oam;
pub mod protection;
pub mod scenario;
pub mod simnet;
pub mod spb;
pub mod topology;
