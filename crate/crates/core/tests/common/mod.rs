#![allow(dead_code)]

pub mod pcap_fixtures;
pub mod tiny;
pub mod widening;
