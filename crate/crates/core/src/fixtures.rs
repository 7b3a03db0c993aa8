//! Bundled Hanoi network files.

use crate::network::{assign_groups, parse_inp, GroupAssignment, GroupConfig, Network, SensorSet};

pub const HANOI_INP: &str = include_str!("../data/hanoi.inp");
pub const HANOI_GROUPS: &str = include_str!("../data/hanoi_groups.conf");

/// Parsed Hanoi network with the default sensors and groups.
pub fn hanoi() -> (Network, SensorSet, GroupAssignment) {
    let net = parse_inp(HANOI_INP).expect("bundled network parses");
    let cfg = GroupConfig::parse(HANOI_GROUPS).expect("bundled group config parses");
    let sensors = SensorSet::new(&net, cfg.sensors.clone()).expect("bundled sensors valid");
    let groups = assign_groups(&net, &cfg).expect("bundled groups valid");
    (net, sensors, groups)
}
