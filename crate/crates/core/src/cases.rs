//! Small bundled networks used by the tests, the acceptance suite and the CLI.

/// Two buses, one generator, one 150 MW line feeding a 100 MW load.
pub const CASE2: &str = include_str!("../cases/case2.m");

/// Braess triangle: opening the congested direct A-C line lowers cost.
pub const CASE3B: &str = include_str!("../cases/case3b.m");

/// Radial feeder whose four loads each import close to their line rating.
pub const CASE5R: &str = include_str!("../cases/case5r.m");

/// IEEE 14-bus topology and costs with tightened thermal ratings.
pub const CASE14T: &str = include_str!("../cases/case14t.m");

pub const ALL: [(&str, &str); 4] = [
    ("case2", CASE2),
    ("case3b", CASE3B),
    ("case5r", CASE5R),
    ("case14t", CASE14T),
];

/// Looks up a bundled case by name.
pub fn builtin(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
