//! Brute-force oracles and fixture generators used by the verification
//! suites. Everything here is written as the most literal possible
//! computation, independent of the implementations it checks.

pub mod fixtures;
pub mod oracle;
