//! Acceptance suite for `spiked-lss`; see `tests/acceptance.rs`. Kept in its
//! own package so that it runs after the unit and integration suites.
