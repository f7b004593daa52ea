//! Holds the `acceptance` test target. Kept in its own package so that the
//! engine's own test targets still run when a criterion fails.
