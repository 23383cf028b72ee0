//! Home of the `acceptance` test target. Run it with
//! `cargo test -p affect-gate --test acceptance`.
