//! Holds no code. The exit criteria of the backend live in
//! `tests/acceptance.rs` and run with `cargo test -p mosgplda-acceptance`.
