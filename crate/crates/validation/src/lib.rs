//! Host crate for the `acceptance` test target, which checks the toolkit
//! against its acceptance criteria. Run it with
//! `cargo test -p spkstyle-validation --test acceptance`.
