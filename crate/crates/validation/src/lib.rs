//! Holds the `acceptance` test target, which trains the full benchmark and
//! checks every acceptance criterion. Run it with
//! `cargo test -p bayeseg-validation --test acceptance`.
