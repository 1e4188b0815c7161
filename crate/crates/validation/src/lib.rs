//! Holds the `acceptance` test target; run it with
//! `cargo test -p kgc-validation --test acceptance`.
