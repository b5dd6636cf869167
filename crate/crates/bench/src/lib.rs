//! Criterion benchmarks for the convolution and filter-bank kernels. Run with
//! `cargo bench -p frs-bench`.
