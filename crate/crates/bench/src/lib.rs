//! Criterion benchmarks for the alignment, voxelization, clustering and loss
//! kernels live in `benches/`.
