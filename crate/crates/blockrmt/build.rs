fn main() {
    // Dense eigensolves, SVDs and LU factorizations go through the system
    // OpenBLAS, which bundles a full LAPACK. Symbols are resolved at link time;
    // thread count is pinned to 1 at runtime (see linalg::ensure_serial_blas).
    println!("cargo:rustc-link-lib=dylib=openblas");
}
