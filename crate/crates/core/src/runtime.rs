//! Process-level tuning for the tensor workload.

/// Keeps large tensor buffers on the heap instead of fresh `mmap`s.
///
/// Every op allocates its output; with glibc's default thresholds each
/// multi-megabyte buffer is a new mapping that page-faults on first touch,
/// which costs more than the arithmetic for cheap ops. Raising the mmap and
/// trim thresholds lets freed buffers be reused across training steps.
/// Safe to call more than once; a no-op on other platforms.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters; it is called with
    // documented options and in-range values.
    unsafe {
        const MMAP_THRESHOLD_MAX: libc::c_int = 32 << 20;
        libc::mallopt(libc::M_MMAP_THRESHOLD, MMAP_THRESHOLD_MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, libc::c_int::MAX);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
