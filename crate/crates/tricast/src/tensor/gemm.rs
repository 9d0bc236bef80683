//! Dense row-major `f64` matrix multiply.
//!
//! The kernel delegates to the system BLAS (`cblas_dgemm`) when one can be
//! loaded at runtime, and otherwise falls back to a blocked pure-Rust loop.
//! Loading happens through `dlopen` rather than link-time binding because
//! OpenBLAS selects its CPU kernel from the `OPENBLAS_CORETYPE` environment
//! variable inside its load-time constructor; on machines whose CPU model
//! postdates the installed OpenBLAS, the auto-detection falls back to a slow
//! generic kernel, so the variable is pinned from the CPU feature flags
//! before the library is mapped. The thread count is forced to 1: results
//! must not depend on a runtime thread pool.

use std::ffi::c_int;
use std::sync::OnceLock;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

type CblasDgemm = unsafe extern "C" fn(
    order: c_int,
    transa: c_int,
    transb: c_int,
    m: c_int,
    n: c_int,
    k: c_int,
    alpha: f64,
    a: *const f64,
    lda: c_int,
    b: *const f64,
    ldb: c_int,
    beta: f64,
    c: *mut f64,
    ldc: c_int,
);

struct Blas {
    dgemm: CblasDgemm,
}

// The function pointer is only ever called, never mutated; the library stays
// mapped for the process lifetime.
unsafe impl Send for Blas {}
unsafe impl Sync for Blas {}

static BLAS: OnceLock<Option<Blas>> = OnceLock::new();

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

#[cfg(target_os = "linux")]
fn pin_core_type() {
    if std::env::var_os("OPENBLAS_CORETYPE").is_some() {
        return;
    }
    let Ok(cpuinfo) = std::fs::read_to_string("/proc/cpuinfo") else {
        return;
    };
    let core = if cpuinfo.contains("avx512f") {
        "SKYLAKEX"
    } else if cpuinfo.contains("avx2") {
        "HASWELL"
    } else {
        return;
    };
    std::env::set_var("OPENBLAS_CORETYPE", core);
}

#[cfg(not(target_os = "linux"))]
fn pin_core_type() {}

#[cfg(unix)]
fn load_blas() -> Option<Blas> {
    pin_core_type();
    // 64-suffixed builds use 64-bit integer arguments and are deliberately
    // not probed; the cblas signature here assumes 32-bit ints.
    for name in ["libopenblas.so.0\0", "libopenblas.so\0", "libcblas.so.3\0"] {
        let handle =
            unsafe { libc::dlopen(name.as_ptr().cast(), libc::RTLD_NOW | libc::RTLD_LOCAL) };
        if handle.is_null() {
            continue;
        }
        let sym = unsafe { libc::dlsym(handle, "cblas_dgemm\0".as_ptr().cast()) };
        if sym.is_null() {
            unsafe { libc::dlclose(handle) };
            continue;
        }
        let set_threads = unsafe { libc::dlsym(handle, "openblas_set_num_threads\0".as_ptr().cast()) };
        if !set_threads.is_null() {
            let set: unsafe extern "C" fn(c_int) = unsafe { std::mem::transmute(set_threads) };
            unsafe { set(1) };
        }
        let dgemm: CblasDgemm = unsafe { std::mem::transmute(sym) };
        log::debug!("matmul kernel: {}", name.trim_end_matches('\0'));
        return Some(Blas { dgemm });
    }
    None
}

#[cfg(not(unix))]
fn load_blas() -> Option<Blas> {
    None
}

/// Resolves the kernel once, before any compute threads exist. Safe to call
/// repeatedly; later `dgemm` calls reuse the resolved kernel.
pub fn ensure_kernel() -> bool {
    BLAS.get_or_init(load_blas).is_some()
}

/// `C = alpha * op(A) * op(B) + beta * C` over row-major slices, where
/// `op` optionally transposes. `m`/`n`/`k` are the dimensions *after*
/// transposition: `op(A)` is `m x k`, `op(B)` is `k x n`, `C` is `m x n`.
/// Leading dimensions (`lda`, `ldb`, `ldc`) are the row strides of the
/// *stored* matrices, which permits operating on column slices in place.
#[allow(clippy::too_many_arguments)]
pub fn dgemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a_rows, a_cols) = match ta {
        Trans::No => (m, k),
        Trans::Yes => (k, m),
    };
    let (b_rows, b_cols) = match tb {
        Trans::No => (k, n),
        Trans::Yes => (n, k),
    };
    assert!(lda >= a_cols.max(1) && ldb >= b_cols.max(1) && ldc >= n);
    assert!(a_rows == 0 || (a_rows - 1) * lda + a_cols <= a.len(), "A out of bounds");
    assert!(b_rows == 0 || (b_rows - 1) * ldb + b_cols <= b.len(), "B out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "C out of bounds");

    if let Some(blas) = BLAS.get_or_init(load_blas) {
        let t = |t: Trans| if t == Trans::Yes { CBLAS_TRANS } else { CBLAS_NO_TRANS };
        unsafe {
            (blas.dgemm)(
                CBLAS_ROW_MAJOR,
                t(ta),
                t(tb),
                m as c_int,
                n as c_int,
                k as c_int,
                alpha,
                a.as_ptr(),
                lda as c_int,
                b.as_ptr(),
                ldb as c_int,
                beta,
                c.as_mut_ptr(),
                ldc as c_int,
            );
        }
        return;
    }
    dgemm_native(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

/// Pure-Rust fallback: packs the operands contiguously without transposition
/// and runs an i-k-j loop that the compiler vectorizes.
#[allow(clippy::too_many_arguments)]
fn dgemm_native(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    let pack = |src: &[f64], ld: usize, rows: usize, cols: usize, transpose: bool| -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        if transpose {
            // Stored as cols x rows; emit rows x cols.
            for r in 0..rows {
                for ccol in 0..cols {
                    out[r * cols + ccol] = src[ccol * ld + r];
                }
            }
        } else {
            for r in 0..rows {
                out[r * cols..r * cols + cols].copy_from_slice(&src[r * ld..r * ld + cols]);
            }
        }
        out
    };
    let ap = pack(a, lda, m, k, ta == Trans::Yes);
    let bp = pack(b, ldb, k, n, tb == Trans::Yes);

    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        if beta == 0.0 {
            crow.fill(0.0);
        } else if beta != 1.0 {
            crow.iter_mut().for_each(|v| *v *= beta);
        }
        for kk in 0..k {
            let aik = alpha * ap[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bp[kk * n..kk * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn plain_product_matches_naive() {
        let (m, n, k) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        dgemm(Trans::No, Trans::No, m, n, k, 1.0, &a, k, &b, n, 0.0, &mut c, n);
        assert_close(&c, &naive(m, n, k, &a, &b));
    }

    #[test]
    fn transposed_operands_match_naive() {
        let (m, n, k) = (4, 6, 3);
        // A stored as k x m, B stored as n x k.
        let a_t: Vec<f64> = (0..k * m).map(|i| i as f64 + 0.5).collect();
        let b_t: Vec<f64> = (0..n * k).map(|i| (i as f64).sqrt()).collect();
        let mut a = vec![0.0; m * k];
        for r in 0..m {
            for ccol in 0..k {
                a[r * k + ccol] = a_t[ccol * m + r];
            }
        }
        let mut b = vec![0.0; k * n];
        for r in 0..k {
            for ccol in 0..n {
                b[r * n + ccol] = b_t[ccol * k + r];
            }
        }
        let mut c = vec![0.0; m * n];
        dgemm(Trans::Yes, Trans::Yes, m, n, k, 1.0, &a_t, m, &b_t, k, 0.0, &mut c, n);
        assert_close(&c, &naive(m, n, k, &a, &b));
    }

    #[test]
    fn beta_accumulates_and_strides_slice() {
        // Multiply into the middle columns of a wider C buffer.
        let (m, n, k) = (3, 2, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let ldc = 5;
        let mut c = vec![1.0; m * ldc];
        dgemm(Trans::No, Trans::No, m, n, k, 2.0, &a, k, &b, n, 1.0, &mut c[1..], ldc);
        let plain = naive(m, n, k, &a, &b);
        for i in 0..m {
            for j in 0..n {
                let got = c[1 + i * ldc + j];
                let want = 1.0 + 2.0 * plain[i * n + j];
                assert!((got - want).abs() < 1e-12);
            }
            assert_eq!(c[i * ldc], 1.0);
        }
    }

    #[test]
    fn blas_and_native_agree() {
        let (m, n, k) = (13, 11, 17);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 1.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut c_kernel = vec![0.0; m * n];
        let mut c_native = vec![0.0; m * n];
        dgemm(Trans::No, Trans::No, m, n, k, 1.0, &a, k, &b, n, 0.0, &mut c_kernel, n);
        dgemm_native(Trans::No, Trans::No, m, n, k, 1.0, &a, k, &b, n, 0.0, &mut c_native, n);
        assert_close(&c_kernel, &c_native);
    }
}
