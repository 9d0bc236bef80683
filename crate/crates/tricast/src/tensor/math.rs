//! Vectorizable transcendental kernels.
//!
//! Outside of matrix products, training time is dominated by `exp`, `tanh`,
//! and `sigmoid` over large gate and score buffers, and the libm versions
//! cost 15-25 ns per call. The versions here use Cody-Waite range reduction
//! with Taylor kernels: straight-line slice loops the compiler can keep in
//! SIMD registers, accurate to a few ulp over the domain the tape actually
//! uses. Unit tests enforce the accuracy bound against libm on dense grids.
//!
//! Domain contract: inputs are saturated at ±700 before exponentiation
//! (`exp(700)` ≈ 1.0e304, far beyond anything a non-diverged training run
//! produces), so overflow to infinity is replaced by a huge finite value
//! and underflow to subnormals by a tiny one. NaN propagates. Divergence
//! detection in the trainer keys off the loss, which still explodes.

const LOG2_E: f64 = std::f64::consts::LOG2_E;
// ln(2) split with zeroed low mantissa bits so `k * LN2_HI` is exact for
// |k| <= 1024 (the fdlibm split).
const LN2_HI: f64 = f64::from_bits(0x3FE62E42FEE00000);
const LN2_LO: f64 = f64::from_bits(0x3DEA39EF35793C76);

/// Largest argument magnitude passed to the exponential kernel.
const EXP_SAT: f64 = 700.0;

/// `exp(r)` Taylor coefficients `1/n!` for `n = 13..=2`; the trailing
/// `1 + r` is applied explicitly.
const EXP_COEFFS: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
];

/// `expm1(u)/u` Taylor coefficients `1/n!` for `n = 18..=2`; the leading
/// `1` is applied explicitly. Covers `|u| <= 1` to sub-ulp truncation.
const EXPM1_COEFFS: [f64; 17] = [
    1.0 / 6_402_373_705_728_000.0,
    1.0 / 355_687_428_096_000.0,
    1.0 / 20_922_789_888_000.0,
    1.0 / 1_307_674_368_000.0,
    1.0 / 87_178_291_200.0,
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
];

/// Core kernel: requires `|x| <= EXP_SAT` or NaN.
#[inline(always)]
fn exp_core(x: f64) -> f64 {
    let kf = (x * LOG2_E).round();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let mut p = EXP_COEFFS[0];
    for &c in &EXP_COEFFS[1..] {
        p = p * r + c;
    }
    p = (p * r + 1.0) * r + 1.0;
    // |kf| <= 1011 here, so the biased exponent stays in normal range.
    // A NaN input reaches this cast as NaN and saturates to 0: scale 2^0,
    // and the NaN already poisoned `p`.
    let k = kf as i64;
    p * f64::from_bits(((1023 + k) as u64) << 52)
}

/// `expm1(u)` for `|u| <= 1`, cancellation-free near zero.
#[inline(always)]
fn expm1_small(u: f64) -> f64 {
    let mut p = EXPM1_COEFFS[0];
    for &c in &EXPM1_COEFFS[1..] {
        p = p * u + c;
    }
    (p * u + 1.0) * u
}

/// Saturating exponential: exact contract `exp(clamp(x, -700, 700))`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    exp_core(x.clamp(-EXP_SAT, EXP_SAT))
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x >= 0.0 {
        1.0 / (1.0 + exp_core(-x.min(EXP_SAT)))
    } else {
        let e = exp_core(x.max(-EXP_SAT));
        e / (1.0 + e)
    }
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 {
        // tanh(x) = expm1(2x) / (expm1(2x) + 2); no cancellation.
        let t = expm1_small(2.0 * x);
        t / (t + 2.0)
    } else if a < 19.0 {
        let e = exp_core(2.0 * a);
        let t = 1.0 - 2.0 / (e + 1.0);
        if x > 0.0 { t } else { -t }
    } else if x.is_nan() {
        x
    } else {
        // tanh(19) is within one ulp of 1.
        1.0f64.copysign(x)
    }
}

pub fn exp_slice(xs: &mut [f64]) {
    for v in xs {
        *v = exp(*v);
    }
}

pub fn sigmoid_slice(xs: &mut [f64]) {
    for v in xs {
        *v = sigmoid(*v);
    }
}

pub fn tanh_slice(xs: &mut [f64]) {
    for v in xs {
        *v = tanh(*v);
    }
}
