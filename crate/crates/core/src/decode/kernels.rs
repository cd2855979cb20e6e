//! Dense kernels for batch-1 inference: `y = x W^T + b` with `W` stored
//! row-major as `[out, in]`. Both the float and the int8 path use 256-bit
//! SIMD when the CPU supports it, so throughput comparisons are like for
//! like.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;
use std::sync::OnceLock;

fn has_avx2_fma() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime; lengths are equal.
        return unsafe { dot_f32_avx2(a, b) };
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_f32_avx2(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len();
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut acc = [_mm256_setzero_ps(); 4];
    let mut i = 0;
    while i + 32 <= n {
        for (k, s) in acc.iter_mut().enumerate() {
            let off = i + 8 * k;
            *s = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(off)), _mm256_loadu_ps(pb.add(off)), *s);
        }
        i += 32;
    }
    while i + 8 <= n {
        acc[0] = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), acc[0]);
        i += 8;
    }
    let s = _mm256_add_ps(_mm256_add_ps(acc[0], acc[1]), _mm256_add_ps(acc[2], acc[3]));
    let mut lanes = [0f32; 8];
    _mm256_storeu_ps(lanes.as_mut_ptr(), s);
    let mut total: f32 = lanes.iter().sum();
    while i < n {
        total += a[i] * b[i];
        i += 1;
    }
    total
}

pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    assert_eq!(a.len(), b.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime; lengths are equal.
        return unsafe { dot_i8_avx2(a, b) };
    }
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

/// `maddubs` multiplies unsigned by signed bytes, so the sign of `a` is
/// moved onto `b`. Inputs lie in [-127, 127], hence pair sums fit in i16.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_i8_avx2(a: &[i8], b: &[i8]) -> i32 {
    let n = a.len();
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let ones = _mm256_set1_epi16(1);
    let mut acc = [_mm256_setzero_si256(); 2];
    let mut i = 0;
    while i + 32 <= n {
        let va = _mm256_loadu_si256(pa.add(i) as *const __m256i);
        let vb = _mm256_loadu_si256(pb.add(i) as *const __m256i);
        let prod = _mm256_maddubs_epi16(_mm256_sign_epi8(va, va), _mm256_sign_epi8(vb, va));
        let k = (i / 32) & 1;
        acc[k] = _mm256_add_epi32(acc[k], _mm256_madd_epi16(prod, ones));
        i += 32;
    }
    let s = _mm256_add_epi32(acc[0], acc[1]);
    let mut lanes = [0i32; 8];
    _mm256_storeu_si256(lanes.as_mut_ptr() as *mut __m256i, s);
    let mut total: i32 = lanes.iter().sum();
    while i < n {
        total += a[i] as i32 * b[i] as i32;
        i += 1;
    }
    total
}

/// Symmetric quantization of one row: `scale = max|x| / 127`, values
/// rounded half to even. An all-zero row gets scale 1.
pub fn quantize_row(row: &[f32], out: &mut [i8]) -> f32 {
    let max = row.iter().fold(0f32, |m, &x| m.max(x.abs()));
    if max == 0.0 {
        out.fill(0);
        return 1.0;
    }
    let inv = 127.0 / max as f64;
    for (q, &x) in out.iter_mut().zip(row) {
        *q = (x as f64 * inv).round_ties_even().clamp(-127.0, 127.0) as i8;
    }
    (max as f64 / 127.0) as f32
}

/// Hot-path variant of [`quantize_row`] for activations: f32 arithmetic
/// and round-half-to-even by adding and subtracting 1.5·2^23, which the
/// compiler vectorizes (unlike `round_ties_even`, a libm call on baseline
/// x86-64).
pub fn quantize_activations(row: &[f32], out: &mut [i8]) -> f32 {
    const MAGIC: f32 = 12_582_912.0;
    let max = row.iter().fold(0f32, |m, &x| m.max(x.abs()));
    if max == 0.0 {
        out.fill(0);
        return 1.0;
    }
    let inv = 127.0 / max;
    for (q, &x) in out.iter_mut().zip(row) {
        // |x·inv| <= 127 up to rounding; the clamp keeps the cast exact.
        *q = (((x * inv) + MAGIC) - MAGIC).clamp(-127.0, 127.0) as i8;
    }
    max / 127.0
}

/// Output rows handled per kernel call; the input row is loaded once for
/// all of them.
const BLOCK: usize = 4;

fn dot4_f32(x: &[f32], w: &[f32], inp: usize) -> [f32; BLOCK] {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime; `w` holds BLOCK rows of `inp`.
        return unsafe { dot4_f32_avx2(x, w, inp) };
    }
    std::array::from_fn(|k| dot_f32(x, &w[k * inp..(k + 1) * inp]))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot4_f32_avx2(x: &[f32], w: &[f32], inp: usize) -> [f32; BLOCK] {
    assert!(x.len() == inp && w.len() == BLOCK * inp);
    let (px, pw) = (x.as_ptr(), w.as_ptr());
    let mut acc = [_mm256_setzero_ps(); BLOCK];
    let mut i = 0;
    while i + 8 <= inp {
        let vx = _mm256_loadu_ps(px.add(i));
        for (k, a) in acc.iter_mut().enumerate() {
            *a = _mm256_fmadd_ps(vx, _mm256_loadu_ps(pw.add(k * inp + i)), *a);
        }
        i += 8;
    }
    // Lane k of the result holds the sum of acc[k].
    let h = _mm256_hadd_ps(_mm256_hadd_ps(acc[0], acc[1]), _mm256_hadd_ps(acc[2], acc[3]));
    let s = _mm_add_ps(_mm256_castps256_ps128(h), _mm256_extractf128_ps(h, 1));
    let mut out = [0f32; BLOCK];
    _mm_storeu_ps(out.as_mut_ptr(), s);
    for (k, o) in out.iter_mut().enumerate() {
        for j in i..inp {
            *o += x[j] * w[k * inp + j];
        }
    }
    out
}

fn dot4_i8(x: &[i8], w: &[i8], inp: usize) -> [i32; BLOCK] {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime; `w` holds BLOCK rows of `inp`.
        return unsafe { dot4_i8_avx2(x, w, inp) };
    }
    std::array::from_fn(|k| dot_i8(x, &w[k * inp..(k + 1) * inp]))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot4_i8_avx2(x: &[i8], w: &[i8], inp: usize) -> [i32; BLOCK] {
    assert!(x.len() == inp && w.len() == BLOCK * inp);
    let (px, pw) = (x.as_ptr(), w.as_ptr());
    let ones = _mm256_set1_epi16(1);
    let mut acc = [_mm256_setzero_si256(); BLOCK];
    let mut i = 0;
    while i + 32 <= inp {
        let vx = _mm256_loadu_si256(px.add(i) as *const __m256i);
        let ax = _mm256_sign_epi8(vx, vx);
        for (k, a) in acc.iter_mut().enumerate() {
            let vw = _mm256_loadu_si256(pw.add(k * inp + i) as *const __m256i);
            let prod = _mm256_maddubs_epi16(ax, _mm256_sign_epi8(vw, vx));
            *a = _mm256_add_epi32(*a, _mm256_madd_epi16(prod, ones));
        }
        i += 32;
    }
    let h = _mm256_hadd_epi32(_mm256_hadd_epi32(acc[0], acc[1]), _mm256_hadd_epi32(acc[2], acc[3]));
    let s = _mm_add_epi32(_mm256_castsi256_si128(h), _mm256_extracti128_si256(h, 1));
    let mut out = [0i32; BLOCK];
    _mm_storeu_si128(out.as_mut_ptr() as *mut __m128i, s);
    for (k, o) in out.iter_mut().enumerate() {
        for j in i..inp {
            *o += x[j] as i32 * w[k * inp + j] as i32;
        }
    }
    out
}

/// `y[r, o] = x[r] . w[o] + b[o]` for float weights.
pub fn linear_f32(x: &[f32], rows: usize, w: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let inp = w.len() / out;
    let mut y = vec![0f32; rows * out];
    let blocked = out / BLOCK * BLOCK;
    for o in (0..blocked).step_by(BLOCK) {
        let wb = &w[o * inp..(o + BLOCK) * inp];
        for r in 0..rows {
            let d = dot4_f32(&x[r * inp..(r + 1) * inp], wb, inp);
            for k in 0..BLOCK {
                y[r * out + o + k] = d[k] + b[o + k];
            }
        }
    }
    for o in blocked..out {
        let wr = &w[o * inp..(o + 1) * inp];
        for r in 0..rows {
            y[r * out + o] = dot_f32(&x[r * inp..(r + 1) * inp], wr) + b[o];
        }
    }
    y
}

/// Int8 weights with per-row scales; activations are quantized per row on
/// the fly and accumulated in i32.
pub fn linear_i8(x: &[f32], rows: usize, q: &[i8], scales: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let inp = q.len() / out;
    let mut xq = vec![0i8; rows * inp];
    let xs: Vec<f32> = (0..rows)
        .map(|r| quantize_activations(&x[r * inp..(r + 1) * inp], &mut xq[r * inp..(r + 1) * inp]))
        .collect();
    let mut y = vec![0f32; rows * out];
    let blocked = out / BLOCK * BLOCK;
    for o in (0..blocked).step_by(BLOCK) {
        let wb = &q[o * inp..(o + BLOCK) * inp];
        for r in 0..rows {
            let d = dot4_i8(&xq[r * inp..(r + 1) * inp], wb, inp);
            for k in 0..BLOCK {
                y[r * out + o + k] = d[k] as f32 * xs[r] * scales[o + k] + b[o + k];
            }
        }
    }
    for o in blocked..out {
        let wr = &q[o * inp..(o + 1) * inp];
        for r in 0..rows {
            y[r * out + o] = dot_i8(&xq[r * inp..(r + 1) * inp], wr) as f32 * xs[r] * scales[o] + b[o];
        }
    }
    y
}
