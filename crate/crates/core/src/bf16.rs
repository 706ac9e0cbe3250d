//! BF16 storage format and the fixed-order arithmetic kernels shared by the
//! near-bank PUs and the PNM units.
//!
//! Every architectural 16-bit lane holds a raw BF16 bit pattern. Arithmetic is
//! carried out in `f32` and rounded back with round-to-nearest-even.

/// Sixteen BF16 lanes, the payload of one 256-bit column, slot or GB entry.
pub type Lanes = [u16; 16];

pub const LANES: usize = 16;
pub const ZERO_LANES: Lanes = [0; 16];

const CANONICAL_NAN: u16 = 0x7fc0;

/// Round an `f32` to BF16 (round-to-nearest-even).
pub fn from_f32(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return CANONICAL_NAN | ((bits >> 16) as u16 & 0x8000);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb);
    (rounded >> 16) as u16
}

pub fn to_f32(b: u16) -> f32 {
    f32::from_bits((b as u32) << 16)
}

/// Round an `f64` to BF16 without double rounding.
///
/// The value is first narrowed to `f32` with round-to-odd, which keeps enough
/// sticky information for the final nearest-even step to be exact.
pub fn from_f64(x: f64) -> u16 {
    if x.is_nan() {
        return CANONICAL_NAN;
    }
    let f = x as f32;
    if !f.is_finite() || (f as f64) == x {
        return from_f32(f);
    }
    let bits = f.to_bits();
    if bits & 1 == 1 {
        return from_f32(f);
    }
    // Step one ulp towards x so the low bit becomes odd; x lies strictly
    // between f and that neighbour, so the result is the round-to-odd value.
    let odd = if f == 0.0 {
        if x > 0.0 {
            1
        } else {
            0x8000_0001
        }
    } else {
        let magnitude_up = (f as f64).abs() < x.abs();
        if magnitude_up {
            bits + 1
        } else {
            bits - 1
        }
    };
    from_f32(f32::from_bits(odd))
}

/// Value after a round trip through BF16.
pub fn round(x: f32) -> f32 {
    to_f32(from_f32(x))
}

pub fn lanes_from_f32(v: &[f32]) -> Lanes {
    let mut out = ZERO_LANES;
    for (o, x) in out.iter_mut().zip(v) {
        *o = from_f32(*x);
    }
    out
}

pub fn lanes_to_f32(l: &Lanes) -> [f32; 16] {
    let mut out = [0.0; 16];
    for (o, b) in out.iter_mut().zip(l) {
        *o = to_f32(*b);
    }
    out
}

/// Pairwise reduction tree over 16 values: (0+1),(2+3),... then pairs of
/// those, down to one value. Each addition rounds to `f32`.
pub fn tree_sum16(v: [f32; 16]) -> f32 {
    let mut level = v;
    let mut n = 16;
    while n > 1 {
        for i in 0..n / 2 {
            level[i] = level[2 * i] + level[2 * i + 1];
        }
        n /= 2;
    }
    level[0]
}

/// 16-wide dot product as computed by one near-bank PU reduction tree.
/// BF16 x BF16 products are exact in `f32`.
pub fn dot16(a: &Lanes, b: &Lanes) -> f32 {
    let mut p = [0.0f32; 16];
    for i in 0..16 {
        p[i] = to_f32(a[i]) * to_f32(b[i]);
    }
    tree_sum16(p)
}

/// Lower clamp of the exponent unit input range.
pub const EXP_MIN_INPUT: f32 = -16.0;
/// Number of Taylor terms after the constant term.
pub const EXP_TAYLOR_ORDER: usize = 10;

/// Exponent unit: range reduction by powers of two, then a 10th-order Taylor
/// polynomial on the reduced argument. Inputs are clamped to `[-16, 0]`.
pub fn taylor_exp(x: f32) -> f32 {
    if x.is_nan() {
        return f32::NAN;
    }
    let x = x.clamp(EXP_MIN_INPUT, 0.0);
    let ln2 = std::f32::consts::LN_2;
    let n = (x / ln2).round();
    let r = x - n * ln2;
    let mut p = 1.0f32;
    for k in (1..=EXP_TAYLOR_ORDER).rev() {
        p = 1.0 + p * r / k as f32;
    }
    p * 2f32.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rne_ties_go_to_even() {
        // 1 + 2^-8 is exactly halfway between 1 and 1 + 2^-7
        assert_eq!(from_f32(1.0 + 2f32.powi(-8)), 0x3f80);
        // 1 + 3*2^-8 rounds up to the even neighbour 1 + 2^-6
        assert_eq!(from_f32(1.0 + 3.0 * 2f32.powi(-8)), 0x3f82);
    }

    #[test]
    fn f64_path_matches_exact_rounding() {
        // A value just above a BF16 tie in f64 but which rounds onto the tie in f32.
        let x = 1.0f64 + 2f64.powi(-8) + 2f64.powi(-40);
        assert_eq!(from_f64(x), 0x3f81);
        assert_eq!(from_f32(x as f32), 0x3f80);
        assert_eq!(from_f64(-2.5), from_f32(-2.5));
    }

    #[test]
    fn exp_of_zero_is_one() {
        assert_eq!(taylor_exp(0.0), 1.0);
    }

    #[test]
    fn exp_is_accurate_over_clamped_range() {
        for i in 0..=1600 {
            let x = -(i as f32) / 100.0;
            let rel = (taylor_exp(x) as f64 - (x as f64).exp()).abs() / (x as f64).exp();
            assert!(rel < 1e-5, "x={x} rel={rel}");
        }
    }

    #[test]
    fn tree_sum_order() {
        let mut v = [0.0f32; 16];
        v[0] = 1.0e8;
        v[1] = 1.0;
        v[2] = -1.0e8;
        // (1e8 + 1) rounds to 1e8 in f32, so the tree result is 0.
        assert_eq!(tree_sum16(v), 0.0);
    }
}
