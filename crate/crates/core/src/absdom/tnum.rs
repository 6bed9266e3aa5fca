// Copyright 2026 The ubpf-forge Authors
// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use std::fmt;

/// All-ones mask for the low `w` bits.
pub fn wmask(w: u32) -> u64 {
    if w >= 64 {
        u64::MAX
    } else {
        (1u64 << w) - 1
    }
}

/// Sign-extends the low `w` bits of `x`.
pub fn sext(x: u64, w: u32) -> i64 {
    if w >= 64 {
        x as i64
    } else {
        let sh = 64 - w;
        ((x << sh) as i64) >> sh
    }
}

/// Tristate number: bits set in `mask` are unknown, the remaining bits equal
/// the corresponding bits of `value`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tnum {
    pub value: u64,
    pub mask: u64,
}

#[allow(clippy::should_implement_trait)]
impl Tnum {
    pub const UNKNOWN: Tnum = Tnum { value: 0, mask: u64::MAX };

    pub const fn new(value: u64, mask: u64) -> Tnum {
        Tnum { value: value & !mask, mask }
    }

    pub const fn constant(v: u64) -> Tnum {
        Tnum { value: v, mask: 0 }
    }

    pub fn unknown(w: u32) -> Tnum {
        Tnum { value: 0, mask: wmask(w) }
    }

    /// The low `w` bits, most significant first, `x` marking unknown bits.
    pub fn pattern(&self, w: u32) -> String {
        (0..w)
            .rev()
            .map(|b| match (self.mask >> b & 1, self.value >> b & 1) {
                (1, _) => 'x',
                (_, 1) => '1',
                _ => '0',
            })
            .collect()
    }

    /// Smallest tnum containing every value in `[min, max]`.
    pub fn range(min: u64, max: u64) -> Tnum {
        let chi = min ^ max;
        let bits = 64 - chi.leading_zeros();
        if bits > 63 {
            return Tnum::UNKNOWN;
        }
        let delta = (1u64 << bits) - 1;
        Tnum::new(min & !delta, delta)
    }

    pub fn is_const(&self) -> bool {
        self.mask == 0
    }

    pub fn contains(&self, x: u64) -> bool {
        x & !self.mask == self.value
    }

    /// True when every concrete value of `other` is also in `self`.
    pub fn includes(&self, other: &Tnum) -> bool {
        other.mask & !self.mask == 0 && other.value & !self.mask == self.value
    }

    pub fn min(&self) -> u64 {
        self.value
    }

    pub fn max(&self) -> u64 {
        self.value | self.mask
    }

    pub fn cast(&self, w: u32) -> Tnum {
        let m = wmask(w);
        Tnum { value: self.value & m, mask: self.mask & m }
    }

    pub fn add(a: Tnum, b: Tnum) -> Tnum {
        let sm = a.mask.wrapping_add(b.mask);
        let sv = a.value.wrapping_add(b.value);
        let sigma = sm.wrapping_add(sv);
        let chi = sigma ^ sv;
        let mu = chi | a.mask | b.mask;
        Tnum::new(sv, mu)
    }

    pub fn sub(a: Tnum, b: Tnum) -> Tnum {
        let dv = a.value.wrapping_sub(b.value);
        let alpha = dv.wrapping_add(a.mask);
        let beta = dv.wrapping_sub(b.mask);
        let chi = alpha ^ beta;
        let mu = chi | a.mask | b.mask;
        Tnum::new(dv, mu)
    }

    pub fn and(a: Tnum, b: Tnum) -> Tnum {
        let alpha = a.value | a.mask;
        let beta = b.value | b.mask;
        let v = a.value & b.value;
        Tnum { value: v, mask: alpha & beta & !v }
    }

    pub fn or(a: Tnum, b: Tnum) -> Tnum {
        let v = a.value | b.value;
        let mu = a.mask | b.mask;
        Tnum { value: v, mask: mu & !v }
    }

    pub fn xor(a: Tnum, b: Tnum) -> Tnum {
        let mu = a.mask | b.mask;
        Tnum::new(a.value ^ b.value, mu)
    }

    /// Long multiplication over tnums. Operands with more than 32 unknown
    /// bits give up immediately.
    pub fn mul(a: Tnum, b: Tnum) -> Tnum {
        if a.mask.count_ones() > 32 || b.mask.count_ones() > 32 {
            return Tnum::UNKNOWN;
        }
        let acc_v = a.value.wrapping_mul(b.value);
        let mut acc_m = Tnum::constant(0);
        let (mut a, mut b) = (a, b);
        while a.value != 0 || a.mask != 0 {
            if a.value & 1 != 0 {
                acc_m = Tnum::add(acc_m, Tnum::new(0, b.mask));
            } else if a.mask & 1 != 0 {
                acc_m = Tnum::add(acc_m, Tnum::new(0, b.value | b.mask));
            }
            a = a.rshift(1);
            b = b.lshift(1);
        }
        Tnum::add(Tnum::constant(acc_v), acc_m)
    }

    pub fn lshift(&self, k: u32) -> Tnum {
        Tnum { value: self.value << k, mask: self.mask << k }
    }

    pub fn rshift(&self, k: u32) -> Tnum {
        Tnum { value: self.value >> k, mask: self.mask >> k }
    }

    /// Arithmetic right shift treating bit `w-1` as the sign.
    pub fn arshift(&self, k: u32, w: u32) -> Tnum {
        let m = wmask(w);
        Tnum {
            value: ((sext(self.value, w) >> k) as u64) & m,
            mask: ((sext(self.mask, w) >> k) as u64) & m,
        }
    }

    /// `None` when the two tnums disagree on a known bit.
    pub fn intersect(a: Tnum, b: Tnum) -> Option<Tnum> {
        if (a.value ^ b.value) & !(a.mask | b.mask) != 0 {
            return None;
        }
        let v = a.value | b.value;
        let mu = a.mask & b.mask;
        Some(Tnum::new(v, mu))
    }

    /// Least tnum containing both operands.
    pub fn union(a: Tnum, b: Tnum) -> Tnum {
        let mu = (a.value ^ b.value) | a.mask | b.mask;
        Tnum::new(a.value & b.value, mu)
    }

    /// Reverses the byte order of the low `bits` bits and clears the rest.
    pub fn bswap(&self, bits: u32) -> Tnum {
        let sw = |x: u64| match bits {
            16 => (x as u16).swap_bytes() as u64,
            32 => (x as u32).swap_bytes() as u64,
            _ => x.swap_bytes(),
        };
        Tnum { value: sw(self.value), mask: sw(self.mask) }
    }

    /// Smallest member `>= x` within the low `w` bits.
    pub fn next_ge(&self, x: u64, w: u32) -> Option<u64> {
        let m = wmask(w);
        let mask = self.mask & m;
        let y = self.value | (x & mask);
        if y == x {
            return Some(x);
        }
        let p = 63 - (y ^ x).leading_zeros();
        let low = if p == 0 { 0 } else { (1u64 << p) - 1 };
        if y >> p & 1 == 1 {
            // y already exceeds x at bit p: minimise the unknown bits below.
            return Some((y & !low) | (self.value & low));
        }
        // Need to carry into an unknown bit above p that is currently 0.
        let cand = mask & !y & !((1u64 << p) | low);
        if cand == 0 {
            return None;
        }
        let q = cand.trailing_zeros();
        let below_q = (1u64 << q) - 1;
        Some((y & !below_q) | (1u64 << q) | (self.value & below_q))
    }

    /// Largest member `<= x` within the low `w` bits.
    pub fn prev_le(&self, x: u64, w: u32) -> Option<u64> {
        let m = wmask(w);
        let mask = self.mask & m;
        let y = self.value | (x & mask);
        if y == x {
            return Some(x);
        }
        let p = 63 - (y ^ x).leading_zeros();
        let low = if p == 0 { 0 } else { (1u64 << p) - 1 };
        if y >> p & 1 == 0 {
            return Some((y & !low) | ((self.value | mask) & low));
        }
        let cand = mask & y & !((1u64 << p) | low);
        if cand == 0 {
            return None;
        }
        let q = cand.trailing_zeros();
        let below_q = (1u64 << q) - 1;
        Some((y & !below_q & !(1u64 << q)) | ((self.value | mask) & below_q))
    }
}

impl fmt::Display for Tnum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:#x}; {:#x})", self.value, self.mask)
    }
}
