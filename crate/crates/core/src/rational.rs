//! Exact rational scalar used for every distance and arc parameter.
//!
//! All arithmetic in this crate is closed under field operations, so a
//! wrapper around an arbitrary-precision rational is the whole numeric
//! tower. Values serialize as `"p/q"` strings (or `"p"` for integers) so
//! no binary float ever appears in a file.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Arbitrary-precision rational number.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rat(BigRational);

impl Rat {
    pub fn zero() -> Self {
        Rat(BigRational::zero())
    }

    pub fn one() -> Self {
        Rat(BigRational::one())
    }

    pub fn from_int(n: i64) -> Self {
        Rat(BigRational::from_integer(BigInt::from(n)))
    }

    /// `p/q`; panics on `q == 0`.
    pub fn new(p: i64, q: i64) -> Self {
        assert!(q != 0, "zero denominator");
        Rat(BigRational::new(BigInt::from(p), BigInt::from(q)))
    }

    /// Exact `2^k` for any integer `k` (negative allowed).
    pub fn pow2(k: i32) -> Self {
        let two = BigRational::from_integer(BigInt::from(2));
        if k >= 0 {
            Rat(num::pow::pow(two, k as usize))
        } else {
            Rat(num::pow::pow(two, (-k) as usize).recip())
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative()
    }

    pub fn abs(&self) -> Self {
        Rat(self.0.abs())
    }

    pub fn recip(&self) -> Self {
        assert!(!self.is_zero(), "reciprocal of zero");
        Rat(self.0.recip())
    }

    pub fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    /// Parses `"p/q"` or `"p"` with optional sign.
    pub fn parse(s: &str) -> Result<Self, RatParseError> {
        let s = s.trim();
        let (num_str, den_str) = match s.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s, "1"),
        };
        let p = BigInt::from_str(num_str).map_err(|_| RatParseError(s.to_string()))?;
        let q = BigInt::from_str(den_str).map_err(|_| RatParseError(s.to_string()))?;
        if q.is_zero() {
            return Err(RatParseError(s.to_string()));
        }
        Ok(Rat(BigRational::new(p, q)))
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("cannot parse rational from {0:?}")]
pub struct RatParseError(pub String);

impl fmt::Display for Rat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.denom().is_one() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Rat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Rat {
    type Err = RatParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Rat::parse(s)
    }
}

impl Serialize for Rat {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rat {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        Rat::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl From<i64> for Rat {
    fn from(n: i64) -> Self {
        Rat::from_int(n)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident) => {
        impl $trait for Rat {
            type Output = Rat;
            fn $method(self, rhs: Rat) -> Rat {
                Rat($trait::$method(self.0, rhs.0))
            }
        }
        impl<'a> $trait<&'a Rat> for &'a Rat {
            type Output = Rat;
            fn $method(self, rhs: &'a Rat) -> Rat {
                Rat($trait::$method(&self.0, &rhs.0))
            }
        }
        impl<'a> $trait<&'a Rat> for Rat {
            type Output = Rat;
            fn $method(self, rhs: &'a Rat) -> Rat {
                Rat($trait::$method(self.0, &rhs.0))
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl Neg for Rat {
    type Output = Rat;
    fn neg(self) -> Rat {
        Rat(-self.0)
    }
}

impl AddAssign for Rat {
    fn add_assign(&mut self, rhs: Rat) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Rat {
    fn sub_assign(&mut self, rhs: Rat) {
        self.0 -= rhs.0;
    }
}

impl Sum for Rat {
    fn sum<I: Iterator<Item = Rat>>(iter: I) -> Rat {
        iter.fold(Rat::zero(), |a, b| a + b)
    }
}

impl PartialEq<i64> for Rat {
    fn eq(&self, other: &i64) -> bool {
        self == &Rat::from_int(*other)
    }
}

impl PartialOrd<i64> for Rat {
    fn partial_cmp(&self, other: &i64) -> Option<Ordering> {
        self.partial_cmp(&Rat::from_int(*other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["0", "1", "-3", "2/3", "-7/5", "10/4"] {
            let r = Rat::parse(s).unwrap();
            let r2 = Rat::parse(&r.to_string()).unwrap();
            assert_eq!(r, r2);
        }
        assert_eq!(Rat::parse("10/4").unwrap(), Rat::new(5, 2));
        assert!(Rat::parse("3/0").is_err());
        assert!(Rat::parse("x").is_err());
    }

    #[test]
    fn pow2_negative_exponents() {
        assert_eq!(Rat::pow2(3), Rat::from_int(8));
        assert_eq!(Rat::pow2(-3), Rat::new(1, 8));
        assert_eq!(Rat::pow2(0), Rat::one());
    }

    #[test]
    fn exact_field_ops() {
        let a = Rat::new(1, 3);
        let b = Rat::new(1, 6);
        assert_eq!(a.clone() + b.clone(), Rat::new(1, 2));
        assert_eq!(a.clone() - b.clone(), Rat::new(1, 6));
        assert_eq!(a.clone() * b.clone(), Rat::new(1, 18));
        assert_eq!(a / b, Rat::from_int(2));
    }
}
