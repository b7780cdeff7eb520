//! Seeded generators shared by the synthetic-weight builder and the
//! test-time noise sampler.
//!
//! The algorithm is fixed so that any implementation can reproduce the
//! same fixtures:
//!
//! * seeding: the state is `splitmix64(seed)`, replaced by
//!   `0x9E3779B97F4A7C15` if that happens to be zero;
//! * stepping: xorshift64* with shifts (12, 25, 27) and multiplier
//!   `0x2545F4914F6CDD1D`;
//! * `next_f64` takes the top 53 bits as a fraction in `[0, 1)`;
//! * `uniform_pm1` maps the top 24 bits to `[-1, 1)`;
//! * Gaussian draws use Box-Muller, emitting the cosine branch first and
//!   caching the sine branch.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable 64-bit FNV-1a, used to give each named tensor its own stream.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug)]
pub struct XorShift64Star {
    state: u64,
    spare: Option<f64>,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let s = splitmix64(seed);
        XorShift64Star {
            state: if s == 0 { GOLDEN } else { s },
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_pm1(&mut self) -> f32 {
        ((self.next_u64() >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}
