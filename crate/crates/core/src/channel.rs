//! Downlink channel: path loss, log-normal shadowing, multipath fading and mobility.
//!
//! The effective SNR coefficient of user `i` on subcarrier `k` is
//! `beta_ik = Gamma * |H_ik|^2 * G_i / N`, so that the received SNR is
//! `beta_ik * p_k`. `G_i` is the linear path gain (path loss plus shadowing),
//! `H_ik` the subcarrier frequency response of a 6-tap channel and `N` the
//! per-subcarrier noise power.

use std::f64::consts::{LN_2, TAU};
use std::sync::LazyLock;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

/// Number of multipath taps.
pub const NUM_TAPS: usize = 6;
/// Decay constant of the exponential power-delay profile, in taps.
const PDP_DECAY_TAPS: f64 = 1.5;
const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("domain error: {0}")]
    DomainError(String),
}

/// `38.4 + 20 log10(d)` dB for `d >= 1` m.
pub fn path_loss_db(d: f64) -> Result<f64, ChannelError> {
    if d >= 1.0 {
        Ok(38.4 + 20.0 * d.log10())
    } else {
        Err(ChannelError::DomainError(format!(
            "distance {d} m below 1 m"
        )))
    }
}

/// Path loss with distances below 1 m clamped to 1 m.
pub fn path_loss_db_clamped(d: f64) -> f64 {
    38.4 + 20.0 * d.max(1.0).log10()
}

/// SNR gap `-ln(5 BER) / 1.5`, defined for `0 < ber <= 0.2`.
pub fn gamma_from_ber(ber: f64) -> Result<f64, ChannelError> {
    if ber > 0.0 && ber <= 0.2 {
        Ok(-(5.0 * ber).ln() / 1.5)
    } else {
        Err(ChannelError::DomainError(format!(
            "BER {ber} outside (0, 0.2]"
        )))
    }
}

/// Achievable rate `ln(1 + beta p)` in nats per symbol.
#[inline]
pub fn rate_nats(beta: f64, p: f64) -> f64 {
    (beta * p).ln_1p()
}

/// Converts nats per symbol on a subcarrier of width `delta_f` Hz to bit/s.
#[inline]
pub fn rate_bps(r_nats: f64, delta_f: f64) -> f64 {
    delta_f * r_nats / LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modulation {
    Qpsk,
    Qam16,
    Qam32,
    Qam64,
}

impl Modulation {
    pub const ALL: [Modulation; 4] = [
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Qam32,
        Modulation::Qam64,
    ];

    pub fn bits(self) -> u32 {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
            Modulation::Qam32 => 5,
            Modulation::Qam64 => 6,
        }
    }
}

/// Coding rates as (numerator, denominator).
pub const CODING_RATES: [(u32, u32); 4] = [(1, 2), (2, 3), (3, 4), (7, 8)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mcs {
    pub modulation: Modulation,
    pub coding_rate: (u32, u32),
    /// Information bits per symbol.
    pub bits_per_symbol: f64,
}

fn mcs_table() -> impl Iterator<Item = Mcs> {
    Modulation::ALL.into_iter().flat_map(|m| {
        CODING_RATES.into_iter().map(move |(n, d)| Mcs {
            modulation: m,
            coding_rate: (n, d),
            bits_per_symbol: m.bits() as f64 * n as f64 / d as f64,
        })
    })
}

/// Largest table entry not exceeding `spectral_eff` bits/symbol; `None` below QPSK 1/2.
///
/// Equal products resolve to the lower-order modulation.
pub fn quantize_mcs(spectral_eff: f64) -> Option<Mcs> {
    let mut best: Option<Mcs> = None;
    for m in mcs_table() {
        if m.bits_per_symbol <= spectral_eff + 1e-12
            && best.is_none_or(|b| m.bits_per_symbol > b.bits_per_symbol)
        {
            best = Some(m);
        }
    }
    best
}

/// Served bits per symbol after MCS quantization (0 when nothing fits).
#[inline]
pub fn quantized_bits(spectral_eff: f64) -> f64 {
    let mut out = 0.0;
    for &l in &MCS_LEVELS {
        if l <= spectral_eff + 1e-12 {
            out = l;
        } else {
            break;
        }
    }
    out
}

/// Ascending served bits per symbol of the MCS table; same values as
/// [`mcs_table`], precomputed.
const MCS_LEVELS: [f64; 15] = [
    1.0,
    4.0 / 3.0,
    1.5,
    1.75,
    2.0,
    2.5,
    8.0 / 3.0,
    3.0,
    10.0 / 3.0,
    3.5,
    3.75,
    4.0,
    4.375,
    4.5,
    5.25,
];

static MCS_SNR: LazyLock<[f64; 15]> = LazyLock::new(|| MCS_LEVELS.map(|l| l.exp2() - 1.0));

/// `quantized_bits(log2(1 + snr))` without the logarithm; the two agree
/// except within rounding of a level boundary.
#[inline]
pub fn quantized_bits_for_snr(snr: f64) -> f64 {
    let thresholds = &*MCS_SNR;
    for (l, t) in MCS_LEVELS.iter().zip(thresholds).rev() {
        if snr >= *t {
            return *l;
        }
    }
    0.0
}

/// Static link parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub noise_dbm_per_subcarrier: f64,
    pub ber_target: f64,
    pub gamma: f64,
    pub bandwidth_hz: f64,
    pub n_subcarriers: usize,
    pub delta_f_hz: f64,
}

impl LinkBudget {
    pub fn new(
        tx_power_dbm: f64,
        noise_dbm_per_subcarrier: f64,
        ber_target: f64,
        bandwidth_hz: f64,
        n_subcarriers: usize,
    ) -> Result<Self, ChannelError> {
        if n_subcarriers == 0 || !(bandwidth_hz > 0.0) {
            return Err(ChannelError::DomainError(
                "need a positive bandwidth and at least one subcarrier".into(),
            ));
        }
        let gamma = gamma_from_ber(ber_target)?;
        Ok(Self {
            tx_power_dbm,
            noise_dbm_per_subcarrier,
            ber_target,
            gamma,
            bandwidth_hz,
            n_subcarriers,
            delta_f_hz: bandwidth_hz / n_subcarriers as f64,
        })
    }

    /// Total transmit power in watts.
    pub fn tx_power_w(&self) -> f64 {
        dbm_to_w(self.tx_power_dbm)
    }

    pub fn noise_w(&self) -> f64 {
        dbm_to_w(self.noise_dbm_per_subcarrier)
    }
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Dynamic channel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub cell_radius_m: f64,
    pub shadow_sigma_db: f64,
    pub shadow_decorr_m: f64,
    pub speed_mean_mps: f64,
    pub speed_std_mps: f64,
    pub carrier_hz: f64,
    /// Divide by the SNR gap instead of multiplying.
    pub gamma_divides: bool,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            cell_radius_m: 1000.0,
            shadow_sigma_db: 8.0,
            shadow_decorr_m: 20.0,
            speed_mean_mps: 20.0,
            speed_std_mps: 2.24,
            carrier_hz: 2.0e9,
            gamma_divides: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserMobilityState {
    pub position: [f64; 2],
    pub speed: f64,
    pub heading: f64,
    pub shadowing_db: f64,
}

impl UserMobilityState {
    pub fn distance(&self) -> f64 {
        self.position[0].hypot(self.position[1])
    }
}

/// Per-subcarrier SNR coefficients for all users, row-major `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    n_users: usize,
    n_sub: usize,
    beta: Vec<f64>,
    taps: Vec<[Complex64; NUM_TAPS]>,
    pub frame_index: u64,
}

impl ChannelState {
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_sub
    }

    pub fn beta(&self, user: usize, sub: usize) -> f64 {
        self.beta[user * self.n_sub + sub]
    }

    pub fn beta_row(&self, user: usize) -> &[f64] {
        &self.beta[user * self.n_sub..(user + 1) * self.n_sub]
    }

    pub fn beta_matrix(&self) -> BetaMatrix<'_> {
        BetaMatrix {
            data: &self.beta,
            n_users: self.n_users,
            n_sub: self.n_sub,
        }
    }

    pub fn taps(&self, user: usize) -> &[Complex64; NUM_TAPS] {
        &self.taps[user]
    }
}

/// Borrowed `N x K` view of SNR coefficients.
#[derive(Debug, Clone, Copy)]
pub struct BetaMatrix<'a> {
    data: &'a [f64],
    n_users: usize,
    n_sub: usize,
}

impl<'a> BetaMatrix<'a> {
    /// Wraps row-major data; panics if the length does not match.
    pub fn new(data: &'a [f64], n_users: usize, n_sub: usize) -> Self {
        assert_eq!(data.len(), n_users * n_sub, "beta matrix shape mismatch");
        Self {
            data,
            n_users,
            n_sub,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_sub
    }

    #[inline]
    pub fn get(&self, user: usize, sub: usize) -> f64 {
        self.data[user * self.n_sub + sub]
    }
}

/// Precomputed channel generator for one cell.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub budget: LinkBudget,
    pub params: ChannelParams,
    pdp: [f64; NUM_TAPS],
    /// `e^{-j 2 pi k l / K}` laid out `[k][l]`.
    twiddles: Vec<Complex64>,
}

impl ChannelModel {
    pub fn new(budget: LinkBudget, params: ChannelParams) -> Self {
        let mut pdp = [0.0; NUM_TAPS];
        for (l, p) in pdp.iter_mut().enumerate() {
            *p = (-(l as f64) / PDP_DECAY_TAPS).exp();
        }
        let total: f64 = pdp.iter().sum();
        pdp.iter_mut().for_each(|p| *p /= total);
        let k_total = budget.n_subcarriers;
        let mut twiddles = Vec::with_capacity(k_total * NUM_TAPS);
        for k in 0..k_total {
            for l in 0..NUM_TAPS {
                let phase = -TAU * ((k * l) % k_total) as f64 / k_total as f64;
                twiddles.push(Complex64::from_polar(1.0, phase));
            }
        }
        Self {
            budget,
            params,
            pdp,
            twiddles,
        }
    }

    pub fn power_delay_profile(&self) -> &[f64; NUM_TAPS] {
        &self.pdp
    }

    /// Draws an initial position (uniform over the disc), speed, heading and shadowing.
    pub fn spawn_user<R: Rng + ?Sized>(&self, rng: &mut R) -> UserMobilityState {
        let r = self.params.cell_radius_m * rng.random::<f64>().sqrt();
        let angle = rng.random::<f64>() * TAU;
        let speed = if self.params.speed_std_mps > 0.0 {
            Normal::new(self.params.speed_mean_mps, self.params.speed_std_mps)
                .map(|n| n.sample(rng))
                .unwrap_or(self.params.speed_mean_mps)
        } else {
            self.params.speed_mean_mps
        }
        .max(0.0);
        let heading = rng.random::<f64>() * TAU;
        let z: f64 = StandardNormal.sample(rng);
        UserMobilityState {
            position: [r * angle.cos(), r * angle.sin()],
            speed,
            heading,
            shadowing_db: self.params.shadow_sigma_db * z,
        }
    }

    /// Builds the initial state; `rngs` holds one independent stream per user.
    pub fn init_state<R: Rng>(&self, users: &[UserMobilityState], rngs: &mut [R]) -> ChannelState {
        assert_eq!(users.len(), rngs.len(), "one rng stream per user");
        let n_sub = self.budget.n_subcarriers;
        let taps = rngs
            .iter_mut()
            .map(|rng| {
                let mut t = [Complex64::new(0.0, 0.0); NUM_TAPS];
                for (tap, p) in t.iter_mut().zip(self.pdp) {
                    *tap = complex_gaussian(rng, p);
                }
                t
            })
            .collect();
        let mut state = ChannelState {
            n_users: users.len(),
            n_sub,
            beta: vec![0.0; users.len() * n_sub],
            taps,
            frame_index: 0,
        };
        self.refresh_beta(&mut state, users);
        state
    }

    /// Fading correlation over `dt` for a user moving at `speed`.
    pub fn fading_correlation(&self, speed: f64, dt: f64) -> f64 {
        let doppler = speed * self.params.carrier_hz / SPEED_OF_LIGHT;
        if doppler <= 0.0 {
            return 1.0;
        }
        let coherence = 0.423 / doppler;
        (-dt / coherence).exp()
    }

    /// Shadowing correlation after moving `speed * dt` metres.
    pub fn shadowing_correlation(&self, speed: f64, dt: f64) -> f64 {
        if self.params.shadow_decorr_m <= 0.0 {
            return 0.0;
        }
        (-speed * dt / self.params.shadow_decorr_m).exp()
    }

    /// Advances mobility, shadowing and fading by `dt` seconds and recomputes beta.
    pub fn step<R: Rng>(
        &self,
        state: &mut ChannelState,
        users: &mut [UserMobilityState],
        dt: f64,
        rngs: &mut [R],
    ) {
        assert_eq!(users.len(), state.n_users, "user count changed");
        assert_eq!(users.len(), rngs.len(), "one rng stream per user");
        let sigma = self.params.shadow_sigma_db;
        for ((user, taps), rng) in users.iter_mut().zip(&mut state.taps).zip(rngs.iter_mut()) {
            self.move_user(user, dt);

            let rho_s = self.shadowing_correlation(user.speed, dt);
            if rho_s < 1.0 {
                let z: f64 = StandardNormal.sample(rng);
                user.shadowing_db =
                    rho_s * user.shadowing_db + (1.0 - rho_s * rho_s).sqrt() * sigma * z;
            }

            let rho = self.fading_correlation(user.speed, dt);
            if rho < 1.0 {
                let innov = (1.0 - rho * rho).sqrt();
                for (tap, &p) in taps.iter_mut().zip(&self.pdp) {
                    *tap = *tap * rho + complex_gaussian(rng, p) * innov;
                }
            }
        }
        state.frame_index += 1;
        self.refresh_beta(state, users);
    }

    fn move_user(&self, user: &mut UserMobilityState, dt: f64) {
        let radius = self.params.cell_radius_m;
        let dist = user.speed * dt;
        if dist <= 0.0 {
            return;
        }
        user.position[0] += dist * user.heading.cos();
        user.position[1] += dist * user.heading.sin();
        // Reflect off the cell edge; loops only for steps longer than the diameter.
        for _ in 0..64 {
            let r = user.distance();
            if r <= radius {
                break;
            }
            let (nx, ny) = (user.position[0] / r, user.position[1] / r);
            let reflected = (2.0 * radius - r).max(0.0);
            user.position = [nx * reflected, ny * reflected];
            let (vx, vy) = (user.heading.cos(), user.heading.sin());
            let dot = vx * nx + vy * ny;
            user.heading = (vy - 2.0 * dot * ny).atan2(vx - 2.0 * dot * nx);
        }
        let r = user.distance();
        if r > radius {
            let s = radius / r;
            user.position = [user.position[0] * s, user.position[1] * s];
        }
    }

    /// Linear path gain including shadowing.
    pub fn path_gain(&self, user: &UserMobilityState) -> f64 {
        let loss_db = path_loss_db_clamped(user.distance()) + user.shadowing_db;
        10f64.powf(-loss_db / 10.0)
    }

    /// `H_k = sum_l tap_l e^{-j 2 pi k l / K}` for every subcarrier.
    pub fn frequency_response(&self, taps: &[Complex64; NUM_TAPS]) -> Vec<Complex64> {
        self.twiddles
            .chunks_exact(NUM_TAPS)
            .map(|w| w.iter().zip(taps).map(|(w, t)| w * t).sum())
            .collect()
    }

    fn refresh_beta(&self, state: &mut ChannelState, users: &[UserMobilityState]) {
        let gamma = if self.params.gamma_divides {
            1.0 / self.budget.gamma
        } else {
            self.budget.gamma
        };
        let noise = self.budget.noise_w();
        let n_sub = state.n_sub;
        for (i, user) in users.iter().enumerate() {
            let factor = gamma * self.path_gain(user) / noise;
            let taps = &state.taps[i];
            let row = &mut state.beta[i * n_sub..(i + 1) * n_sub];
            for (b, w) in row.iter_mut().zip(self.twiddles.chunks_exact(NUM_TAPS)) {
                let mut re = 0.0;
                let mut im = 0.0;
                for (w, t) in w.iter().zip(taps) {
                    re += w.re * t.re - w.im * t.im;
                    im += w.re * t.im + w.im * t.re;
                }
                *b = factor * (re * re + im * im);
            }
        }
    }
}

fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, power: f64) -> Complex64 {
    let s = (power / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}
