//! Offered load for the three service classes and deadline-aware fluid queues.

use std::collections::VecDeque;
use std::fmt;
use std::ops::AddAssign;

use rand::Rng;
use rand_distr::Exp1;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("invalid traffic parameters: {0}")]
    InvalidParams(String),
    #[error("rate distribution solver failed: {0}")]
    SolverFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceClass {
    Voip,
    Video,
    BestEffort,
}

impl ServiceClass {
    pub const ALL: [ServiceClass; 3] = [
        ServiceClass::Voip,
        ServiceClass::Video,
        ServiceClass::BestEffort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ServiceClass::Voip => "voip",
            ServiceClass::Video => "video",
            ServiceClass::BestEffort => "be",
        }
    }

    /// Position in [`ServiceClass::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for ServiceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficParams {
    pub voip_on_mean_s: f64,
    pub voip_off_mean_s: f64,
    pub voip_rate_kbps: f64,
    pub voip_deadline_ms: f64,
    pub video_state_mean_ms: f64,
    pub video_rate_min_kbps: f64,
    pub video_rate_max_kbps: f64,
    pub video_rate_mean_kbps: f64,
    pub video_deadline_s: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            voip_on_mean_s: 1.0,
            voip_off_mean_s: 1.5,
            voip_rate_kbps: 32.0,
            voip_deadline_ms: 80.0,
            video_state_mean_ms: 160.0,
            video_rate_min_kbps: 64.0,
            video_rate_max_kbps: 256.0,
            video_rate_mean_kbps: 180.0,
            video_deadline_s: 1.0,
        }
    }
}

/// Density proportional to `exp(-lambda x)` on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedExp {
    lo: f64,
    hi: f64,
    lambda: f64,
}

/// Below this `|lambda L|` the uniform-limit expansions are used.
const SMALL_LAMBDA_L: f64 = 1e-6;

impl TruncatedExp {
    /// Solves for the `lambda` whose truncated mean equals `mean`, by bisection on `[-1, 1]`.
    pub fn with_mean(lo: f64, hi: f64, mean: f64) -> Result<Self, TrafficError> {
        if !(lo < hi) || !(mean > lo && mean < hi) {
            return Err(TrafficError::InvalidParams(format!(
                "need lo < mean < hi, got {lo}, {mean}, {hi}"
            )));
        }
        let (mut a, mut b) = (-1.0_f64, 1.0_f64);
        let mean_at = |l: f64| Self { lo, hi, lambda: l }.mean();
        // mean() is decreasing in lambda.
        if !(mean_at(a) >= mean && mean_at(b) <= mean) {
            return Err(TrafficError::SolverFailure(format!(
                "mean {mean} not bracketed by lambda in [-1, 1]"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mean_at(mid) > mean {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-16 {
                break;
            }
        }
        Ok(Self {
            lo,
            hi,
            lambda: 0.5 * (a + b),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// `lo + 1/lambda - L / (exp(lambda L) - 1)` with `L = hi - lo`.
    pub fn mean(&self) -> f64 {
        let l = self.hi - self.lo;
        let x = self.lambda * l;
        if x.abs() < SMALL_LAMBDA_L {
            self.lo + 0.5 * l - x * l / 12.0
        } else {
            self.lo + 1.0 / self.lambda - l / x.exp_m1()
        }
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let l = self.hi - self.lo;
        let x = self.lambda * l;
        let v = if x.abs() < SMALL_LAMBDA_L {
            self.lo + u * l
        } else {
            self.lo - (u * (-x).exp_m1()).ln_1p() / self.lambda
        };
        v.clamp(self.lo, self.hi)
    }
}

/// Parameters plus the solved video rate distribution, shared by all sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficModel {
    pub params: TrafficParams,
    video_rate: TruncatedExp,
}

impl TrafficModel {
    pub fn new(params: TrafficParams) -> Result<Self, TrafficError> {
        let p = &params;
        for (name, v) in [
            ("voip.on_mean_s", p.voip_on_mean_s),
            ("voip.off_mean_s", p.voip_off_mean_s),
            ("video.state_mean_ms", p.video_state_mean_ms),
        ] {
            if !(v > 0.0) {
                return Err(TrafficError::InvalidParams(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("voip.rate_kbps", p.voip_rate_kbps),
            ("voip.deadline_ms", p.voip_deadline_ms),
            ("video.deadline_s", p.video_deadline_s),
        ] {
            if !(v >= 0.0) {
                return Err(TrafficError::InvalidParams(format!("{name} must be >= 0")));
            }
        }
        let video_rate = TruncatedExp::with_mean(
            p.video_rate_min_kbps,
            p.video_rate_max_kbps,
            p.video_rate_mean_kbps,
        )?;
        Ok(Self { params, video_rate })
    }

    pub fn video_rate(&self) -> &TruncatedExp {
        &self.video_rate
    }

    /// One draw of a video state rate, in kbps.
    pub fn sample_video_rate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.video_rate.sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenState {
    Voip { on: bool, residual_s: f64 },
    Video { rate_kbps: f64, residual_s: f64 },
    BestEffort,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    pub bits: u64,
    pub arrival_s: f64,
    pub deadline_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ServiceStats {
    pub offered_bits: u64,
    pub served_bits: u64,
    pub dropped_bits: u64,
    /// Sum over served bits of their queueing delay.
    pub delay_bit_s: f64,
}

impl ServiceStats {
    pub fn mean_queue_delay(&self) -> f64 {
        if self.served_bits == 0 {
            0.0
        } else {
            self.delay_bit_s / self.served_bits as f64
        }
    }
}

impl AddAssign for ServiceStats {
    fn add_assign(&mut self, o: Self) {
        self.offered_bits += o.offered_bits;
        self.served_bits += o.served_bits;
        self.dropped_bits += o.dropped_bits;
        self.delay_bit_s += o.delay_bit_s;
    }
}

fn exp_draw<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e * mean
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSession {
    class: ServiceClass,
    state: GenState,
    queue: VecDeque<Packet>,
    credit_bits: f64,
    transitions: u64,
    on_time_s: f64,
    on_periods: u64,
}

impl TrafficSession {
    /// VoIP starts ON with the stationary probability; video starts in a fresh state.
    pub fn new<R: Rng + ?Sized>(class: ServiceClass, model: &TrafficModel, rng: &mut R) -> Self {
        let p = &model.params;
        let state = match class {
            ServiceClass::Voip => {
                let on =
                    rng.random::<f64>() < p.voip_on_mean_s / (p.voip_on_mean_s + p.voip_off_mean_s);
                let mean = if on {
                    p.voip_on_mean_s
                } else {
                    p.voip_off_mean_s
                };
                GenState::Voip {
                    on,
                    residual_s: exp_draw(rng, mean),
                }
            }
            ServiceClass::Video => GenState::Video {
                rate_kbps: model.sample_video_rate(rng),
                residual_s: exp_draw(rng, p.video_state_mean_ms * 1e-3),
            },
            ServiceClass::BestEffort => GenState::BestEffort,
        };
        Self {
            class,
            state,
            queue: VecDeque::new(),
            credit_bits: 0.0,
            transitions: 0,
            on_time_s: 0.0,
            on_periods: 0,
        }
    }

    pub fn class(&self) -> ServiceClass {
        self.class
    }

    pub fn state(&self) -> GenState {
        self.state
    }

    pub fn set_state(&mut self, state: GenState) {
        self.state = state;
    }

    pub fn queue(&self) -> &VecDeque<Packet> {
        &self.queue
    }

    pub fn queued_bits(&self) -> u64 {
        self.queue.iter().map(|p| p.bits).sum()
    }

    /// Whether serving this session now would move any bits.
    pub fn is_backlogged(&self) -> bool {
        self.class == ServiceClass::BestEffort || !self.queue.is_empty()
    }

    /// Completed state changes (VoIP phase flips, video state redraws).
    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    /// Total simulated time spent ON, VoIP only.
    pub fn on_time_s(&self) -> f64 {
        self.on_time_s
    }

    /// ON periods that have ended, VoIP only.
    pub fn completed_on_periods(&self) -> u64 {
        self.on_periods
    }

    /// Advances the generator over `[now, now + dt)` and enqueues the whole
    /// bits produced, returning their number. Fractional bits carry over.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        model: &TrafficModel,
        dt: f64,
        now: f64,
        rng: &mut R,
    ) -> u64 {
        let p = &model.params;
        let deadline = match self.class {
            ServiceClass::Voip => p.voip_deadline_ms * 1e-3,
            ServiceClass::Video => p.video_deadline_s,
            ServiceClass::BestEffort => return 0,
        };
        let mut remaining = dt;
        while remaining > 0.0 {
            match &mut self.state {
                GenState::Voip { on, residual_s } => {
                    let seg = residual_s.min(remaining);
                    if *on {
                        self.credit_bits += p.voip_rate_kbps * 1e3 * seg;
                        self.on_time_s += seg;
                    }
                    *residual_s -= seg;
                    remaining -= seg;
                    if *residual_s <= 0.0 {
                        if *on {
                            self.on_periods += 1;
                        }
                        *on = !*on;
                        let mean = if *on {
                            p.voip_on_mean_s
                        } else {
                            p.voip_off_mean_s
                        };
                        *residual_s = exp_draw(rng, mean);
                        self.transitions += 1;
                    }
                }
                GenState::Video {
                    rate_kbps,
                    residual_s,
                } => {
                    let seg = residual_s.min(remaining);
                    self.credit_bits += *rate_kbps * 1e3 * seg;
                    *residual_s -= seg;
                    remaining -= seg;
                    if *residual_s <= 0.0 {
                        *rate_kbps = model.video_rate.sample(rng);
                        *residual_s = exp_draw(rng, p.video_state_mean_ms * 1e-3);
                        self.transitions += 1;
                    }
                }
                GenState::BestEffort => unreachable!(),
            }
        }
        let bits = (self.credit_bits + 1e-9).floor().max(0.0);
        self.credit_bits -= bits;
        let bits = bits as u64;
        if bits > 0 {
            self.queue.push_back(Packet {
                bits,
                arrival_s: now,
                deadline_s: now + deadline,
            });
        }
        bits
    }

    /// Drops packets whose deadline has passed, then serves FIFO up to
    /// `capacity_bits`. Best effort always has data and uses all capacity.
    pub fn serve(&mut self, capacity_bits: u64, now: f64) -> ServiceStats {
        let mut stats = ServiceStats::default();
        if self.class == ServiceClass::BestEffort {
            stats.offered_bits = capacity_bits;
            stats.served_bits = capacity_bits;
            return stats;
        }
        self.queue.retain(|pkt| {
            if pkt.deadline_s < now {
                stats.dropped_bits += pkt.bits;
                false
            } else {
                true
            }
        });
        let mut cap = capacity_bits;
        while cap > 0 {
            let Some(front) = self.queue.front_mut() else {
                break;
            };
            let take = front.bits.min(cap);
            front.bits -= take;
            cap -= take;
            stats.served_bits += take;
            stats.delay_bit_s += take as f64 * (now - front.arrival_s);
            if front.bits == 0 {
                self.queue.pop_front();
            }
        }
        stats
    }
}

/// Free-function form of [`TrafficSession::step`].
pub fn step_traffic<R: Rng + ?Sized>(
    session: &mut TrafficSession,
    model: &TrafficModel,
    dt: f64,
    now: f64,
    rng: &mut R,
) -> u64 {
    session.step(model, dt, now, rng)
}

/// Free-function form of [`TrafficSession::serve`].
pub fn serve_queue(session: &mut TrafficSession, capacity_bits: u64, now: f64) -> ServiceStats {
    session.serve(capacity_bits, now)
}
