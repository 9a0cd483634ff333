//! Frame-level simulation of one cell: traffic, channel, partition, power
//! allocation and queue service, with per-window metrics and sweeps.

pub mod config;
pub mod metrics;

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{
    quantized_bits, quantized_bits_for_snr, ChannelModel, ChannelState, UserMobilityState,
};
use crate::power::{kkt_allocate_from, AllocError, AllocationProblem, Carrier};
use crate::sched::{assign_best_channel, assign_greedy, GreedyOptions, SchedError};
use crate::traffic::{ServiceClass, TrafficError, TrafficModel, TrafficSession};
use crate::utility::{
    make_utility, normalize, CaseParams, UtilityError, UtilityModel, UtilitySpec,
};

pub use config::{
    ClassUtility, ConfigError, NormalizeTo, ReportMetric, ScenarioConfig, SchedulerMode,
    UtilityShape, MCS_CAP_BITS,
};
pub use metrics::{
    average_utility, fmt_sig9, mean_ci95, write_simulation_csv, write_sweep_csv, ClassMetrics,
    MetricsRecord, SweepRow, SIMULATION_HEADER, SWEEP_HEADER,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("frame {frame}: {source}")]
    Alloc { frame: u64, source: AllocError },
    #[error("frame {frame}: {source}")]
    Sched { frame: u64, source: SchedError },
    #[error("no data to aggregate")]
    EmptyInput,
    #[error("`{0}` is not a sweepable key")]
    NotSweepable(String),
}

/// Per-frame resource checks gathered over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub frames: u64,
    pub blocks: u64,
    /// Largest `sum(p) - budget` seen, watts.
    pub max_power_excess: f64,
    /// Partitions that were not an exact cover.
    pub partition_failures: u64,
    /// User-frames that served more than their capacity.
    pub capacity_violations: u64,
    /// Allocations that hit the iteration cap and used the best iterate.
    pub alloc_fallbacks: u64,
}

impl Audit {
    pub fn merge(&mut self, o: &Audit) {
        self.frames += o.frames;
        self.blocks += o.blocks;
        self.max_power_excess = self.max_power_excess.max(o.max_power_excess);
        self.partition_failures += o.partition_failures;
        self.capacity_violations += o.capacity_violations;
        self.alloc_fallbacks += o.alloc_fallbacks;
    }

    /// Power within `budget + 1e-9` everywhere, exact covers, capacity respected.
    pub fn is_clean(&self) -> bool {
        self.max_power_excess <= 1e-9
            && self.partition_failures == 0
            && self.capacity_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub records: Vec<MetricsRecord>,
    pub audit: Audit,
}

const STREAM_TRAFFIC: u64 = 0;
const STREAM_CHANNEL: u64 = 1;

/// Independent stream per (class, index within class, purpose), so adding
/// users of one class leaves every other user's randomness untouched.
fn user_rng(seed: u64, class: ServiceClass, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class.index() as u64) << 40) | ((index as u64) << 1) | purpose);
    rng
}

struct User {
    class: ServiceClass,
    session: TrafficSession,
    traffic_rng: ChaCha8Rng,
    credit_bits: f64,
    window: WindowAcc,
}

#[derive(Default, Clone, Copy)]
struct WindowAcc {
    served: u64,
    offered: u64,
    dropped: u64,
    objective_sum: f64,
}

/// Per-subcarrier optimizer utilities, built on demand per (class, carrier count).
struct Surrogates {
    cache: Vec<Vec<Option<UtilityModel>>>,
    inflection_nats: [Option<f64>; 3],
    specs: [UtilitySpec; 3],
    m_sub: f64,
}

impl Surrogates {
    fn new(cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let delta_f = cfg.delta_f_hz();
        let mut inflection_nats = [None; 3];
        let mut specs = Vec::with_capacity(3);
        for class in ServiceClass::ALL {
            let cu = cfg.class_utility(class);
            let spec = cu.spec()?;
            if let CaseParams::Sigmoid { x0 } = spec.case {
                // Whole-user inflection rate, expressed in nats per subcarrier.
                inflection_nats[class.index()] =
                    Some(x0 * cu.rate_unit_kbps * 1e3 * LN_2 / delta_f);
            }
            specs.push(spec);
        }
        let specs: [UtilitySpec; 3] = specs.try_into().expect("three classes");
        Ok(Self {
            cache: vec![vec![None; cfg.subcarriers + 1]; 3],
            inflection_nats,
            specs,
            m_sub: MCS_CAP_BITS * LN_2,
        })
    }

    fn ensure(&mut self, class: ServiceClass, n: usize) -> Result<(), SimError> {
        let c = class.index();
        if self.cache[c][n].is_some() {
            return Ok(());
        }
        let spec = match self.inflection_nats[c] {
            Some(total) => UtilitySpec::sigmoid((total / n.max(1) as f64).min(self.m_sub)),
            None => self.specs[c].clone(),
        };
        let model = normalize(&make_utility(&spec)?, self.m_sub)?;
        self.cache[c][n] = Some(model);
        Ok(())
    }

    fn get(&self, class: ServiceClass, n: usize) -> &UtilityModel {
        self.cache[class.index()][n]
            .as_ref()
            .expect("surrogate built before use")
    }
}

/// The utility a class's users are scored with: the configured shape over
/// rate in `rate_unit_kbps` units, normalized to 0 at rest and 1 at the
/// class's normalization rate.
pub fn class_utility_model(
    cfg: &ScenarioConfig,
    class: ServiceClass,
) -> Result<UtilityModel, SimError> {
    let cu = cfg.class_utility(class);
    let raw = make_utility(&cu.spec()?)?;
    Ok(normalize(
        &raw,
        cfg.normalize_kbps(class) / cu.rate_unit_kbps,
    )?)
}

/// Spectral efficiency actually carried, bits per symbol.
fn carried_bits(r_nats: f64, quantize: bool) -> f64 {
    let bits = r_nats / LN_2;
    if quantize {
        quantized_bits(bits)
    } else {
        bits
    }
}

/// Runs one scenario and returns its per-window metrics.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<MetricsRecord>, SimError> {
    Ok(run_scenario_audited(cfg)?.records)
}

/// Runs one scenario, also returning the resource audit.
pub fn run_scenario_audited(cfg: &ScenarioConfig) -> Result<ScenarioRun, SimError> {
    cfg.validate()?;
    let budget = cfg.link_budget()?;
    let budget_w = budget.tx_power_w();
    let delta_f = budget.delta_f_hz;
    let k_total = cfg.subcarriers;
    let channel = ChannelModel::new(budget, cfg.channel.clone());
    let traffic = TrafficModel::new(cfg.traffic.clone())?;

    let report_models = ServiceClass::ALL
        .iter()
        .map(|&c| class_utility_model(cfg, c))
        .collect::<Result<Vec<_>, _>>()?;
    let units: Vec<f64> = ServiceClass::ALL
        .iter()
        .map(|&c| cfg.class_utility(c).rate_unit_kbps)
        .collect();
    let mut surrogates = Surrogates::new(cfg)?;

    let mut users = Vec::new();
    let mut mobility: Vec<UserMobilityState> = Vec::new();
    let mut channel_rngs = Vec::new();
    for class in ServiceClass::ALL {
        for j in 0..cfg.users[class.index()] {
            let mut ch_rng = user_rng(cfg.seed, class, j, STREAM_CHANNEL);
            let mut tr_rng = user_rng(cfg.seed, class, j, STREAM_TRAFFIC);
            mobility.push(channel.spawn_user(&mut ch_rng));
            channel_rngs.push(ch_rng);
            users.push(User {
                class,
                session: TrafficSession::new(class, &traffic, &mut tr_rng),
                traffic_rng: tr_rng,
                credit_bits: 0.0,
                window: WindowAcc::default(),
            });
        }
    }
    let n = users.len();
    let mut state: Option<ChannelState> =
        (n > 0).then(|| channel.init_state(&mobility, &mut channel_rngs));

    let frames_per_window = ((cfg.report_window_s / cfg.frame_s).round() as u64).max(1);
    let window_s = frames_per_window as f64 * cfg.frame_s;
    let total_frames = (cfg.duration_s / cfg.frame_s).round() as u64;
    let n_windows = total_frames / frames_per_window;
    let block = cfg.block_frames as u64;

    let mut audit = Audit::default();
    let mut records = Vec::with_capacity(n_windows as usize);
    let mut cap_bps = vec![0.0; n];
    let mut objective_now = vec![0.0; n];
    let mut rates = vec![0.0; n * k_total];
    let mut active = vec![false; n];
    let mut prev_nu = None;

    for frame in 0..n_windows * frames_per_window {
        let now = frame as f64 * cfg.frame_s;
        for u in users.iter_mut() {
            let arrived = u
                .session
                .step(&traffic, cfg.frame_s, now, &mut u.traffic_rng);
            u.window.offered += arrived;
        }

        if let Some(state) = state.as_mut().filter(|_| frame % block == 0) {
            if frame > 0 {
                channel.step(
                    state,
                    &mut mobility,
                    block as f64 * cfg.frame_s,
                    &mut channel_rngs,
                );
            }
            audit.blocks += 1;
            let beta = state.beta_matrix();
            let partition = match cfg.scheduler {
                SchedulerMode::BestChannel => assign_best_channel(&beta),
                SchedulerMode::UtilityGreedy => {
                    let share = budget_w / k_total as f64;
                    for (i, u) in users.iter().enumerate() {
                        let scale = delta_f / 1e3 / units[u.class.index()];
                        for k in 0..k_total {
                            let snr = beta.get(i, k) * share;
                            let bits = if cfg.quantize_mcs {
                                quantized_bits_for_snr(snr)
                            } else {
                                snr.ln_1p() / LN_2
                            };
                            rates[i * k_total + k] = bits * scale;
                        }
                        active[i] = u.session.is_backlogged();
                    }
                    let refs: Vec<&UtilityModel> = users
                        .iter()
                        .map(|u| &report_models[u.class.index()])
                        .collect();
                    let opts = GreedyOptions {
                        lookahead: cfg.lookahead,
                        active: Some(&active),
                    };
                    assign_greedy(&beta, &rates, &refs, &opts)
                }
            }
            .map_err(|source| SimError::Sched { frame, source })?;
            if partition.validate().is_err() || partition.n_subcarriers() != k_total {
                audit.partition_failures += 1;
            }

            for (i, u) in users.iter().enumerate() {
                surrogates.ensure(u.class, partition.sets()[i].len())?;
            }
            let owner = partition.owner();
            let carriers: Vec<Carrier<'_>> = (0..k_total)
                .map(|k| {
                    let i = owner[k];
                    Carrier {
                        beta: beta.get(i, k),
                        utility: surrogates.get(users[i].class, partition.sets()[i].len()),
                    }
                })
                .collect();
            let problem = AllocationProblem::new(carriers, budget_w)
                .map_err(|source| SimError::Alloc { frame, source })?;
            let result =
                match kkt_allocate_from(&problem, cfg.alloc_tol, cfg.alloc_max_iter, prev_nu) {
                    Ok(r) => r,
                    Err(AllocError::MaxIterations { best }) => {
                        audit.alloc_fallbacks += 1;
                        *best
                    }
                    Err(source) => return Err(SimError::Alloc { frame, source }),
                };
            prev_nu = (result.nu > 0.0).then_some(result.nu);
            let spent: f64 = result.powers.iter().sum();
            audit.max_power_excess = audit.max_power_excess.max(spent - budget_w);

            for (i, set) in partition.sets().iter().enumerate() {
                let mut bps = 0.0;
                let mut obj = 0.0;
                for &k in set {
                    let r = (beta.get(i, k) * result.powers[k]).ln_1p();
                    bps += carried_bits(r, cfg.quantize_mcs) * delta_f;
                    obj += problem.carriers()[k].utility.value(r).clamp(0.0, 1.0);
                }
                cap_bps[i] = bps;
                objective_now[i] = if set.is_empty() {
                    0.0
                } else {
                    obj / set.len() as f64
                };
            }
        }

        for (i, u) in users.iter_mut().enumerate() {
            u.credit_bits += cap_bps[i] * cfg.frame_s;
            let cap = (u.credit_bits + 1e-9).floor().max(0.0);
            u.credit_bits -= cap;
            let cap = cap as u64;
            let stats = u.session.serve(cap, now);
            if stats.served_bits > cap {
                audit.capacity_violations += 1;
            }
            u.window.served += stats.served_bits;
            u.window.dropped += stats.dropped_bits;
            if u.class == ServiceClass::BestEffort {
                u.window.offered += stats.offered_bits;
            }
            u.window.objective_sum += objective_now[i];
        }
        audit.frames += 1;

        if (frame + 1) % frames_per_window == 0 {
            records.push(close_window(
                cfg,
                &mut users,
                &report_models,
                &units,
                (frame / frames_per_window) as usize,
                window_s,
                frames_per_window,
            ));
        }
    }
    Ok(ScenarioRun { records, audit })
}

fn close_window(
    cfg: &ScenarioConfig,
    users: &mut [User],
    report_models: &[UtilityModel],
    units: &[f64],
    window_index: usize,
    window_s: f64,
    frames: u64,
) -> MetricsRecord {
    let mut sums = [(0usize, 0.0f64, 0.0f64, 0u64, 0u64); 3];
    for u in users.iter_mut() {
        let c = u.class.index();
        let w = std::mem::take(&mut u.window);
        let throughput = w.served as f64 / window_s;
        let utility = match cfg.report_metric {
            ReportMetric::Utility => report_models[c].value(throughput / 1e3 / units[c]),
            ReportMetric::Objective => w.objective_sum / frames as f64,
        };
        let s = &mut sums[c];
        s.0 += 1;
        s.1 += utility.clamp(0.0, 1.0);
        s.2 += throughput;
        s.3 += w.dropped;
        s.4 += w.offered;
    }
    let mut classes = [None; 3];
    for (slot, (count, util, thr, dropped, offered)) in classes.iter_mut().zip(sums) {
        if count > 0 {
            *slot = Some(ClassMetrics {
                avg_utility: util / count as f64,
                avg_throughput_bps: thr / count as f64,
                drop_rate: if offered > 0 {
                    dropped as f64 / offered as f64
                } else {
                    0.0
                },
            });
        }
    }
    MetricsRecord {
        window_index,
        classes,
    }
}

/// Keys [`sweep`] accepts.
pub const SWEEPABLE_KEYS: [&str; 3] = [
    "traffic.voip.users",
    "traffic.video.users",
    "traffic.be.users",
];

/// Runs every value of a user-count key with `seeds` replicates each; replicate
/// `j` uses seed `cfg.seed + j`, so all values share the same seeds. Rows come
/// out in value order, then class order, and only for classes with users.
pub fn sweep(
    cfg: &ScenarioConfig,
    param: &str,
    values: &[u64],
    seeds: usize,
) -> Result<Vec<SweepRow>, SimError> {
    Ok(sweep_audited(cfg, param, values, seeds)?.0)
}

/// [`sweep`] plus the merged audit of every run.
pub fn sweep_audited(
    cfg: &ScenarioConfig,
    param: &str,
    values: &[u64],
    seeds: usize,
) -> Result<(Vec<SweepRow>, Audit), SimError> {
    if !SWEEPABLE_KEYS.contains(&param) {
        return Err(SimError::NotSweepable(param.into()));
    }
    if seeds == 0 {
        return Err(ConfigError::Invalid("need at least one seed".into()).into());
    }
    let mut jobs = Vec::with_capacity(values.len() * seeds);
    for &v in values {
        for j in 0..seeds {
            let mut c = cfg.clone();
            c.set(param, &v.to_string())?;
            c.seed = cfg.seed.wrapping_add(j as u64);
            jobs.push(c);
        }
    }
    let runs: Vec<ScenarioRun> = jobs
        .par_iter()
        .map(run_scenario_audited)
        .collect::<Result<_, _>>()?;

    let mut audit = Audit::default();
    let mut rows = Vec::new();
    for (vi, &v) in values.iter().enumerate() {
        let chunk = &runs[vi * seeds..(vi + 1) * seeds];
        let pooled: Vec<MetricsRecord> = chunk
            .iter()
            .flat_map(|r| r.records.iter().cloned())
            .collect();
        chunk.iter().for_each(|r| audit.merge(&r.audit));
        for class in ServiceClass::ALL {
            let windows: Vec<&ClassMetrics> =
                pooled.iter().filter_map(|r| r.class(class)).collect();
            if windows.is_empty() {
                continue;
            }
            let (mean_utility, ci95) = average_utility(&pooled, class)?;
            let n = windows.len() as f64;
            rows.push(SweepRow {
                param_value: v,
                class,
                mean_utility,
                ci95,
                mean_throughput_bps: windows.iter().map(|m| m.avg_throughput_bps).sum::<f64>() / n,
                drop_rate: windows.iter().map(|m| m.drop_rate).sum::<f64>() / n,
            });
        }
    }
    Ok((rows, audit))
}

/// The simulation CSV of one scenario as a string.
pub fn simulation_csv(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_simulation_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// The sweep CSV as a string.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(text: &str) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::parse(text).unwrap();
        cfg.duration_s = 0.5;
        cfg.report_window_s = 0.1;
        cfg
    }

    #[test]
    fn zero_users_runs() {
        let cfg = short("traffic.voip.users = 0\ntraffic.video.users = 0\ntraffic.be.users = 0");
        let recs = run_scenario(&cfg).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.classes.iter().all(Option::is_none)));
    }

    #[test]
    fn static_single_be_user_constant_throughput() {
        let cfg = short(
            "traffic.voip.users = 0\ntraffic.video.users = 0\ntraffic.be.users = 1\n\
             channel.speed_mean_mps = 0\nchannel.speed_std_mps = 0",
        );
        let recs = run_scenario(&cfg).unwrap();
        let thr: Vec<f64> = recs
            .iter()
            .map(|r| {
                r.class(ServiceClass::BestEffort)
                    .unwrap()
                    .avg_throughput_bps
            })
            .collect();
        let first = thr[0];
        assert!(first > 0.0);
        assert!(
            thr.iter().all(|t| (t - first).abs() <= 0.01 * first),
            "{thr:?}"
        );
    }

    #[test]
    fn baseline_utilities_in_range() {
        let cfg = short("");
        let run = run_scenario_audited(&cfg).unwrap();
        assert!(run.audit.is_clean(), "{:?}", run.audit);
        for r in &run.records {
            for m in r.classes.iter().flatten() {
                assert!((0.0..=1.0).contains(&m.avg_utility));
                assert!(m.avg_throughput_bps >= 0.0);
            }
        }
    }

    #[test]
    fn greedy_mode_runs_clean() {
        let cfg = short("scheduler.mode = utility_greedy\nreport.metric = objective");
        let run = run_scenario_audited(&cfg).unwrap();
        assert!(run.audit.is_clean(), "{:?}", run.audit);
        assert_eq!(run.records.len(), 5);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = short("sim.seed = 7");
        let a = simulation_csv(&run_scenario(&cfg).unwrap());
        let b = simulation_csv(&run_scenario(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_shapes() {
        let cfg = short("sim.duration_s = 0.2");
        let rows = sweep(&cfg, "traffic.voip.users", &[1, 2], 1).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].param_value, 1);
        assert_eq!(rows[3].class, ServiceClass::Voip);
        assert!(sweep(&cfg, "traffic.voip.users", &[], 2)
            .unwrap()
            .is_empty());
        assert!(matches!(
            sweep(&cfg, "channel.subcarriers", &[1], 1),
            Err(SimError::NotSweepable(_))
        ));
    }
}
