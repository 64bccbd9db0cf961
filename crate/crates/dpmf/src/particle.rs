//! Finite-N interacting ensemble: drifted diffusions with unit Fano factor,
//! refractory inactivation, delayed resets, and generation-ordered avalanche
//! resolution.
//!
//! Between interactions an active particle follows `dX = -nu dt + sqrt(nu dt) Z`
//! (variance equals drift magnitude, the Poisson-like signature), with a
//! Brownian-bridge crossing test per substep. When a particle hits zero it
//! inactivates for exactly `epsilon`, then resets to the reset level. Every
//! spike kicks each *active* other particle by an independent
//! `Normal(lambda/N, lambda/N)` amount (negative kicks are not truncated);
//! receivers driven to zero spike in the next generation, and a particle
//! spikes at most once per avalanche.
//!
//! Every particle owns an independently seeded ChaCha stream and draws its
//! own diffusion increments and received kicks, so trajectories are
//! bit-reproducible under any parallel partition and invariant (as an
//! ensemble) under relabeling.

use crate::error::Error;
use crate::exec;
use crate::init::InitialCondition;
use crate::params::ModelParams;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Activity phase of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Phase {
    Active,
    /// Inactive since the stored spike time; resets at `since + epsilon`.
    Refractory { since: f64 },
}

#[derive(Debug, Clone)]
struct Particle {
    pos: f64,
    phase: Phase,
    spikes: u32,
    rng: ChaCha8Rng,
    /// spiked in the avalanche currently being resolved
    in_avalanche: bool,
}

/// What happened, when, to whom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    Spike,
    Reset,
}

/// One log line of the event history.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub particle: u32,
    pub kind: EventKind,
    /// Avalanche generation for spikes (0 = the diffusion-driven trigger).
    pub generation: u32,
}

/// Aggregate record of one avalanche.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AvalancheRecord {
    pub t: f64,
    /// Total number of spikes in the avalanche.
    pub size: u32,
    /// Number of generations (1 = trigger only).
    pub generations: u32,
}

/// The interacting ensemble.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    particles: Vec<Particle>,
    pub t: f64,
    pub params: ModelParams,
    pub events: Vec<EventRecord>,
    pub avalanches: Vec<AvalancheRecord>,
    /// Diffusion-noise scale test hook (1 = physical dynamics).
    pub noise_scale: f64,
}

/// Draw an initial ensemble of `n` particles from the initial condition,
/// assigning ChaCha stream `i` to particle `i`.
pub fn init_ensemble(
    n: usize,
    init: &InitialCondition,
    params: &ModelParams,
    seed: u64,
) -> Result<ParticleEnsemble> {
    init_ensemble_streams(n, init, params, seed, |i| i as u64)
}

/// Like [`init_ensemble`] but with an explicit stream assignment; permuting
/// the map relabels particles without changing the ensemble's aggregate law
/// (the exchangeability testing hook).
pub fn init_ensemble_streams(
    n: usize,
    init: &InitialCondition,
    params: &ModelParams,
    seed: u64,
    stream_of: impl Fn(usize) -> u64,
) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::validation("ensemble needs at least one particle"));
    }
    let total = init.active_mass + init.refractory_mass;
    let mut particles = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_of(i));
        let u: f64 = rng.random::<f64>() * total;
        let (pos, phase) = if u < init.active_mass {
            (init.q0.sample_state(rng.random::<f64>()), Phase::Active)
        } else {
            // refractory: sample the inactivation instant from the flux
            // history (sigma-coordinates pushed back to original time)
            let v = rng.random::<f64>() * init.refractory_mass;
            let sigma_pre = init.g0_cum.inverse_eval_right(v);
            let t_pre = init.psi0.eval(sigma_pre);
            (0.0, Phase::Refractory { since: t_pre })
        };
        particles.push(Particle {
            pos,
            phase,
            spikes: 0,
            rng,
            in_avalanche: false,
        });
    }
    Ok(ParticleEnsemble {
        particles,
        t: 0.0,
        params: *params,
        events: Vec::new(),
        avalanches: Vec::new(),
        noise_scale: 1.0,
    })
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Current states of active particles.
    pub fn active_states(&self) -> Vec<f64> {
        self.particles
            .iter()
            .filter(|p| p.phase == Phase::Active)
            .map(|p| p.pos)
            .collect()
    }

    /// Fraction of particles currently active.
    pub fn active_fraction(&self) -> f64 {
        self.active_states().len() as f64 / self.len() as f64
    }

    /// Empirical cumulative spike count per particle, `F_N(t)`.
    pub fn mean_spike_count(&self) -> f64 {
        self.particles.iter().map(|p| p.spikes as f64).sum::<f64>() / self.len() as f64
    }

    /// Advance the ensemble by one substep of length `dt`.
    ///
    /// Due resets are applied at the substep start; diffusion crossings are
    /// collected at the substep end and resolved as one avalanche.
    pub fn step(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) || dt >= self.params.epsilon {
            return Err(Error::validation(format!(
                "dt must lie in (0, epsilon); got {dt} with epsilon {}",
                self.params.epsilon
            )));
        }
        let params = self.params;
        let t_now = self.t;
        let t_next = t_now + dt;

        // resets due by now re-enter at the reset level; they do not interact
        let mut reset_events = Vec::new();
        for (i, p) in self.particles.iter_mut().enumerate() {
            if let Phase::Refractory { since } = p.phase {
                if since + params.epsilon <= t_now + 1e-12 {
                    p.phase = Phase::Active;
                    p.pos = params.reset_level;
                    reset_events.push(EventRecord {
                        t: since + params.epsilon,
                        particle: i as u32,
                        kind: EventKind::Reset,
                        generation: 0,
                    });
                }
            }
        }
        self.events.extend(reset_events);

        // diffusion substep with bridge-corrected crossing detection
        let noise = self.noise_scale;
        let var = params.nu * dt;
        exec::for_each_mut(&mut self.particles, |_, p| {
            if p.phase != Phase::Active {
                return;
            }
            let z: f64 = StandardNormal.sample(&mut p.rng);
            let next = p.pos - params.nu * dt + noise * var.sqrt() * z;
            let crossed = if next <= 0.0 {
                true
            } else if noise > 0.0 {
                let p_cross = (-2.0 * p.pos * next / var).exp();
                p.rng.random::<f64>() < p_cross
            } else {
                false
            };
            if crossed {
                p.in_avalanche = true; // marks a pending generation-0 spike
            } else {
                p.pos = next;
            }
        });

        let trigger: Vec<usize> = self
            .particles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.in_avalanche)
            .map(|(i, _)| i)
            .collect();
        if !trigger.is_empty() {
            self.resolve_avalanche(trigger, t_next);
        }
        self.t = t_next;
        Ok(())
    }

    /// Resolve an instantaneous avalanche triggered by `gen0` at time `t`.
    ///
    /// Generation by generation, every still-active particle receives one
    /// independent `Normal(lambda/N, lambda/N)` kick per spiker of the
    /// previous generation; receivers driven to or below zero form the next
    /// generation. Refractory particles and particles that already spiked in
    /// this avalanche receive nothing.
    pub fn resolve_avalanche(&mut self, gen0: Vec<usize>, t: f64) {
        let n = self.len();
        let params = self.params;
        let kick_mean = params.lambda / n as f64;
        let kick_sd = kick_mean.sqrt();
        let noise = self.noise_scale;

        for &i in &gen0 {
            self.particles[i].in_avalanche = true;
        }
        let mut generation = gen0;
        let mut gen_index: u32 = 0;
        let mut total_size: u32 = 0;

        while !generation.is_empty() {
            for &i in &generation {
                let p = &mut self.particles[i];
                p.pos = 0.0;
                p.spikes += 1;
                p.phase = Phase::Refractory { since: t };
                self.events.push(EventRecord {
                    t,
                    particle: i as u32,
                    kind: EventKind::Spike,
                    generation: gen_index,
                });
            }
            total_size += generation.len() as u32;
            let n_spikers = generation.len();

            // deliver kicks to the remaining active particles
            if params.lambda > 0.0 {
                exec::for_each_mut(&mut self.particles, |_, p| {
                    if p.phase != Phase::Active || p.in_avalanche {
                        return;
                    }
                    let mut delta = 0.0;
                    for _ in 0..n_spikers {
                        let z: f64 = StandardNormal.sample(&mut p.rng);
                        delta += kick_mean + noise * kick_sd * z;
                    }
                    p.pos -= delta;
                    if p.pos <= 0.0 {
                        p.in_avalanche = true; // joins the next generation
                    }
                });
            }
            generation = self
                .particles
                .iter()
                .enumerate()
                .filter(|(_, p)| p.phase == Phase::Active && p.in_avalanche)
                .map(|(i, _)| i)
                .collect();
            gen_index += 1;
        }

        for p in &mut self.particles {
            p.in_avalanche = false;
        }
        self.avalanches.push(AvalancheRecord {
            t,
            size: total_size,
            generations: gen_index,
        });
    }
}

/// Recording options for a run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Substep; defaults to `min(epsilon/20, 1e-3)` snapped so that epsilon
    /// is an exact multiple.
    pub dt: Option<f64>,
    /// Record `F_N` every this many substeps.
    pub record_every: usize,
    /// Instants at which to histogram the active states.
    pub histogram_times: Vec<f64>,
    /// Histogram bin width.
    pub bin_width: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            dt: None,
            record_every: 10,
            histogram_times: Vec::new(),
            bin_width: 0.05,
        }
    }
}

/// Snapshot histogram of active states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateHistogram {
    pub t: f64,
    pub edges: Vec<f64>,
    /// Count per bin (not normalized).
    pub counts: Vec<u64>,
    /// Sorted active states (for exact KS statistics).
    pub states: Vec<f64>,
}

/// Output of a finite-N run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub times: Vec<f64>,
    /// Empirical cumulative spike count per particle at `times`.
    pub f_n: Vec<f64>,
    /// Active fraction at `times`.
    pub active_fraction: Vec<f64>,
    pub histograms: Vec<StateHistogram>,
    pub events: Vec<EventRecord>,
    pub avalanches: Vec<AvalancheRecord>,
}

/// Snap `dt` so that epsilon is an exact multiple (keeps resets on substep
/// boundaries).
pub fn snap_dt(epsilon: f64, requested: f64) -> f64 {
    let per = (epsilon / requested).ceil().max(1.0);
    epsilon / per
}

/// Advance the ensemble to `horizon`, recording as requested.
pub fn run(ens: &mut ParticleEnsemble, horizon: f64, opts: &RunOptions) -> Result<RunArtifacts> {
    let dt_req = opts
        .dt
        .unwrap_or_else(|| (ens.params.epsilon / 20.0).min(1e-3));
    let dt = snap_dt(ens.params.epsilon, dt_req);
    let n_steps = ((horizon - ens.t) / dt).round().max(0.0) as usize;

    let mut times = Vec::new();
    let mut f_n = Vec::new();
    let mut active_fraction = Vec::new();
    let mut histograms = Vec::new();
    let mut hist_pending: Vec<f64> = opts.histogram_times.clone();
    hist_pending.sort_by(|a, b| a.partial_cmp(b).unwrap());
    hist_pending.reverse();

    let record = |ens: &ParticleEnsemble,
                      times: &mut Vec<f64>,
                      f_n: &mut Vec<f64>,
                      act: &mut Vec<f64>| {
        times.push(ens.t);
        f_n.push(ens.mean_spike_count());
        act.push(ens.active_fraction());
    };
    record(ens, &mut times, &mut f_n, &mut active_fraction);

    for step_idx in 0..n_steps {
        ens.step(dt)?;
        while hist_pending
            .last()
            .map(|&h| ens.t + 1e-12 >= h)
            .unwrap_or(false)
        {
            let h = hist_pending.pop().unwrap();
            histograms.push(make_histogram(ens, h, opts.bin_width));
        }
        if (step_idx + 1) % opts.record_every == 0 || step_idx + 1 == n_steps {
            record(ens, &mut times, &mut f_n, &mut active_fraction);
        }
    }
    Ok(RunArtifacts {
        times,
        f_n,
        active_fraction,
        histograms,
        events: ens.events.clone(),
        avalanches: ens.avalanches.clone(),
    })
}

fn make_histogram(ens: &ParticleEnsemble, t: f64, bin_width: f64) -> StateHistogram {
    let mut states = ens.active_states();
    states.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max_state = states.last().copied().unwrap_or(0.0);
    let n_bins = ((max_state / bin_width).ceil() as usize + 1).max(1);
    let mut counts = vec![0u64; n_bins];
    for &s in &states {
        let b = ((s / bin_width) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * bin_width).collect();
    StateHistogram {
        t,
        edges,
        counts,
        states,
    }
}
