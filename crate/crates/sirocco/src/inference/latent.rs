//! Metropolis updates of the latent event counts. Each site move shifts one
//! day's count by a small integer and shunts every later day's compartment
//! state by the same amount, so the posterior delta is a direct term at the
//! proposal day plus a scan over the affected suffix.
//!
//! The scan touches, per later day: state validity, the censored-Poisson
//! infection term, the two binomial transition terms whose trial counts
//! moved, the censoring state of the vaccination term, and the admission
//! term. Interior cells take closed-form deltas; boundary cells fall back
//! to full evaluations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::epi::infection_ln_pmf;
use crate::hospital::admission_ln_pmf;
use crate::stats::{binomial_ln_pmf, binomial_tail_ln, ln_choose};

use super::context::ModelContext;
use super::params::ParameterSet;
use super::structures::Workspace;

/// ln C(n2, k) - ln C(n1, k) for nearby trial counts, by the telescoping
/// product. Both counts must be at least k.
fn trials_delta(n1: i64, n2: i64, k: i64) -> f64 {
    debug_assert!(k >= 0 && k <= n1.min(n2));
    if k == 0 || n1 == n2 {
        return 0.0;
    }
    if (n1 - n2).abs() > 32 {
        return ln_choose(n2 as u64, k as u64) - ln_choose(n1 as u64, k as u64);
    }
    let mut d = 0.0;
    if n2 > n1 {
        for j in (n1 + 1)..=n2 {
            d += (j as f64 / (j - k) as f64).ln();
        }
    } else {
        for j in (n2 + 1)..=n1 {
            d -= (j as f64 / (j - k) as f64).ln();
        }
    }
    d
}

/// Log-posterior change from shifting region `r`'s infected pool by `di`
/// and removed pool by `dr` on every day from `from_day` on. Negative
/// infinity when any later state or event leaves its support. The
/// vaccination term at `from_day` itself is skipped when the caller
/// accounts for it directly.
#[allow(clippy::too_many_arguments)]
fn downstream_delta(
    ctx: &ModelContext,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    from_day: usize,
    di: i64,
    dr: i64,
    skip_vax_at_start: bool,
) -> f64 {
    let traj = &params.traj;
    let n_days = ctx.n_days();
    let ln_keep_inf = (1.0 - params.removal_prob).ln();
    let ln_keep_rem = (1.0 - params.waning_prob).ln();
    let adm = params.admissions.as_ref();
    let mut delta = 0.0;

    for u in from_day..n_days {
        let i1 = traj.infected.get(r, u);
        let r1 = traj.removed.get(r, u);
        let s1 = traj.susceptible(r, u);
        let i2 = i1 + di;
        let r2 = r1 + dr;
        let s2 = s1 - di - dr;
        if i2 < 0 || r2 < 0 || s2 < 0 {
            return f64::NEG_INFINITY;
        }

        // Vaccination term at u: count and trials are fixed, but the
        // censoring state follows the susceptible pool.
        if !(skip_vax_at_start && u == from_day) {
            let e = traj.e.get(r, u);
            if (s1 == 0) != (s2 == 0) {
                let lagged = ctx.lagged_vax(r, u);
                let old = if s1 == 0 {
                    binomial_tail_ln(e, lagged, params.vax_efficacy)
                } else {
                    binomial_ln_pmf(e, lagged, params.vax_efficacy)
                };
                let new = if s2 == 0 {
                    binomial_tail_ln(e, lagged, params.vax_efficacy)
                } else {
                    binomial_ln_pmf(e, lagged, params.vax_efficacy)
                };
                delta += new - old;
            }
        }

        // Admission term at u rides on the infected pool.
        if di != 0 {
            if let Some(adm) = adm {
                let h = adm.counts.get(r, u);
                if h > i2 {
                    return f64::NEG_INFINITY;
                }
                let g = ws.adm_factor.get(r, u);
                if i1 > 0 && i2 > 0 && h < i1 && h < i2 {
                    delta += h as f64 * (i2 as f64 / i1 as f64).ln() - g * (i2 - i1) as f64;
                } else {
                    delta += admission_ln_pmf(h, i2 as f64 * g, i2)
                        - admission_ln_pmf(h, i1 as f64 * g, i1);
                }
            }
        }

        // Terms of the next day's events, whose rates and trial counts
        // come from day u.
        if u + 1 < n_days {
            let y_next = traj.y.get(r, u + 1);
            let c_next = traj.c.get(r, u + 1);
            let d_next = traj.d.get(r, u + 1);
            if c_next > i2 || d_next > r2 || y_next > s2 {
                return f64::NEG_INFINITY;
            }
            let f = ws.inf_factor.get(r, u + 1);
            if i1 > 0 && i2 > 0 && s1 > 0 && s2 > 0 && y_next < s1 && y_next < s2 {
                let prod1 = i1 as f64 * s1 as f64;
                let prod2 = i2 as f64 * s2 as f64;
                delta += y_next as f64 * (prod2 / prod1).ln() - f * (prod2 - prod1);
            } else {
                delta += infection_ln_pmf(y_next, i2 as f64 * s2 as f64 * f, s2)
                    - infection_ln_pmf(y_next, i1 as f64 * s1 as f64 * f, s1);
            }
            if di != 0 {
                delta += trials_delta(i1, i2, c_next) + di as f64 * ln_keep_inf;
            }
            if dr != 0 {
                delta += trials_delta(r1, r2, d_next) + dr as f64 * ln_keep_rem;
            }
        }
    }
    delta
}

/// Log-posterior change from `y[r, t] += dy`.
pub fn y_delta_lp(
    ctx: &ModelContext,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    t: usize,
    dy: i64,
) -> f64 {
    let traj = &params.traj;
    let y1 = traj.y.get(r, t);
    let y2 = y1 + dy;
    let reported = ctx.data.reported_cases.get(r, t);
    let s_prev = traj.susceptible(r, t - 1);
    if y2 < reported || y2 > s_prev {
        return f64::NEG_INFINITY;
    }
    let rate = traj.infected.get(r, t - 1) as f64 * s_prev as f64 * ws.inf_factor.get(r, t);
    let mut delta =
        infection_ln_pmf(y2, rate, s_prev) - infection_ln_pmf(y1, rate, s_prev);
    // Reported-case thinning: the binomial coefficient and the miss mass.
    let pi = ws.pi.get(r, t);
    delta += trials_delta(y1, y2, reported) + dy as f64 * (1.0 - pi).ln();
    delta + downstream_delta(ctx, params, ws, r, t, dy, 0, false)
}

/// Log-posterior change from `c[r, t] += dc`.
pub fn c_delta_lp(
    ctx: &ModelContext,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    t: usize,
    dc: i64,
) -> f64 {
    let traj = &params.traj;
    let c1 = traj.c.get(r, t);
    let c2 = c1 + dc;
    let i_prev = traj.infected.get(r, t - 1);
    if c2 < 0 || c2 > i_prev {
        return f64::NEG_INFINITY;
    }
    let theta = params.removal_prob;
    let delta = trials_count_delta(i_prev, c1, c2, theta);
    delta + downstream_delta(ctx, params, ws, r, t, -dc, dc, false)
}

/// Log-posterior change from `d[r, t] += dd`.
pub fn d_delta_lp(
    ctx: &ModelContext,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    t: usize,
    dd: i64,
) -> f64 {
    let traj = &params.traj;
    let d1 = traj.d.get(r, t);
    let d2 = d1 + dd;
    let r_prev = traj.removed.get(r, t - 1);
    if d2 < 0 || d2 > r_prev {
        return f64::NEG_INFINITY;
    }
    let delta = trials_count_delta(r_prev, d1, d2, params.waning_prob);
    delta + downstream_delta(ctx, params, ws, r, t, 0, -dd, false)
}

/// Log-posterior change from `e[r, t] += de`.
pub fn e_delta_lp(
    ctx: &ModelContext,
    params: &ParameterSet,
    ws: &Workspace,
    r: usize,
    t: usize,
    de: i64,
) -> f64 {
    let traj = &params.traj;
    let e1 = traj.e.get(r, t);
    let e2 = e1 + de;
    let lagged = ctx.lagged_vax(r, t);
    if e2 < 0 || e2 > lagged {
        return f64::NEG_INFINITY;
    }
    let s1 = traj.susceptible(r, t);
    let s2 = s1 - de;
    if s2 < 0 {
        return f64::NEG_INFINITY;
    }
    let pi = params.vax_efficacy;
    let old = if s1 == 0 {
        binomial_tail_ln(e1, lagged, pi)
    } else {
        binomial_ln_pmf(e1, lagged, pi)
    };
    let new = if s2 == 0 {
        binomial_tail_ln(e2, lagged, pi)
    } else {
        binomial_ln_pmf(e2, lagged, pi)
    };
    new - old + downstream_delta(ctx, params, ws, r, t, 0, de, true)
}

/// Binomial count change at fixed trials: ln pmf(k2; n, p) - ln pmf(k1; n, p).
fn trials_count_delta(n: i64, k1: i64, k2: i64, p: f64) -> f64 {
    debug_assert!(k1 <= n && k2 <= n);
    ln_choose(n as u64, k2 as u64) - ln_choose(n as u64, k1 as u64)
        + (k2 - k1) as f64 * (p.ln() - (1.0 - p).ln())
}

fn signed_step<R: Rng + ?Sized>(step: i64, rng: &mut R) -> i64 {
    let mag = rng.gen_range(1..=step.max(1));
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

macro_rules! cell_update {
    ($name:ident, $delta_fn:ident, $apply:ident) => {
        /// One Metropolis move of this cell; returns whether it accepted.
        pub fn $name(
            ctx: &ModelContext,
            params: &mut ParameterSet,
            ws: &Workspace,
            r: usize,
            t: usize,
            step: i64,
            rng: &mut ChaCha8Rng,
        ) -> bool {
            let d = signed_step(step, rng);
            let delta = $delta_fn(ctx, params, ws, r, t, d);
            if delta >= 0.0 || rng.gen::<f64>().ln() < delta {
                params.traj.$apply(r, t, d);
                true
            } else {
                false
            }
        }
    };
}

cell_update!(update_y_cell, y_delta_lp, apply_y_delta);
cell_update!(update_c_cell, c_delta_lp, apply_c_delta);
cell_update!(update_d_cell, d_delta_lp, apply_d_delta);
cell_update!(update_e_cell, e_delta_lp, apply_e_delta);

/// One full pass over the latent counts: for each active region, every
/// post-seed day of Y, then C, then D, then E. Returns (accepts, attempts)
/// summed per event type in that order.
pub fn latent_sweep(
    ctx: &ModelContext,
    params: &mut ParameterSet,
    ws: &Workspace,
    step: i64,
    rng: &mut ChaCha8Rng,
) -> [(u64, u64); 4] {
    let mut tally = [(0u64, 0u64); 4];
    let n_days = ctx.n_days();
    for r in 0..ctx.n_regions() {
        let Some(t0) = ctx.start_days[r] else { continue };
        for t in (t0 + 1)..n_days {
            tally[0].1 += 1;
            tally[0].0 += update_y_cell(ctx, params, ws, r, t, step, rng) as u64;
        }
        for t in (t0 + 1)..n_days {
            if params.traj.infected.get(r, t - 1) == 0 && params.traj.c.get(r, t) == 0 {
                continue;
            }
            tally[1].1 += 1;
            tally[1].0 += update_c_cell(ctx, params, ws, r, t, step, rng) as u64;
        }
        for t in (t0 + 1)..n_days {
            if params.traj.removed.get(r, t - 1) == 0 && params.traj.d.get(r, t) == 0 {
                continue;
            }
            tally[2].1 += 1;
            tally[2].0 += update_d_cell(ctx, params, ws, r, t, step, rng) as u64;
        }
        for t in (t0 + 1)..n_days {
            if ctx.lagged_vax(r, t) == 0 && params.traj.e.get(r, t) == 0 {
                continue;
            }
            tally[3].1 += 1;
            tally[3].0 += update_e_cell(ctx, params, ws, r, t, step, rng) as u64;
        }
    }
    tally
}
