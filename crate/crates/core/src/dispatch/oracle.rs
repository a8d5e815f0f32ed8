use super::{energy_cost, DispatchError, DispatchProblem, ORACLE_MAX_HORIZON};

/// Exact optimum of the discretised problem by dynamic programming.
///
/// The charge lattice has spacing `1 / (soc_levels - 1)` and is anchored at
/// the initial charge, so every lattice schedule is feasible for the
/// continuous problem and the result is an upper bound on its optimum.
/// Each step moves by an integer number of lattice cells, limited by the
/// power rating; `power_levels` evenly spaced move sizes between the two
/// extremes are allowed.
pub fn dispatch_oracle_dp(prob: &DispatchProblem, soc_levels: usize, power_levels: usize) -> Result<f64, DispatchError> {
    prob.validate()?;
    let horizon = prob.horizon();
    if horizon > ORACLE_MAX_HORIZON {
        return Err(DispatchError::TooLarge { horizon, limit: ORACLE_MAX_HORIZON });
    }
    if soc_levels < 2 || power_levels < 2 {
        return Err(DispatchError::InvalidProblem("oracle needs at least two levels".into()));
    }
    let base = energy_cost(&prob.prices, &prob.load, prob.dt_hours);
    if prob.capacity_mwh == 0.0 || prob.p_max_mw == 0.0 {
        return Ok(base);
    }
    let delta = 1.0 / (soc_levels - 1) as f64;
    let lo = (-prob.soc_init / delta - 1e-9).ceil() as i64;
    let hi = ((1.0 - prob.soc_init) / delta + 1e-9).floor() as i64;
    let max_move = (prob.p_max_mw * prob.dt_hours / (prob.capacity_mwh * delta) + 1e-9).floor() as i64;
    let mut moves: Vec<i64> = (0..power_levels)
        .map(|i| {
            let f = -max_move as f64 + i as f64 * 2.0 * max_move as f64 / (power_levels - 1) as f64;
            f.round() as i64
        })
        .collect();
    moves.dedup();

    let states = (hi - lo + 1) as usize;
    let mut value = vec![f64::INFINITY; states];
    value[(-lo) as usize] = 0.0;
    // One lattice cell of charge is worth 1000 * E * delta kWh-equivalents.
    let cell = 1000.0 * prob.capacity_mwh * delta;
    for &price in &prob.prices {
        let mut next = vec![f64::INFINITY; states];
        for (j, &v) in value.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            for &m in &moves {
                let to = j as i64 + m;
                if to < 0 || to >= states as i64 {
                    continue;
                }
                let c = v + price * m as f64 * cell;
                let slot = &mut next[to as usize];
                if c < *slot {
                    *slot = c;
                }
            }
        }
        value = next;
    }
    Ok(base + value.iter().copied().fold(f64::INFINITY, f64::min))
}
