//! Brute-force check that the client-level minimax objective (a max over the
//! client simplex) and the quality-group minimax objective (a max over the
//! group simplex) select the same model, given that clients sharing a quality
//! attribute have equal risks.
//!
//! Both inner maxima are taken over a regular grid on the simplex, so no LP
//! solver is involved.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ColumnCheck {
    /// Max over the client-simplex grid of `lambda . r`.
    pub client_max: f64,
    /// Max over the group-simplex grid of `mu . R`.
    pub group_max: f64,
    /// `max_k r_k`.
    pub row_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimaxReport {
    pub columns: Vec<ColumnCheck>,
    pub client_value: f64,
    pub group_value: f64,
    pub client_argmin: usize,
    pub group_argmin: usize,
    /// Grid maximizer over the client simplex for the selected column.
    pub lambda_star: Vec<f64>,
    /// `mu*_u = sum_k 1[a_k = u] lambda*_k`.
    pub mu_star: Vec<f64>,
    pub maxima_agree: bool,
    pub argmin_agrees: bool,
    pub aggregation_holds: bool,
    pub tolerance: f64,
}

impl MinimaxReport {
    pub fn holds(&self) -> bool {
        self.maxima_agree && self.argmin_agrees && self.aggregation_holds
    }
}

/// Maximizes `w . r` over `{ w = c / n : c in N^k, sum c = n }` by full
/// enumeration. Returns the value and the first maximizing grid point.
pub fn max_over_simplex_grid(r: &[f64], n: usize) -> (f64, Vec<f64>) {
    fn walk(r: &[f64], i: usize, left: usize, acc: f64, n: f64, counts: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if i + 1 == r.len() {
            counts[i] = left;
            let value = acc + r[i] * left as f64 / n;
            if value > best.0 {
                best.0 = value;
                best.1.clone_from(counts);
            }
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            walk(r, i + 1, left - c, acc + r[i] * c as f64 / n, n, counts, best);
        }
    }
    let mut counts = vec![0; r.len()];
    let mut best = (f64::NEG_INFINITY, vec![0; r.len()]);
    walk(r, 0, n, 0.0, n as f64, &mut counts, &mut best);
    let point = best.1.iter().map(|&c| c as f64 / n as f64).collect();
    (best.0, point)
}

fn first_argmin(values: &[f64], tol: f64) -> usize {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter().position(|&v| v <= min + tol).expect("non-empty")
}

/// `risk_table[k][m]` is the risk of candidate model `m` on client `k`;
/// `attributes[k]` is client `k`'s quality attribute. Attributes must cover
/// `0..A` and rows within an attribute must be identical.
pub fn verify_minimax_equivalence(
    risk_table: &[Vec<f64>],
    attributes: &[usize],
    grid_resolution: f64,
) -> Result<MinimaxReport> {
    let k = risk_table.len();
    if k == 0 {
        return Err(Error::InvalidArgument("risk table has no clients".into()));
    }
    if attributes.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: attributes.len(),
            context: "attribute list",
        });
    }
    let m = risk_table[0].len();
    if m == 0 || risk_table.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidArgument(
            "risk table rows must be non-empty and of equal length".into(),
        ));
    }
    if risk_table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("risk table"));
    }
    if !(grid_resolution > 0.0 && grid_resolution <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "grid resolution must lie in (0, 1], got {grid_resolution}"
        )));
    }
    let steps = (1.0 / grid_resolution).round() as usize;
    let tol = grid_resolution;

    let groups = attributes.iter().max().expect("k > 0") + 1;
    let mut group_rows: Vec<Option<&Vec<f64>>> = vec![None; groups];
    for (row, &a) in risk_table.iter().zip(attributes) {
        match group_rows[a] {
            None => group_rows[a] = Some(row),
            Some(first) if first != row => {
                return Err(Error::PremiseViolated(format!(
                    "clients with attribute {a} have different risks: {first:?} vs {row:?}"
                )))
            }
            Some(_) => {}
        }
    }
    let group_rows: Vec<&Vec<f64>> = group_rows
        .into_iter()
        .enumerate()
        .map(|(u, r)| r.ok_or_else(|| Error::PremiseViolated(format!("no client has attribute {u}"))))
        .collect::<Result<_>>()?;

    let mut columns = Vec::with_capacity(m);
    let mut maximizers = Vec::with_capacity(m);
    for col in 0..m {
        let client_r: Vec<f64> = risk_table.iter().map(|row| row[col]).collect();
        let group_r: Vec<f64> = group_rows.iter().map(|row| row[col]).collect();
        let (client_max, lambda) = max_over_simplex_grid(&client_r, steps);
        let (group_max, _) = max_over_simplex_grid(&group_r, steps);
        let row_max = client_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        columns.push(ColumnCheck {
            client_max,
            group_max,
            row_max,
        });
        maximizers.push(lambda);
    }

    let maxima_agree = columns
        .iter()
        .all(|c| (c.client_max - c.group_max).abs() <= tol && (c.client_max - c.row_max).abs() <= tol);

    let client_vals: Vec<f64> = columns.iter().map(|c| c.client_max).collect();
    let group_vals: Vec<f64> = columns.iter().map(|c| c.group_max).collect();
    let client_argmin = first_argmin(&client_vals, tol);
    let group_argmin = first_argmin(&group_vals, tol);

    let lambda_star = maximizers.swap_remove(client_argmin);
    let mut mu_star = vec![0.0; groups];
    for (&a, l) in attributes.iter().zip(&lambda_star) {
        mu_star[a] += l;
    }
    let mu_value: f64 = mu_star
        .iter()
        .zip(&group_rows)
        .map(|(mu, row)| mu * row[client_argmin])
        .sum();
    let mu_on_simplex = mu_star.iter().all(|&v| v >= 0.0) && (mu_star.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    let aggregation_holds = mu_on_simplex && (mu_value - columns[client_argmin].group_max).abs() <= tol;

    Ok(MinimaxReport {
        client_value: client_vals[client_argmin],
        group_value: group_vals[group_argmin],
        client_argmin,
        group_argmin,
        lambda_star,
        mu_star,
        maxima_agree,
        argmin_agrees: client_argmin == group_argmin,
        aggregation_holds,
        tolerance: tol,
        columns,
    })
}
