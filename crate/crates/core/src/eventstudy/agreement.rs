use crate::error::{Error, Result};

fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64)> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "partitions cover different unit sets: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("partitions must be non-empty"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut n = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        n[x][y] += 1.0;
    }
    let rows: Vec<f64> = n.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..kb).map(|j| n.iter().map(|r| r[j]).sum()).collect();
    Ok((n, rows, cols, a.len() as f64))
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand Index via pair counting: 1 for identical partitions, ~0 for
/// chance-level overlap.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let (n, rows, cols, total) = contingency(a, b)?;
    let sum_ij: f64 = n.iter().flatten().map(|&v| choose2(v)).sum();
    let sum_a: f64 = rows.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = cols.iter().map(|&v| choose2(v)).sum();
    let total2 = choose2(total);
    let expected = sum_a * sum_b / total2;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        // both partitions trivial (all singletons or one block)
        return Ok(if sum_ij == max_index { 1.0 } else { 0.0 });
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// Normalized mutual information 2·I/(H_A + H_B), in [0, 1].
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    let (n, rows, cols, total) = contingency(a, b)?;
    let mut mi = 0.0;
    for (i, row) in n.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += (nij / total) * ((total * nij) / (rows[i] * cols[j])).ln();
            }
        }
    }
    let h = |margin: &[f64]| -> f64 {
        -margin
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| (v / total) * (v / total).ln())
            .sum::<f64>()
    };
    let ha = h(&rows);
    let hb = h(&cols);
    if ha + hb == 0.0 {
        // both partitions put everything in one cluster: identical by definition
        return Ok(1.0);
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}
