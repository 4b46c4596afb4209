//! Bucketed scalable cross-entropy.
//!
//! Random bucket centers (plain Gaussian or the Mix construction) pull in
//! the b_x model outputs and b_y catalog items with the largest dot
//! products; cross-entropy is computed only inside each bucket, and an
//! output placed in several buckets keeps the maximum of its per-bucket
//! losses (the partial denominator closest to the full one). The logit
//! footprint is n_b * b_x * b_y elements instead of s*l*C.
//!
//! Bucket construction runs without gradient tracking; the selection
//! indices enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::memory::TrackedBuf;
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::{top_k, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceConfig {
    pub n_b: usize,
    pub b_x: usize,
    pub b_y: usize,
    /// Build centers as random combinations of the batch's outputs.
    pub use_mix: bool,
    /// Replication-only variant: mix against catalog embeddings instead.
    pub mix_on_y: bool,
    /// Oversampling coefficient of the (n_b, b_x) parametrization.
    pub alpha: f64,
    /// Bucket shape ratio of the parametrization.
    pub beta: f64,
}

impl Default for SceConfig {
    fn default() -> Self {
        SceConfig {
            n_b: 1,
            b_x: 1,
            b_y: 1,
            use_mix: true,
            mix_on_y: false,
            alpha: 2.0,
            beta: 1.0,
        }
    }
}

impl SceConfig {
    pub fn validate(&self, positions: usize, catalog: usize) -> Result<()> {
        if self.n_b < 1 {
            return Err(Error::Param("n_b must be at least 1".into()));
        }
        if self.b_x < 1 || self.b_x > positions {
            return Err(Error::Param(format!(
                "b_x = {} outside [1, s*l = {positions}]",
                self.b_x
            )));
        }
        if self.b_y < 1 || self.b_y > catalog {
            return Err(Error::Param(format!("b_y = {} outside [1, C = {catalog}]", self.b_y)));
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Param("alpha and beta must be positive".into()));
        }
        Ok(())
    }

    /// Fill n_b and b_x from the oversampling parametrization.
    pub fn with_derived(mut self, s: usize, l: usize, l_bar: f64) -> Self {
        let (n_b, b_x) = derive_bucket_params(s, l, l_bar, self.alpha, self.beta);
        self.n_b = n_b;
        self.b_x = b_x;
        self
    }
}

/// `b_x = round(alpha * sqrt(s * l_bar * beta))`,
/// `n_b = round(alpha * sqrt(s * l / beta))`, both clamped to valid ranges
/// (b_x to [1, s*l], n_b to at least 1). `l_bar` is the dataset's average
/// interactions per user.
pub fn derive_bucket_params(
    s: usize,
    l: usize,
    l_bar: f64,
    alpha: f64,
    beta: f64,
) -> (usize, usize) {
    assert!(s >= 1 && l >= 1 && l_bar > 0.0 && alpha > 0.0 && beta > 0.0);
    let b_x = (alpha * (s as f64 * l_bar * beta).sqrt()).round() as usize;
    let n_b = (alpha * (s as f64 * l as f64 / beta).sqrt()).round() as usize;
    (n_b.max(1), b_x.clamp(1, s * l))
}

/// Which model outputs and catalog rows each bucket computes logits for.
/// Entries may repeat across buckets; within a bucket they are distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketAssignment {
    pub n_b: usize,
    pub b_x: usize,
    pub b_y: usize,
    /// n_b x b_x flattened output-row indices (descending projection score).
    pub outputs: Vec<usize>,
    /// n_b x b_y catalog-row indices (0-based).
    pub items: Vec<usize>,
}

impl BucketAssignment {
    pub fn bucket_outputs(&self, b: usize) -> &[usize] {
        &self.outputs[b * self.b_x..(b + 1) * self.b_x]
    }

    pub fn bucket_items(&self, b: usize) -> &[usize] {
        &self.items[b * self.b_y..(b + 1) * self.b_y]
    }
}

/// Plain bucket centers: i.i.d. standard normal, no gradient tracking.
pub fn generate_bucket_centers(n_b: usize, d: usize, rng: &mut RngState) -> Tensor {
    Tensor::randn(vec![n_b, d], rng)
}

/// Project a constant (n_b x m) matrix onto the model outputs: B = Omega X.
pub fn mix_project(omega: &[f64], n_b: usize, x_data: &[f64], m: usize, d: usize) -> Tensor {
    let mut b = Tensor::zeros(vec![n_b, d]);
    kernels::matmul_acc(omega, x_data, n_b, m, d, b.data_mut());
    b
}

/// Mix centers: a fresh Gaussian matrix restricted to non-padded columns,
/// multiplied by the batch outputs. Every call draws a new matrix.
pub fn mix_bucket_centers(
    x_data: &[f64],
    m: usize,
    d: usize,
    n_b: usize,
    mask: &[bool],
    rng: &mut RngState,
    tape: &Tape,
) -> Result<Tensor> {
    debug_assert_eq!(x_data.len(), m * d);
    debug_assert_eq!(mask.len(), m);
    if !mask.iter().any(|&v| v) {
        return Err(Error::EmptyBatch);
    }
    let mut omega = TrackedBuf::zeros(n_b * m, tape.meter());
    {
        let om = omega.as_mut_slice();
        for row in 0..n_b {
            for (col, &real) in mask.iter().enumerate() {
                if real {
                    om[row * m + col] = rng.next_normal();
                }
            }
        }
    }
    Ok(mix_project(omega.as_slice(), n_b, x_data, m, d))
}

/// Select each bucket's outputs and items by largest dot product against
/// its center. Padded output columns are masked to -inf before top-k, so
/// they can never be selected.
pub fn assign_buckets(
    centers: &Tensor,
    x_data: &[f64],
    y_data: &[f64],
    b_x: usize,
    b_y: usize,
    mask: &[bool],
    tape: &Tape,
) -> Result<BucketAssignment> {
    let n_b = centers.rows();
    let d = centers.cols();
    let m = mask.len();
    let c = y_data.len() / d;
    debug_assert_eq!(x_data.len(), m * d);
    let active = mask.iter().filter(|&&v| v).count();
    if b_x > active {
        return Err(Error::Param(format!(
            "b_x = {b_x} exceeds the {active} non-padded positions"
        )));
    }
    if b_y > c {
        return Err(Error::Param(format!("b_y = {b_y} exceeds the catalog size {c}")));
    }

    // Projections of outputs and catalog onto the centers (gradient-free).
    let mut px = TrackedBuf::zeros(n_b * m, tape.meter());
    kernels::matmul_transb_acc(centers.data(), x_data, n_b, d, m, px.as_mut_slice());
    {
        let p = px.as_mut_slice();
        for row in 0..n_b {
            for (col, &real) in mask.iter().enumerate() {
                if !real {
                    p[row * m + col] = f64::NEG_INFINITY;
                }
            }
        }
    }
    let mut outputs = Vec::with_capacity(n_b * b_x);
    for row in 0..n_b {
        outputs.extend(top_k(&px.as_slice()[row * m..(row + 1) * m], b_x)?);
    }
    drop(px);

    let mut py = TrackedBuf::zeros(n_b * c, tape.meter());
    kernels::matmul_transb_acc(centers.data(), y_data, n_b, d, c, py.as_mut_slice());
    let mut items = Vec::with_capacity(n_b * b_y);
    for row in 0..n_b {
        items.extend(top_k(&py.as_slice()[row * c..(row + 1) * c], b_y)?);
    }
    Ok(BucketAssignment { n_b, b_x, b_y, outputs, items })
}

/// Per-step diagnostics and the loss node.
#[derive(Debug, Clone)]
pub struct SceOutput {
    pub node: NodeId,
    pub value: f64,
    /// Fraction of non-padded outputs selected by exactly one bucket.
    pub unique_selection_fraction: f64,
    /// Fraction of the n_b*b_x selected rows whose target sits in their
    /// bucket's item set (counted before masking).
    pub correct_logit_fraction: f64,
    /// Outputs placed in at least one bucket.
    pub covered_positions: usize,
    /// (flattened position, aggregated loss) for every covered output.
    pub per_position: Vec<(usize, f64)>,
}

/// Bucketed cross-entropy with the given (frozen) assignment. Selection
/// indices are constants on the tape; gradients flow only into selected
/// X rows and into Y rows that are selected items or selected targets.
pub fn sce_loss_frozen(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
    assignment: &BucketAssignment,
) -> Result<SceOutput> {
    let (m, _) = tape.dims(x);
    let (c, _) = tape.dims(y);
    if targets.len() != m || mask.len() != m {
        return Err(Error::Shape { op: "sce_loss", detail: "targets/mask length".into() });
    }
    let active = mask.iter().filter(|&&v| v).count();
    if active == 0 {
        return Err(Error::EmptyBatch);
    }
    if assignment.outputs.is_empty() {
        return Err(Error::DegenerateAssignment("no outputs selected in any bucket".into()));
    }
    for (&t, &mk) in targets.iter().zip(mask) {
        if mk && !(1..=c).contains(&t) {
            return Err(Error::Data(format!("target {t} outside [1, {c}]")));
        }
    }

    let n_b = assignment.n_b;
    let b_x = assignment.b_x;

    // Per-bucket loss vectors.
    let mut bucket_nodes = Vec::with_capacity(n_b);
    for b in 0..n_b {
        let rows = assignment.bucket_outputs(b);
        let cols = assignment.bucket_items(b);
        for &r in rows {
            if !mask[r] {
                return Err(Error::DegenerateAssignment(format!(
                    "bucket {b} selected padded position {r}"
                )));
            }
        }
        let tgt_rows: Vec<usize> = rows.iter().map(|&r| targets[r] - 1).collect();
        bucket_nodes.push(tape.bucket_ce_rows(x, y, rows, cols, &tgt_rows)?);
    }

    // Max-aggregation per covered output: scan in (bucket, slot) order and
    // keep the largest loss for each output index.
    let mut best: Vec<Option<(f64, usize)>> = vec![None; m]; // (loss, flat slot)
    for b in 0..n_b {
        let values = tape.data(bucket_nodes[b]);
        for (i, &r) in assignment.bucket_outputs(b).iter().enumerate() {
            let v = values[i];
            let slot = b * b_x + i;
            match &mut best[r] {
                Some((cur, cur_slot)) => {
                    if v > *cur {
                        *cur = v;
                        *cur_slot = slot;
                    }
                }
                None => best[r] = Some((v, slot)),
            }
        }
    }
    let covered: Vec<(usize, f64)> = best
        .iter()
        .enumerate()
        .filter_map(|(p, entry)| entry.map(|(v, _)| (p, v)))
        .collect();
    let covered_positions = covered.len();

    let mut weights = vec![0.0; n_b * b_x];
    for entry in best.iter().flatten() {
        weights[entry.1] = 1.0 / covered_positions as f64;
    }
    let all_losses = tape.concat_rows(&bucket_nodes)?;
    let node = tape.weighted_sum(all_losses, &weights)?;

    // Diagnostics.
    let mut selection_counts = vec![0usize; m];
    for &r in &assignment.outputs {
        selection_counts[r] += 1;
    }
    let unique = selection_counts.iter().filter(|&&cnt| cnt == 1).count();
    let unique_selection_fraction = unique as f64 / active as f64;
    let mut correct_hits = 0usize;
    for b in 0..n_b {
        let items = assignment.bucket_items(b);
        for &r in assignment.bucket_outputs(b) {
            if items.contains(&(targets[r] - 1)) {
                correct_hits += 1;
            }
        }
    }
    let correct_logit_fraction = correct_hits as f64 / (n_b * b_x) as f64;

    Ok(SceOutput {
        node,
        value: tape.value(node),
        unique_selection_fraction,
        correct_logit_fraction,
        covered_positions,
        per_position: covered,
    })
}

/// Full bucketed loss: generate centers (plain or Mix), assign buckets,
/// then compute the frozen loss. `b_x` clamps down to the batch's
/// non-padded count so short final batches keep training.
pub fn sce_loss(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
    config: &SceConfig,
    rng: &mut RngState,
) -> Result<SceOutput> {
    let (m, d) = tape.dims(x);
    let (c, _) = tape.dims(y);
    config.validate(m, c)?;
    let active = mask.iter().filter(|&&v| v).count();
    if active == 0 {
        return Err(Error::EmptyBatch);
    }
    let b_x = config.b_x.min(active);
    let assignment = {
        let centers = if config.use_mix {
            if config.mix_on_y {
                let full = vec![true; c];
                let y_data = tape.data(y).to_vec();
                mix_bucket_centers(&y_data, c, d, config.n_b, &full, rng, tape)?
            } else {
                let x_data = tape.data(x).to_vec();
                mix_bucket_centers(&x_data, m, d, config.n_b, mask, rng, tape)?
            }
        } else {
            generate_bucket_centers(config.n_b, d, rng)
        };
        let x_data = tape.data(x);
        let y_data = tape.data(y);
        assign_buckets(&centers, x_data, y_data, b_x, config.b_y, mask, tape)?
    };
    sce_loss_frozen(tape, x, y, targets, mask, &assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::full_ce;
    use crate::tensor::logsumexp;

    fn rand_mat(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect())
    }

    /// Brute-force oracle: replays assignment and the per-bucket CE with
    /// direct loops and scalar logsumexp, then max-aggregates.
    fn brute_sce(
        x: &Tensor,
        y: &Tensor,
        targets: &[usize],
        assignment: &BucketAssignment,
    ) -> f64 {
        let mut best: std::collections::BTreeMap<usize, f64> = Default::default();
        for b in 0..assignment.n_b {
            let rows = assignment.bucket_outputs(b);
            let cols = assignment.bucket_items(b);
            for &r in rows {
                let xi = x.row(r);
                let t = targets[r] - 1;
                let dot = |row: &[f64]| -> f64 { xi.iter().zip(row).map(|(a, b)| a * b).sum() };
                let pos = dot(y.row(t));
                let mut terms = vec![pos];
                for &j in cols {
                    if j != t {
                        terms.push(dot(y.row(j)));
                    }
                }
                let loss = logsumexp(&terms).unwrap() - pos;
                let e = best.entry(r).or_insert(f64::NEG_INFINITY);
                if loss > *e {
                    *e = loss;
                }
            }
        }
        best.values().sum::<f64>() / best.len() as f64
    }

    #[test]
    fn derive_params_matches_formula() {
        // alpha = 2, beta = 1, s = 128, l = l_bar = 200 -> 320 each.
        let (n_b, b_x) = derive_bucket_params(128, 200, 200.0, 2.0, 1.0);
        assert_eq!((n_b, b_x), (320, 320));
        // With l = l_bar, n_b / b_x = 1 / beta.
        let (n_b4, b_x4) = derive_bucket_params(128, 200, 200.0, 2.0, 4.0);
        let ratio = n_b4 as f64 / b_x4 as f64;
        assert!((ratio - 0.25).abs() < 0.01, "ratio {ratio}");
        // Clamping keeps parameters valid.
        let (n_small, b_small) = derive_bucket_params(1, 1, 1.0, 0.1, 1.0);
        assert!(n_small >= 1 && b_small >= 1);
        let (_, b_huge) = derive_bucket_params(2, 3, 1000.0, 10.0, 1.0);
        assert_eq!(b_huge, 6);
    }

    #[test]
    fn centers_reproducible_and_standard_normal() {
        let a = generate_bucket_centers(40, 50, &mut RngState::from_seed(3));
        let b = generate_bucket_centers(40, 50, &mut RngState::from_seed(3));
        assert_eq!(a, b);
        let n = a.numel() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        // n_b = 1, d = 1 is a single draw from the stream.
        let single = generate_bucket_centers(1, 1, &mut RngState::from_seed(3));
        assert_eq!(single.data()[0], RngState::from_seed(3).next_normal());
    }

    #[test]
    fn fig1_shape_contract() {
        // s = 1, l = 4, C = 5, n_b = 2, b_x = 2, b_y = 2.
        let mut rng = RngState::from_seed(7);
        let x = rand_mat(4, 3, &mut rng);
        let y = rand_mat(5, 3, &mut rng);
        let centers = generate_bucket_centers(2, 3, &mut rng);
        let tape = Tape::new();
        let asg =
            assign_buckets(&centers, x.data(), y.data(), 2, 2, &[true; 4], &tape).unwrap();
        assert_eq!((asg.n_b, asg.b_x, asg.b_y), (2, 2, 2));
        assert_eq!(asg.outputs.len(), 4);
        assert_eq!(asg.items.len(), 4);
        for b in 0..2 {
            let o = asg.bucket_outputs(b);
            let i = asg.bucket_items(b);
            assert_ne!(o[0], o[1], "outputs within a bucket are distinct");
            assert_ne!(i[0], i[1], "items within a bucket are distinct");
        }
    }

    #[test]
    fn assignment_matches_exhaustive_dot_product_oracle() {
        let mut rng = RngState::from_seed(11);
        let x = rand_mat(10, 4, &mut rng);
        let y = rand_mat(12, 4, &mut rng);
        let mut centers = generate_bucket_centers(3, 4, &mut rng);
        // Plant one center equal to an X row.
        centers.data_mut()[..4].copy_from_slice(x.row(6));
        let tape = Tape::new();
        let asg =
            assign_buckets(&centers, x.data(), y.data(), 3, 5, &[true; 10], &tape).unwrap();
        for b in 0..3 {
            let center = &centers.data()[b * 4..(b + 1) * 4];
            let scores: Vec<f64> = (0..10)
                .map(|i| center.iter().zip(x.row(i)).map(|(a, c)| a * c).sum())
                .collect();
            assert_eq!(asg.bucket_outputs(b), top_k(&scores, 3).unwrap().as_slice());
            let iscores: Vec<f64> = (0..12)
                .map(|j| center.iter().zip(y.row(j)).map(|(a, c)| a * c).sum())
                .collect();
            assert_eq!(asg.bucket_items(b), top_k(&iscores, 5).unwrap().as_slice());
        }
        // The planted center selects its own row first (it has the largest
        // self dot product among unit-scale rows here).
        let self_score: f64 = x.row(6).iter().map(|v| v * v).sum();
        let max_other = (0..10)
            .filter(|&i| i != 6)
            .map(|i| x.row(6).iter().zip(x.row(i)).map(|(a, c)| a * c).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max);
        if self_score > max_other {
            assert_eq!(asg.bucket_outputs(0)[0], 6);
        }
    }

    #[test]
    fn padded_positions_never_selected_even_with_extreme_values() {
        let mut rng = RngState::from_seed(13);
        let mut x = rand_mat(6, 3, &mut rng);
        // Rows 0 and 3 are padding carrying huge values.
        for &r in &[0usize, 3] {
            x.row_mut(r).fill(1e6);
        }
        let y = rand_mat(7, 3, &mut rng);
        let mask = [false, true, true, false, true, true];
        let centers = generate_bucket_centers(4, 3, &mut rng);
        let tape = Tape::new();
        let asg = assign_buckets(&centers, x.data(), y.data(), 3, 4, &mask, &tape).unwrap();
        for &r in &asg.outputs {
            assert!(mask[r], "padded position {r} selected");
        }
    }

    #[test]
    fn assign_buckets_rejects_oversized_b_x() {
        let mut rng = RngState::from_seed(17);
        let x = rand_mat(4, 2, &mut rng);
        let y = rand_mat(5, 2, &mut rng);
        let centers = generate_bucket_centers(1, 2, &mut rng);
        let tape = Tape::new();
        let err = assign_buckets(
            &centers,
            x.data(),
            y.data(),
            3,
            2,
            &[true, true, false, false],
            &tape,
        );
        assert!(err.is_err());
    }

    #[test]
    fn mix_single_row_makes_collinear_centers() {
        let mut rng = RngState::from_seed(19);
        let x = rand_mat(5, 4, &mut rng);
        let mask = [false, false, true, false, false];
        let tape = Tape::new();
        let centers =
            mix_bucket_centers(x.data(), 5, 4, 6, &mask, &mut rng, &tape).unwrap();
        let base = x.row(2);
        for b in 0..6 {
            let row = &centers.data()[b * 4..(b + 1) * 4];
            // row = c * base for some scalar c.
            let c = row[0] / base[0];
            for (rv, bv) in row.iter().zip(base) {
                assert!((rv - c * bv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mix_centers_lie_in_row_span_of_outputs() {
        let mut rng = RngState::from_seed(23);
        let m = 6;
        let d = 5;
        let x = rand_mat(m, d, &mut rng);
        let mask = [true, true, false, true, true, true];
        let tape = Tape::new();
        let centers = mix_bucket_centers(x.data(), m, d, 8, &mask, &mut rng, &tape).unwrap();
        // Least-squares residual of projecting each center onto the active
        // rows must vanish (solve the normal equations by elimination).
        let active: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        let a = active.len();
        for bi in 0..8 {
            let target = &centers.data()[bi * d..(bi + 1) * d];
            // Gram matrix G[i][j] = x_i . x_j, rhs r[i] = x_i . target
            let mut g = vec![0.0; a * a];
            let mut r = vec![0.0; a];
            for (ii, &i) in active.iter().enumerate() {
                for (jj, &j) in active.iter().enumerate() {
                    g[ii * a + jj] = x.row(i).iter().zip(x.row(j)).map(|(p, q)| p * q).sum();
                }
                r[ii] = x.row(i).iter().zip(target).map(|(p, q)| p * q).sum();
            }
            // Gaussian elimination.
            let mut w = r.clone();
            let mut gm = g.clone();
            for col in 0..a {
                let piv = (col..a).max_by(|&p, &q| {
                    gm[p * a + col].abs().partial_cmp(&gm[q * a + col].abs()).unwrap()
                }).unwrap();
                for t in 0..a {
                    gm.swap(col * a + t, piv * a + t);
                }
                w.swap(col, piv);
                for row in 0..a {
                    if row != col && gm[row * a + col].abs() > 0.0 {
                        let f = gm[row * a + col] / gm[col * a + col];
                        for t in 0..a {
                            gm[row * a + t] -= f * gm[col * a + t];
                        }
                        w[row] -= f * w[col];
                    }
                }
            }
            let coef: Vec<f64> = (0..a).map(|i| w[i] / gm[i * a + i]).collect();
            let mut recon = vec![0.0; d];
            for (ii, &i) in active.iter().enumerate() {
                for (t, rv) in recon.iter_mut().enumerate() {
                    *rv += coef[ii] * x.at(i, t);
                }
            }
            let resid: f64 = recon
                .iter()
                .zip(target)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            assert!(resid <= 1e-8, "center {bi} residual {resid}");
        }
    }

    #[test]
    fn mix_with_one_hot_omega_selects_rows() {
        let mut rng = RngState::from_seed(29);
        let x = rand_mat(4, 3, &mut rng);
        // One-hot rows 2 and 0.
        let omega = vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let b = mix_project(&omega, 2, x.data(), 4, 3);
        assert_eq!(&b.data()[0..3], x.row(2));
        assert_eq!(&b.data()[3..6], x.row(0));
    }

    #[test]
    fn mix_mean_is_near_zero() {
        let mut rng = RngState::from_seed(31);
        let x = rand_mat(8, 3, &mut rng);
        let mask = [true; 8];
        let tape = Tape::new();
        // Average many center draws; E[Omega] = 0 implies E[B] = 0.
        let mut acc = vec![0.0; 3];
        let reps = 3000;
        for _ in 0..reps {
            let b = mix_bucket_centers(x.data(), 8, 3, 1, &mask, &mut rng, &tape).unwrap();
            for (a, v) in acc.iter_mut().zip(b.data()) {
                *a += v;
            }
        }
        for a in &acc {
            let mean = a / reps as f64;
            assert!(mean.abs() < 0.2, "mean {mean}");
        }
    }

    #[test]
    fn full_coverage_equals_full_ce_in_value_and_gradients() {
        let mut rng = RngState::from_seed(37);
        for _ in 0..25 {
            let (m, c, d) = (
                2 + rng.next_below(6) as usize,
                3 + rng.next_below(10) as usize,
                2 + rng.next_below(5) as usize,
            );
            let x = rand_mat(m, d, &mut rng);
            let y = rand_mat(c, d, &mut rng);
            let mut mask = vec![true; m];
            if m > 2 {
                mask[0] = false;
            }
            let targets: Vec<usize> = mask
                .iter()
                .map(|&mk| if mk { 1 + rng.next_below(c as u64) as usize } else { 0 })
                .collect();
            let active = mask.iter().filter(|&&v| v).count();

            let mut t1 = Tape::new();
            let x1 = t1.leaf(&x, true);
            let y1 = t1.leaf(&y, true);
            let cfg = SceConfig {
                n_b: 1,
                b_x: active,
                b_y: c,
                use_mix: false,
                ..Default::default()
            };
            let sce = sce_loss(&mut t1, x1, y1, &targets, &mask, &cfg, &mut rng).unwrap();
            t1.backward(sce.node).unwrap();

            let mut t2 = Tape::new();
            let x2 = t2.leaf(&x, true);
            let y2 = t2.leaf(&y, true);
            let ce = full_ce(&mut t2, x2, y2, &targets, &mask).unwrap();
            t2.backward(ce.node).unwrap();

            let rel = (sce.value - ce.value).abs() / ce.value.abs().max(1e-300);
            assert!(rel <= 1e-10, "value rel {rel}");
            let gx1 = t1.grad_tensor(x1);
            let gx2 = t2.grad_tensor(x2);
            let gy1 = t1.grad_tensor(y1);
            let gy2 = t2.grad_tensor(y2);
            let rel_g = crate::grad_check::rel_error(gx1.data(), gx2.data())
                .max(crate::grad_check::rel_error(gy1.data(), gy2.data()));
            assert!(rel_g <= 1e-10, "grad rel {rel_g}");
            assert_eq!(sce.covered_positions, active);
            if cfg.n_b == 1 {
                assert_eq!(sce.unique_selection_fraction, 1.0);
            }
        }
    }

    #[test]
    fn sce_loss_matches_brute_force_on_micro_fixture() {
        // s=1, l=4, C=5, n_b=2, b_x=2, b_y=2 with hand-fixed values.
        let x = Tensor::matrix(
            4,
            3,
            vec![
                0.9, -0.2, 0.1, //
                -0.4, 0.8, 0.3, //
                0.2, 0.1, -0.7, //
                0.6, 0.5, 0.4,
            ],
        );
        let y = Tensor::matrix(
            5,
            3,
            vec![
                1.0, 0.0, 0.2, //
                -0.3, 0.9, 0.1, //
                0.4, 0.4, -0.5, //
                0.0, -0.6, 0.8, //
                0.7, 0.3, 0.3,
            ],
        );
        let centers = Tensor::matrix(2, 3, vec![1.0, 0.1, 0.0, -0.2, 0.9, 0.4]);
        let targets = vec![2usize, 3, 5, 1];
        let mask = vec![true; 4];

        let tape0 = Tape::new();
        let asg =
            assign_buckets(&centers, x.data(), y.data(), 2, 2, &mask, &tape0).unwrap();
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let out = sce_loss_frozen(&mut tape, lx, ly, &targets, &mask, &asg).unwrap();
        let oracle = brute_sce(&x, &y, &targets, &asg);
        assert!((out.value - oracle).abs() < 1e-12, "{} vs {oracle}", out.value);
        // Golden value frozen from the brute-force oracle.
        assert!((out.value - 1.506854654137239).abs() < 1e-12, "got {}", out.value);
    }

    #[test]
    fn sce_loss_matches_brute_force_randomized() {
        let mut rng = RngState::from_seed(41);
        for _ in 0..50 {
            let (m, c, d) = (
                3 + rng.next_below(8) as usize,
                4 + rng.next_below(12) as usize,
                2 + rng.next_below(4) as usize,
            );
            let x = rand_mat(m, d, &mut rng);
            let y = rand_mat(c, d, &mut rng);
            let mask = vec![true; m];
            let targets: Vec<usize> =
                (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
            let n_b = 1 + rng.next_below(3) as usize;
            let b_x = 1 + rng.next_below(m as u64) as usize;
            let b_y = 1 + rng.next_below(c as u64) as usize;
            let centers = generate_bucket_centers(n_b, d, &mut rng);
            let tape0 = Tape::new();
            let asg =
                assign_buckets(&centers, x.data(), y.data(), b_x, b_y, &mask, &tape0).unwrap();
            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            let out = sce_loss_frozen(&mut tape, lx, ly, &targets, &mask, &asg).unwrap();
            let oracle = brute_sce(&x, &y, &targets, &asg);
            assert!((out.value - oracle).abs() < 1e-11, "{} vs {oracle}", out.value);
        }
    }

    #[test]
    fn per_position_loss_never_exceeds_full_ce() {
        let mut rng = RngState::from_seed(43);
        for _ in 0..100 {
            let (m, c, d) = (
                2 + rng.next_below(8) as usize,
                3 + rng.next_below(16) as usize,
                2 + rng.next_below(5) as usize,
            );
            let x = rand_mat(m, d, &mut rng);
            let y = rand_mat(c, d, &mut rng);
            let mask = vec![true; m];
            let targets: Vec<usize> =
                (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            let cfg = SceConfig {
                n_b: 1 + rng.next_below(3) as usize,
                b_x: 1 + rng.next_below(m as u64) as usize,
                b_y: 1 + rng.next_below(c as u64) as usize,
                use_mix: rng.next_f64() < 0.5,
                ..Default::default()
            };
            let sce = sce_loss(&mut tape, lx, ly, &targets, &mask, &cfg, &mut rng).unwrap();
            let ce = full_ce(&mut tape, lx, ly, &targets, &mask).unwrap();
            for &(p, v) in &sce.per_position {
                assert!(
                    v <= ce.per_position[p] + 1e-12,
                    "position {p}: sce {v} > ce {}",
                    ce.per_position[p]
                );
            }
            assert!(sce.unique_selection_fraction >= 0.0 && sce.unique_selection_fraction <= 1.0);
            assert!(sce.correct_logit_fraction >= 0.0 && sce.correct_logit_fraction <= 1.0);
        }
    }

    #[test]
    fn adding_a_bucket_never_decreases_aggregated_losses() {
        let mut rng = RngState::from_seed(47);
        let (m, c, d) = (8, 10, 3);
        let x = rand_mat(m, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let mask = vec![true; m];
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let centers3 = generate_bucket_centers(3, d, &mut rng);
        let tape0 = Tape::new();
        let asg3 = assign_buckets(&centers3, x.data(), y.data(), 4, 5, &mask, &tape0).unwrap();
        // Drop the last bucket for the 2-bucket assignment.
        let asg2 = BucketAssignment {
            n_b: 2,
            b_x: 4,
            b_y: 5,
            outputs: asg3.outputs[..8].to_vec(),
            items: asg3.items[..10].to_vec(),
        };
        let run = |asg: &BucketAssignment| {
            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            sce_loss_frozen(&mut tape, lx, ly, &targets, &mask, asg).unwrap()
        };
        let small = run(&asg2);
        let large = run(&asg3);
        let per2: std::collections::BTreeMap<usize, f64> = small.per_position.iter().copied().collect();
        for &(p, v3) in &large.per_position {
            if let Some(&v2) = per2.get(&p) {
                assert!(v3 >= v2 - 1e-12, "position {p}: {v3} < {v2}");
            }
        }
        assert!(large.covered_positions >= small.covered_positions);
    }

    #[test]
    fn gradient_sparsity_untouched_rows_get_zero() {
        let mut rng = RngState::from_seed(53);
        let (m, c, d) = (6, 12, 3);
        let x = rand_mat(m, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let mask = vec![true; m];
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let cfg = SceConfig { n_b: 2, b_x: 3, b_y: 4, use_mix: false, ..Default::default() };
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, true);
        let ly = tape.leaf(&y, true);
        // Recover the assignment deterministically to know touched rows.
        let mut rng_a = RngState::from_seed(99);
        let mut rng_b = rng_a.clone();
        let centers = generate_bucket_centers(cfg.n_b, d, &mut rng_a);
        let asg = assign_buckets(&centers, x.data(), y.data(), cfg.b_x, cfg.b_y, &mask, &tape)
            .unwrap();
        let sce = sce_loss(&mut tape, lx, ly, &targets, &mask, &cfg, &mut rng_b).unwrap();
        tape.backward(sce.node).unwrap();

        let mut touched_y: std::collections::BTreeSet<usize> = asg.items.iter().copied().collect();
        for &r in &asg.outputs {
            touched_y.insert(targets[r] - 1);
        }
        let touched_x: std::collections::BTreeSet<usize> = asg.outputs.iter().copied().collect();
        let gx = tape.grad_tensor(lx);
        let gy = tape.grad_tensor(ly);
        for r in 0..m {
            let zero = gx.row(r).iter().all(|&v| v == 0.0);
            assert_eq!(zero, !touched_x.contains(&r), "x row {r}");
        }
        for r in 0..c {
            if !touched_y.contains(&r) {
                assert!(gy.row(r).iter().all(|&v| v == 0.0), "y row {r} should be untouched");
            }
        }
    }

    #[test]
    fn sce_loss_clamps_b_x_to_short_batches() {
        let mut rng = RngState::from_seed(59);
        let x = rand_mat(4, 3, &mut rng);
        let y = rand_mat(5, 3, &mut rng);
        let mask = vec![true, false, false, false];
        let targets = vec![2, 0, 0, 0];
        let cfg = SceConfig { n_b: 2, b_x: 3, b_y: 2, use_mix: false, ..Default::default() };
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let out = sce_loss(&mut tape, lx, ly, &targets, &mask, &cfg, &mut rng).unwrap();
        assert_eq!(out.covered_positions, 1);
    }

    #[test]
    fn logit_block_memory_scales_with_b_y_only() {
        let mut rng = RngState::from_seed(61);
        let (m, c, d) = (32, 64, 8);
        let x = rand_mat(m, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let mask = vec![true; m];
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let peak = |b_y: usize| -> u64 {
            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            let cfg =
                SceConfig { n_b: 4, b_x: 8, b_y, use_mix: false, ..Default::default() };
            tape.meter().begin_window();
            let out =
                sce_loss(&mut tape, lx, ly, &targets, &mask, &cfg, &mut RngState::from_seed(5))
                    .unwrap();
            tape.backward(out.node).unwrap();
            tape.meter().window_peak_elements()
        };
        let p16 = peak(16);
        let p32 = peak(32);
        // Doubling b_y adds n_b*b_x*16 logit elements plus nothing else.
        let logit_growth = (4 * 8 * 16) as i64;
        let grow = p32 as i64 - p16 as i64;
        assert!(
            (grow - logit_growth).abs() <= logit_growth / 8,
            "peak grew by {grow}, expected about {logit_growth}"
        );
    }
}
