//! Baseline losses over (X, Y): full cross-entropy, binary cross-entropy
//! with one or k sampled negatives, and sampled cross-entropy, plus the
//! uniform negative sampler they share.
//!
//! All losses average over non-padded positions. `targets` are dense item
//! ids (1..=C, 0 at padding); internally items map to catalog rows 0..C-1.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tape::{NodeId, Tape, INACTIVE};

/// Per-position uniform negatives, excluding each position's own target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub k: usize,
    /// positions x k catalog-row indices (0-based), row-major.
    pub rows: Vec<usize>,
}

/// Sample k negatives per position, uniform over the catalog minus the
/// position's target. Padded positions (target 0) draw uniformly over the
/// whole catalog; their losses carry zero weight anyway.
pub fn sample_negatives(
    targets: &[usize],
    k: usize,
    catalog: usize,
    rng: &mut RngState,
) -> Result<NegativeSet> {
    if k == 0 || k > catalog.saturating_sub(1) {
        return Err(Error::Param(format!(
            "k = {k} negatives out of range [1, C-1] with C = {catalog}"
        )));
    }
    let mut rows = Vec::with_capacity(targets.len() * k);
    for &t in targets {
        if t == 0 {
            for _ in 0..k {
                rows.push(rng.next_below(catalog as u64) as usize);
            }
        } else {
            debug_assert!(t <= catalog);
            let t_row = t - 1;
            for _ in 0..k {
                // Uniform over C-1 rows, shifted past the target.
                let v = rng.next_below((catalog - 1) as u64) as usize;
                rows.push(if v >= t_row { v + 1 } else { v });
            }
        }
    }
    Ok(NegativeSet { k, rows })
}

/// Loss value plus the tape node it came from.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub node: NodeId,
    pub value: f64,
    pub positions_counted: usize,
    /// Per flattened position; zero at padding.
    pub per_position: Vec<f64>,
}

fn check_targets(targets: &[usize], mask: &[bool], catalog: usize) -> Result<usize> {
    if targets.len() != mask.len() {
        return Err(Error::Shape { op: "loss", detail: "targets/mask length".into() });
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::EmptyBatch);
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && !(1..=catalog).contains(&t) {
            return Err(Error::Data(format!("target {t} outside [1, {catalog}]")));
        }
    }
    Ok(active)
}

fn target_rows(targets: &[usize], mask: &[bool]) -> Vec<usize> {
    targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t - 1 } else { INACTIVE })
        .collect()
}

fn mean_weights(mask: &[bool], active: usize) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 / active as f64 } else { 0.0 }).collect()
}

fn check_negatives(
    negatives: &NegativeSet,
    targets: &[usize],
    mask: &[bool],
    positions: usize,
) -> Result<()> {
    if negatives.rows.len() != positions * negatives.k {
        return Err(Error::Shape { op: "loss", detail: "negative set layout".into() });
    }
    for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let t_row = t - 1;
            for j in 0..negatives.k {
                if negatives.rows[p * negatives.k + j] == t_row {
                    return Err(Error::Param(format!(
                        "negative equals the positive at position {p}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn finish(
    tape: &mut Tape,
    loss_vec: NodeId,
    mask: &[bool],
    active: usize,
) -> Result<LossOutput> {
    let per_position = tape.data(loss_vec).to_vec();
    let weights = mean_weights(mask, active);
    let node = tape.weighted_sum(loss_vec, &weights)?;
    Ok(LossOutput { node, value: tape.value(node), positions_counted: active, per_position })
}

/// Full cross-entropy over the catalog, fused kernel route.
pub fn full_ce(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
) -> Result<LossOutput> {
    let (c, _) = tape.dims(y);
    let active = check_targets(targets, mask, c)?;
    let rows = target_rows(targets, mask);
    let loss_vec = tape.ce_rows(x, y, &rows)?;
    finish(tape, loss_vec, mask, active)
}

/// Full cross-entropy built from an explicit logit node via generic ops;
/// the reference route for gradient-of-logits checks and oracle tests.
pub fn ce_from_logits(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    mask: &[bool],
) -> Result<LossOutput> {
    let (m, c) = tape.dims(logits);
    let active = check_targets(targets, mask, c)?;
    if targets.len() != m {
        return Err(Error::Shape { op: "ce_from_logits", detail: "targets/rows".into() });
    }
    let rows = target_rows(targets, mask);
    let lse = tape.logsumexp_rows(logits)?;
    let pos = tape.gather_cols(logits, &rows)?;
    let loss_vec = tape.sub(lse, pos)?;
    finish(tape, loss_vec, mask, active)
}

/// Full cross-entropy via materialized logits = X Y^T (generic-op route).
pub fn full_ce_reference(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
) -> Result<LossOutput> {
    let logits = tape.matmul_transb(x, y)?;
    ce_from_logits(tape, logits, targets, mask)
}

/// Binary cross-entropy with exactly one negative per position.
pub fn bce(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
    negatives: &NegativeSet,
) -> Result<LossOutput> {
    if negatives.k != 1 {
        return Err(Error::Param(format!("bce requires k = 1, got {}", negatives.k)));
    }
    bce_plus(tape, x, y, targets, mask, negatives)
}

/// Binary cross-entropy with k negatives:
/// `-log sigma(pos) - sum_j log(1 - sigma(neg_j))`.
pub fn bce_plus(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
    negatives: &NegativeSet,
) -> Result<LossOutput> {
    let (c, _) = tape.dims(y);
    let active = check_targets(targets, mask, c)?;
    check_negatives(negatives, targets, mask, targets.len())?;
    let rows = target_rows(targets, mask);
    let loss_vec = tape.sampled_bce_rows(x, y, &rows, &negatives.rows, negatives.k)?;
    finish(tape, loss_vec, mask, active)
}

/// Sampled cross-entropy: softmax over the positive plus k negatives.
pub fn ce_minus(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    targets: &[usize],
    mask: &[bool],
    negatives: &NegativeSet,
) -> Result<LossOutput> {
    let (c, _) = tape.dims(y);
    let active = check_targets(targets, mask, c)?;
    check_negatives(negatives, targets, mask, targets.len())?;
    let rows = target_rows(targets, mask);
    let loss_vec = tape.sampled_ce_rows(x, y, &rows, &negatives.rows, negatives.k)?;
    finish(tape, loss_vec, mask, active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softplus, Tensor};

    fn rand_mat(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_normal()).collect())
    }

    /// Direct-summation oracle for mean CE over non-padded positions.
    fn brute_ce(x: &Tensor, y: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
        let d = x.cols();
        let c = y.rows();
        let mut total = 0.0;
        let mut n = 0;
        for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let xi = x.row(p);
            let logits: Vec<f64> =
                (0..c).map(|j| (0..d).map(|q| xi[q] * y.at(j, q)).sum()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            total += denom - logits[t - 1];
            n += 1;
        }
        total / n as f64
    }

    #[test]
    fn ce_closed_form_one_hot_alpha() {
        // Y rows are the standard basis, X row is alpha * e_t:
        // loss = -log(e^alpha / (C - 1 + e^alpha)).
        let c = 6;
        let alpha = 1.7;
        let y = Tensor::matrix(
            c,
            c,
            (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect(),
        );
        let t = 3usize; // item id 3 -> row 2
        let mut xdata = vec![0.0; c];
        xdata[t - 1] = alpha;
        let x = Tensor::matrix(1, c, xdata);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let out = full_ce(&mut tape, lx, ly, &[t], &[true]).unwrap();
        let expect = -(alpha.exp() / ((c - 1) as f64 + alpha.exp())).ln();
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_all_zero_logits_is_log_c() {
        let c = 9;
        let x = Tensor::matrix(2, 4, vec![0.0; 8]);
        let mut rng = RngState::from_seed(2);
        let y = rand_mat(c, 4, &mut rng);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let out = full_ce(&mut tape, lx, ly, &[1, 5], &[true, true]).unwrap();
        assert!((out.value - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_brute_force_and_reference_route() {
        let mut rng = RngState::from_seed(5);
        for _ in 0..20 {
            let (s, l, c, d) = (2, 3, 7, 4);
            let m = s * l;
            let x = rand_mat(m, d, &mut rng);
            let y = rand_mat(c, d, &mut rng);
            let targets: Vec<usize> =
                (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
            let mut mask = vec![true; m];
            mask[0] = false; // one padded position
            let mut targets = targets;
            targets[0] = 0;

            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            let fused = full_ce(&mut tape, lx, ly, &targets, &mask).unwrap();
            let oracle = brute_ce(&x, &y, &targets, &mask);
            assert!((fused.value - oracle).abs() < 1e-10, "{} vs {oracle}", fused.value);

            let mut tape2 = Tape::new();
            let lx2 = tape2.leaf(&x, false);
            let ly2 = tape2.leaf(&y, false);
            let reference = full_ce_reference(&mut tape2, lx2, ly2, &targets, &mask).unwrap();
            assert!((fused.value - reference.value).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_empty_batch_errors() {
        let x = Tensor::matrix(2, 2, vec![0.0; 4]);
        let y = Tensor::matrix(3, 2, vec![0.0; 6]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let err = full_ce(&mut tape, lx, ly, &[0, 0], &[false, false]);
        assert!(matches!(err, Err(Error::EmptyBatch)));
    }

    #[test]
    fn losses_ignore_injected_padded_rows() {
        let mut rng = RngState::from_seed(7);
        let (c, d) = (8, 3);
        let x = rand_mat(4, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let targets = vec![2, 5, 1, 7];
        let mask = vec![true; 4];
        // Extended copies with two padded rows appended.
        let mut x6 = x.data().to_vec();
        x6.extend([9.0; 6]); // junk values at padded rows
        let x6 = Tensor::matrix(6, d, x6);
        let mut targets6 = targets.clone();
        targets6.extend([0, 0]);
        let mut mask6 = mask.clone();
        mask6.extend([false, false]);

        let negatives = sample_negatives(&targets, 3, c, &mut RngState::from_seed(42)).unwrap();
        let negatives6 =
            NegativeSet { k: 3, rows: [negatives.rows.clone(), vec![0, 1, 2, 3, 4, 5]].concat() };

        let run = |xt: &Tensor, tg: &[usize], mk: &[bool], ng: &NegativeSet| -> [f64; 3] {
            let mut tape = Tape::new();
            let lx = tape.leaf(xt, false);
            let ly = tape.leaf(&y, false);
            [
                full_ce(&mut tape, lx, ly, tg, mk).unwrap().value,
                bce_plus(&mut tape, lx, ly, tg, mk, ng).unwrap().value,
                ce_minus(&mut tape, lx, ly, tg, mk, ng).unwrap().value,
            ]
        };
        let a = run(&x, &targets, &mask, &negatives);
        let b = run(&x6, &targets6, &mask6, &negatives6);
        for (va, vb) in a.iter().zip(&b) {
            assert!((va - vb).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_zero_logits_is_two_log_two() {
        let x = Tensor::matrix(1, 3, vec![0.0; 3]);
        let y = Tensor::matrix(4, 3, vec![0.5; 12]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let negatives = NegativeSet { k: 1, rows: vec![2] };
        let out = bce(&mut tape, lx, ly, &[1], &[true], &negatives).unwrap();
        assert!((out.value - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_limit_perfect_prediction_goes_to_zero() {
        // pos -> +inf, neg -> -inf: loss -> 0.
        let x = Tensor::matrix(1, 2, vec![30.0, 0.0]);
        let y = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let negatives = NegativeSet { k: 1, rows: vec![1] };
        let out = bce(&mut tape, lx, ly, &[1], &[true], &negatives).unwrap();
        assert!(out.value < 1e-12);
        assert!(out.value >= 0.0);
    }

    #[test]
    fn bce_rejects_negative_equal_to_positive_and_wrong_k() {
        let x = Tensor::matrix(1, 2, vec![0.0; 2]);
        let y = Tensor::matrix(3, 2, vec![0.0; 6]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let bad = NegativeSet { k: 1, rows: vec![0] };
        assert!(bce(&mut tape, lx, ly, &[1], &[true], &bad).is_err());
        let two = NegativeSet { k: 2, rows: vec![1, 2] };
        assert!(bce(&mut tape, lx, ly, &[1], &[true], &two).is_err());
    }

    #[test]
    fn bce_plus_matches_direct_formula_and_reduces_to_bce() {
        let mut rng = RngState::from_seed(11);
        let (c, d, m) = (9, 4, 5);
        let x = rand_mat(m, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let mask = vec![true; m];
        let negatives = sample_negatives(&targets, 4, c, &mut rng).unwrap();

        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let out = bce_plus(&mut tape, lx, ly, &targets, &mask, &negatives).unwrap();

        // Scalar recomputation.
        let mut expect = 0.0;
        for p in 0..m {
            let xi = x.row(p);
            let dotr = |row: usize| -> f64 { xi.iter().zip(y.row(row)).map(|(a, b)| a * b).sum() };
            let mut v = softplus(-dotr(targets[p] - 1));
            for j in 0..4 {
                v += softplus(dotr(negatives.rows[p * 4 + j]));
            }
            expect += v / m as f64;
        }
        assert!((out.value - expect).abs() < 1e-12);

        // k = 1 reduces exactly to bce.
        let neg1 = sample_negatives(&targets, 1, c, &mut RngState::from_seed(3)).unwrap();
        let mut t1 = Tape::new();
        let lx1 = t1.leaf(&x, false);
        let ly1 = t1.leaf(&y, false);
        let v_plus = bce_plus(&mut t1, lx1, ly1, &targets, &mask, &neg1).unwrap().value;
        let mut t2 = Tape::new();
        let lx2 = t2.leaf(&x, false);
        let ly2 = t2.leaf(&y, false);
        let v_bce = bce(&mut t2, lx2, ly2, &targets, &mask, &neg1).unwrap().value;
        assert_eq!(v_plus, v_bce);
    }

    #[test]
    fn bce_plus_all_zero_logits_k4_is_five_log_two() {
        let x = Tensor::matrix(1, 2, vec![0.0; 2]);
        let y = Tensor::matrix(6, 2, vec![0.0; 12]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let negatives = NegativeSet { k: 4, rows: vec![1, 2, 3, 4] };
        let out = bce_plus(&mut tape, lx, ly, &[1], &[true], &negatives).unwrap();
        assert!((out.value - 5.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_minus_with_exhaustive_negatives_equals_full_ce() {
        let mut rng = RngState::from_seed(13);
        let (c, d, m) = (7, 3, 4);
        let x = rand_mat(m, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let mask = vec![true; m];
        // Exhaustive negatives: the whole catalog minus each target.
        let mut rows = Vec::new();
        for &t in &targets {
            for j in 0..c {
                if j != t - 1 {
                    rows.push(j);
                }
            }
        }
        let negatives = NegativeSet { k: c - 1, rows };
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let sampled = ce_minus(&mut tape, lx, ly, &targets, &mask, &negatives).unwrap();
        let full = full_ce(&mut tape, lx, ly, &targets, &mask).unwrap();
        let rel = (sampled.value - full.value).abs() / full.value.abs().max(1e-12);
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn ce_minus_all_equal_logits_is_log_k_plus_one() {
        let x = Tensor::matrix(1, 2, vec![0.0; 2]);
        let y = Tensor::matrix(8, 2, vec![0.3; 16]);
        let mut tape = Tape::new();
        let lx = tape.leaf(&x, false);
        let ly = tape.leaf(&y, false);
        let k = 5;
        let negatives = NegativeSet { k, rows: vec![1, 2, 3, 4, 5] };
        let out = ce_minus(&mut tape, lx, ly, &[1], &[true], &negatives).unwrap();
        assert!((out.value - ((k + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_minus_monotone_in_k_for_nested_sets() {
        let mut rng = RngState::from_seed(17);
        let (c, d) = (12, 4);
        let x = rand_mat(1, d, &mut rng);
        let y = rand_mat(c, d, &mut rng);
        let target = vec![3usize];
        let mask = vec![true];
        let pool = sample_negatives(&target, 8, c, &mut rng).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=8 {
            let negatives = NegativeSet { k, rows: pool.rows[..k].to_vec() };
            let mut tape = Tape::new();
            let lx = tape.leaf(&x, false);
            let ly = tape.leaf(&y, false);
            let v = ce_minus(&mut tape, lx, ly, &target, &mask, &negatives).unwrap().value;
            assert!(v >= prev - 1e-12, "k={k}: {v} < {prev}");
            prev = v;
        }
    }

    #[test]
    fn sample_negatives_forced_choice_and_determinism() {
        let mut rng = RngState::from_seed(1);
        let negatives = sample_negatives(&[1], 1, 2, &mut rng).unwrap();
        assert_eq!(negatives.rows, vec![1]); // item 2 is the only option
        let a = sample_negatives(&[3, 1, 2], 2, 5, &mut RngState::from_seed(9)).unwrap();
        let b = sample_negatives(&[3, 1, 2], 2, 5, &mut RngState::from_seed(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_negatives(&[1], 5, 4, &mut rng).is_err());
    }

    #[test]
    fn sample_negatives_frequency_is_uniform() {
        let c = 6;
        let n = 100_000usize;
        let targets = vec![4usize; n];
        let mut rng = RngState::from_seed(31);
        let negatives = sample_negatives(&targets, 1, c, &mut rng).unwrap();
        let mut counts = vec![0usize; c];
        for &r in &negatives.rows {
            counts[r] += 1;
        }
        assert_eq!(counts[3], 0, "target row must never be sampled");
        let p = 1.0 / (c - 1) as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (row, &cnt) in counts.iter().enumerate() {
            if row == 3 {
                continue;
            }
            let dev = (cnt as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "row {row}: count {cnt} deviates {dev} > 3 sigma");
        }
    }

    #[test]
    fn eq6_gradient_of_ce_wrt_logits_is_softmax_minus_onehot() {
        let mut rng = RngState::from_seed(19);
        let (m, c) = (4, 6);
        let logits = rand_mat(m, c, &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| 1 + rng.next_below(c as u64) as usize).collect();
        let mask = vec![true; m];

        let mut tape = Tape::new();
        let ll = tape.leaf(&logits, true);
        // Sum (not mean) so d loss / d logits matches the per-position form.
        let rows = target_rows(&targets, &mask);
        let lse = tape.logsumexp_rows(ll).unwrap();
        let pos = tape.gather_cols(ll, &rows).unwrap();
        let diff = tape.sub(lse, pos).unwrap();
        let root = tape.sum_all(diff);
        tape.backward(root).unwrap();
        let grad = tape.grad_tensor(ll);

        for i in 0..m {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..c {
                let softmax = (row[j] - mx).exp() / z;
                let expect = softmax - if j == targets[i] - 1 { 1.0 } else { 0.0 };
                let got = grad.at(i, j);
                assert!((got - expect).abs() <= 1e-12, "({i},{j}): {got} vs {expect}");
                assert!((-1.0..=1.0).contains(&got));
            }
        }
    }
}
