//! Shared oracles for integration tests: central finite differences and a
//! naive n-gram BLEU, both independent of the implementation paths they
//! check.

#![allow(dead_code)]

use secoco::model::SecocoModel;
use secoco::numerics::Tensor;

/// Relative error with a unit floor, the usual gradient-check comparison.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central difference of `eval` w.r.t. one element, probing the given steps
/// in order and returning the best relative error against `analytic`. ReLU
/// kinks bias a central difference at isolated points, and the bias depends
/// on the step size; a genuine gradient defect disagrees at every step.
fn fd_element(
    analytic: f64,
    steps: &[f64],
    mut bump_eval: impl FnMut(f32) -> f64,
    orig: f32,
) -> f64 {
    let mut best = f64::INFINITY;
    for &h in steps {
        let hi = (orig as f64 + h) as f32;
        let lo = (orig as f64 - h) as f32;
        let up = bump_eval(hi);
        let down = bump_eval(lo);
        let numeric = (up - down) / (hi as f64 - lo as f64);
        best = best.min(rel_err(analytic, numeric));
        if best < 1e-4 {
            break;
        }
    }
    best
}

/// Central finite differences over every element of the model parameters
/// selected by `filter`, compared against `analytic` gradients (index-aligned
/// with the model tensors). Returns (elements checked, worst relative error).
pub fn fd_check_model(
    model: &mut SecocoModel<f32>,
    analytic: &[Option<Tensor<f32>>],
    filter: impl Fn(&str) -> bool,
    h: f64,
    tol: f64,
    eval: impl Fn(&SecocoModel<f32>) -> f64,
) -> (usize, f64) {
    let mut checked = 0usize;
    let mut worst = 0f64;
    let names: Vec<String> = model.names().to_vec();
    let steps = [h, h * 2.0, h * 4.0, h / 5.0];
    for (i, name) in names.iter().enumerate() {
        if !filter(name) {
            continue;
        }
        for j in 0..model.tensors()[i].numel() {
            let orig = model.tensors()[i].data()[j];
            let ana = analytic[i]
                .as_ref()
                .map(|t| t.data()[j] as f64)
                .unwrap_or(0.0);
            let e = fd_element(
                ana,
                &steps,
                |bumped| {
                    model.tensors_mut()[i].data_mut()[j] = bumped;
                    let v = eval(model);
                    model.tensors_mut()[i].data_mut()[j] = orig;
                    v
                },
                orig,
            );
            assert!(
                e < tol,
                "gradient mismatch at {name}[{j}]: analytic {ana:.6e}, rel {e:.3e} at all steps"
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}

/// Finite differences over standalone leaf tensors of a graph-building
/// closure: `eval(tensors)` must rebuild the forward pass from scratch.
pub fn fd_check_tensors(
    tensors: &mut [Tensor<f32>],
    analytic: &[Tensor<f32>],
    h: f64,
    tol: f64,
    eval: impl Fn(&[Tensor<f32>]) -> f64,
) -> (usize, f64) {
    let mut checked = 0usize;
    let mut worst = 0f64;
    let steps = [h, h * 2.0, h * 4.0, h / 5.0];
    for i in 0..tensors.len() {
        for j in 0..tensors[i].numel() {
            let orig = tensors[i].data()[j];
            let ana = analytic[i].data()[j] as f64;
            let e = fd_element(
                ana,
                &steps,
                |bumped| {
                    tensors[i].data_mut()[j] = bumped;
                    let v = eval(tensors);
                    tensors[i].data_mut()[j] = orig;
                    v
                },
                orig,
            );
            assert!(
                e < tol,
                "gradient mismatch at tensor {i}[{j}]: analytic {ana:.6e}, rel {e:.3e} at all steps"
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}

/// Naive corpus BLEU-4 oracle: brute-force n-gram matching with vector scans
/// (no hash maps), add-one smoothing on the 2-4 gram precisions, brevity
/// penalty from corpus lengths. Mirrors the metric definition, not the
/// implementation.
pub fn naive_bleu4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let hyp_grams: Vec<&[String]> = h.windows(n).collect();
            let ref_grams: Vec<&[String]> = if r.len() >= n {
                r.windows(n).collect()
            } else {
                Vec::new()
            };
            // clipped counts: for each distinct hyp n-gram, count occurrences
            // in hyp and ref by linear scans
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hyp_grams {
                if seen.iter().any(|s| s == g) {
                    continue;
                }
                seen.push(g);
                let in_hyp = hyp_grams.iter().filter(|x| *x == g).count() as u64;
                let in_ref = ref_grams.iter().filter(|x| *x == g).count() as u64;
                matches[n - 1] += in_hyp.min(in_ref);
            }
            totals[n - 1] += hyp_grams.len() as u64;
        }
    }
    if hyp_len == 0 || totals[0] == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0f64;
    for n in 0..4 {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}
