//! Gradient projection for episodic-memory training.
//!
//! When the proposed gradient g conflicts with a stored past-task gradient
//! (negative inner product), it is replaced by the closest gradient in L2
//! that satisfies all constraints `<g~, g_k> >= 0`. The small dual quadratic
//! program (one variable per stored task) is solved with projected gradient
//! iterations; all projection math runs in f64.

const MAX_ITERS: usize = 500;
const TOL: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed-form projection for a single violated constraint:
/// `g - (<g, g_k> / <g_k, g_k>) * g_k`.
pub fn project_single(g: &[f64], g_k: &[f64]) -> Vec<f64> {
    let scale = dot(g, g_k) / dot(g_k, g_k);
    g.iter().zip(g_k).map(|(x, y)| x - scale * y).collect()
}

/// Project g onto `{ x : <x, g_k> >= 0 for all k }` by solving the dual QP
/// `min_{v >= 0} 1/2 v' G G' v + v' G g` and returning `g + G' v`.
///
/// If no constraint is violated, g is returned unchanged (exactly).
pub fn project(g: &[f64], references: &[Vec<f64>]) -> Vec<f64> {
    let violated: Vec<&Vec<f64>> =
        references.iter().filter(|r| dot(g, r) < 0.0).collect();
    if violated.is_empty() {
        return g.to_vec();
    }

    let k = violated.len();
    // Gram matrix and linear term of the dual.
    let mut gram = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = dot(violated[i], violated[j]);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let linear: Vec<f64> = violated.iter().map(|r| dot(g, r)).collect();

    // Projected gradient with a Lipschitz step (trace bounds the top
    // eigenvalue of a PSD matrix).
    let trace: f64 = (0..k).map(|i| gram[i][i]).sum();
    let step = 1.0 / trace.max(1e-12);
    let mut v = vec![0.0f64; k];
    for _ in 0..MAX_ITERS {
        let mut max_delta = 0.0f64;
        let mut next = vec![0.0f64; k];
        for i in 0..k {
            let grad_i = dot(&gram[i], &v) + linear[i];
            next[i] = (v[i] - step * grad_i).max(0.0);
            max_delta = max_delta.max((next[i] - v[i]).abs());
        }
        v = next;
        if max_delta < TOL {
            break;
        }
    }

    let mut out = g.to_vec();
    for (i, reference) in violated.iter().enumerate() {
        if v[i] != 0.0 {
            for (o, r) in out.iter_mut().zip(reference.iter()) {
                *o += v[i] * r;
            }
        }
    }
    out
}
