//! Central finite-difference gradient checking.
//!
//! A graph builder is replayed on fresh tapes with each input element nudged
//! by `±h`; the numerical slope is compared with the tape's reverse pass.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Elementwise `|a - n| / max(|a|, |n|, floor)`, maximized over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub max_rel_error: f64,
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `build` with respect to every tensor in `inputs`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).into_data()).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        numeric.push(g);
    }
    let flat_a: Vec<f64> = analytic.iter().flatten().copied().collect();
    let flat_n: Vec<f64> = numeric.iter().flatten().copied().collect();
    Ok(GradCheck {
        max_rel_error: max_relative_error(&flat_a, &flat_n, 1e-3),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Random fixed weights turn any output into a scalar with a generic
    /// upstream gradient.
    fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(rand_tensor(&mut rng, &shape));
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    fn assert_passes(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
        let r = check_gradients(inputs, DEFAULT_STEP, build).unwrap();
        assert!(r.max_rel_error < 1e-3, "{name}: max rel error {}", r.max_rel_error);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[2, 4]);
        let c = rand_tensor(&mut rng, &[3, 4]);
        let pos = Tensor::from_fn(vec![3, 4], |_| rng.random_range(0.5..2.0));
        let x3 = rand_tensor(&mut rng, &[2, 4, 7]);
        let w3 = rand_tensor(&mut rng, &[4, 4, 3]);
        let bias4 = rand_tensor(&mut rng, &[4]);
        let slope = Tensor::new(vec![1], vec![0.25]).unwrap();

        assert_passes("matmul", &[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        });
        assert_passes("matmul_nt", &[a.clone(), bt.clone()], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y, 1)
        });
        assert_passes("conv1d", &[x3.clone(), w3.clone(), bias4.clone()], |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), 2, 1)?;
            project(t, y, 2)
        });
        assert_passes("add/sub/mul", &[a.clone(), c.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let y = t.mul(s, d)?;
            project(t, y, 3)
        });
        assert_passes("add_bias/scale/add_scalar/neg", &[a.clone(), bias4.clone()], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.scale(y, 1.7);
            let y = t.add_scalar(y, -0.3);
            let y = t.neg(y);
            let y = t.mul(y, y)?;
            project(t, y, 4)
        });
        assert_passes("concat/slice", &[a.clone(), c.clone()], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.slice(y, 1, 2, 7)?;
            project(t, y, 5)
        });
        assert_passes("reshape/permute", &[x3.clone()], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            let y = t.reshape(y, &[7, 8])?;
            let y = t.mul(y, y)?;
            project(t, y, 6)
        });
        assert_passes("mean/sum", &[a.clone()], |t, v| {
            let s = t.mul(v[0], v[0])?;
            let m = t.mean(s);
            let s2 = t.sum(v[0]);
            let p = t.mul(m, s2)?;
            Ok(p)
        });
        assert_passes("exp/log", &[pos.clone()], |t, v| {
            let y = t.log(v[0]);
            let z = t.exp(v[0]);
            let y = t.mul(y, z)?;
            project(t, y, 7)
        });
        assert_passes("tanh/sigmoid", &[a.clone()], |t, v| {
            let y = t.tanh(v[0]);
            let z = t.sigmoid(v[0]);
            let y = t.add(y, z)?;
            let y = t.mul(y, y)?;
            project(t, y, 8)
        });
        assert_passes("prelu", &[a.clone(), slope.clone()], |t, v| {
            let y = t.prelu(v[0], v[1])?;
            project(t, y, 9)
        });
        assert_passes("softmax", &[x3.clone()], |t, v| {
            let y = t.softmax(v[0], 1)?;
            project(t, y, 10)
        });
        assert_passes("log_softmax", &[x3.clone()], |t, v| {
            let y = t.log_softmax(v[0], 2)?;
            project(t, y, 11)
        });
        assert_passes("group_norm", &[x3.clone(), bias4.clone(), bias4.clone()], |t, v| {
            let y = t.group_norm(v[0], 2, 1e-5, Some(v[1]), Some(v[2]))?;
            project(t, y, 12)
        });
        assert_passes("weight_standardize", &[w3.clone()], |t, v| {
            let y = t.weight_standardize(v[0], 1e-5)?;
            project(t, y, 13)
        });
        assert_passes("dropout", &[a.clone()], |t, v| {
            let y = t.dropout(v[0], 0.3, true, 99)?;
            project(t, y, 14)
        });
        assert_passes("row_norm/gather/clamp_min", &[a.clone()], |t, v| {
            let y = t.row_norm(v[0])?;
            let g = t.gather(v[0], vec![0, 5, 5, 11])?;
            let g = t.clamp_min(g, -0.5);
            let s = t.sum(g);
            let y = project(t, y, 15)?;
            t.add(y, s)
        });
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(max_relative_error(&[1e-9], &[2e-9], 1e-3), 1e-9 / 1e-3);
        assert!((max_relative_error(&[1.0], &[1.1], 1e-3) - 0.1 / 1.1).abs() < 1e-12);
    }
}
