//! Shared test oracles: central finite differences and a naive convolution,
//! both independent of the tape's implementation paths.

#![allow(dead_code)]

use pudnet::tape::{Tape, Var};
use pudnet::tensor::Tensor;
use rand::Rng;

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Check reverse-mode gradients of a scalar-valued tape program against
/// central finite differences (h = 1e-5) for every input marked
/// `requires_grad`. Returns the maximum relative error observed.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let h = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).len(), 1, "gradcheck needs a scalar objective");
    let grads = tape.backward(loss).expect("backward failed");
    let analytic: Vec<Option<Vec<f64>>> =
        vars.iter().map(|&v| grads.get(v).map(|g| g.to_vec())).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut max_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let g = analytic[i].as_ref().expect("missing gradient for requires_grad leaf");
        for j in 0..input.len() {
            let mut work: Vec<Tensor<f64>> = inputs.to_vec();
            work[i].data_mut()[j] += h;
            let up = eval(&work);
            work[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&work);
            let fd = (up - down) / (2.0 * h);
            max_err = max_err.max(rel_err(g[j], fd));
        }
    }
    max_err
}

/// Direct 6-nested-loop cross-correlation, the reference for conv2d.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    w: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wdt + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wdt as isize {
                                    acc += x[((b * cin + ci) * h + iy as usize) * wdt
                                        + ix as usize]
                                        * w[((co * cin + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_tensor_grad(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    rand_tensor(rng, shape, lo, hi).with_grad()
}
