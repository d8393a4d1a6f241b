//! Loss probes shared by the integration test targets.

use ebmc_core::rng::{gaussian_tensor, rng_for, uniform_tensor};
use ebmc_core::{Tape, Tensor, Var};

pub type LossFn = Box<dyn Fn(&mut Tape, Var) -> ebmc_core::Result<Var>>;

/// One scalar-valued probe per differentiable operation, parametrised by a
/// seed so the constant operands change with it.
pub fn op_probes(seed: u64) -> Vec<(&'static str, Tensor, LossFn)> {
    let mut rng = rng_for(seed, "probes");
    let x = gaussian_tensor(&mut rng, 3, 4, 1.0);
    let w = gaussian_tensor(&mut rng, 3, 4, 1.0);
    let m = gaussian_tensor(&mut rng, 4, 2, 1.0);
    let bias = gaussian_tensor(&mut rng, 1, 4, 1.0);
    let pos = uniform_tensor(&mut rng, 3, 4, 0.5, 2.0);
    let labels = vec![1usize, 3, 0];
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();

    let weighted = |w: Tensor| {
        move |tape: &mut Tape, y: Var| -> ebmc_core::Result<Var> {
            let wc = tape.constant(w.clone());
            let p = tape.mul(y, wc)?;
            tape.sum(p)
        }
    };

    let mut probes: Vec<(&'static str, Tensor, LossFn)> = Vec::new();
    {
        let m = m.clone();
        let wsum = weighted(Tensor::from_fn(3, 2, |r, c| (r as f64 + 1.0) * (c as f64 - 0.5)));
        probes.push((
            "matmul",
            x.clone(),
            Box::new(move |tape, v| {
                let mc = tape.constant(m.clone());
                let y = tape.matmul(v, mc)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let w2 = w.clone();
        let wsum = weighted(Tensor::from_fn(3, 3, |r, c| r as f64 - c as f64 + 0.3));
        probes.push((
            "matmul_nt",
            x.clone(),
            Box::new(move |tape, v| {
                let wc = tape.constant(w2.clone());
                let y = tape.matmul_nt(v, wc)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(Tensor::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.1));
        probes.push((
            "transpose",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.transpose(v)?;
                wsum(tape, y)
            }),
        ));
    }
    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let w2 = w.clone();
        let wsum = weighted(w.map(|v| v + 0.5));
        probes.push((
            name,
            x.clone(),
            Box::new(move |tape, v| {
                let c = tape.leaf(w2.clone());
                let y = match kind {
                    0 => tape.add(v, c)?,
                    1 => tape.sub(c, v)?,
                    _ => tape.mul(v, v)?,
                };
                wsum(tape, y)
            }),
        ));
    }
    {
        let b = bias.clone();
        let wsum = weighted(w.clone());
        probes.push((
            "add_row",
            x.clone(),
            Box::new(move |tape, v| {
                let bb = tape.constant(b.clone());
                let y = tape.add_row(v, bb)?;
                let y = tape.mul(y, y)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let xx = x.clone();
        probes.push((
            "add_row_bias",
            bias.clone(),
            Box::new(move |tape, b| {
                let xv = tape.constant(xx.clone());
                let y = tape.add_row(xv, b)?;
                let y = tape.tanh(y)?;
                tape.sum(y)
            }),
        ));
    }
    for (name, kind) in [("scale", 0), ("relu", 1), ("tanh", 2), ("exp", 3), ("abs", 4)] {
        let wsum = weighted(w.clone());
        probes.push((
            name,
            x.clone(),
            Box::new(move |tape, v| {
                let y = match kind {
                    0 => tape.scale(v, -1.7)?,
                    1 => tape.relu(v)?,
                    2 => tape.tanh(v)?,
                    3 => tape.exp(v)?,
                    _ => tape.abs(v)?,
                };
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(w.clone());
        probes.push((
            "log",
            pos.clone(),
            Box::new(move |tape, v| {
                let y = tape.log(v)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(w.clone());
        probes.push((
            "softmax_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.softmax_rows(v, 0.8)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(w.clone());
        probes.push((
            "log_softmax_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.log_softmax_rows(v, 1.6)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let labels = labels.clone();
        probes.push((
            "cross_entropy",
            x.clone(),
            Box::new(move |tape, v| tape.cross_entropy(v, &labels)),
        ));
    }
    {
        let mask = mask.clone();
        let wsum = weighted(Tensor::from_fn(3, 1, |r, _| r as f64 - 0.7));
        probes.push((
            "logsumexp_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.logsumexp_rows(v, Some(&mask))?;
                wsum(tape, y)
            }),
        ));
    }
    probes.push(("sum", x.clone(), Box::new(|tape, v| tape.sum(v))));
    {
        probes.push((
            "mean",
            x.clone(),
            Box::new(|tape, v| {
                let y = tape.mul(v, v)?;
                tape.mean(y)
            }),
        ));
    }
    probes.push(("l2_norm_sq", x.clone(), Box::new(|tape, v| tape.l2_norm_sq(v))));
    {
        let wsum = weighted(Tensor::from_fn(3, 1, |r, _| r as f64 + 0.5));
        probes.push((
            "sum_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.mul(v, v)?;
                let y = tape.sum_rows(y)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let w2 = w.clone();
        let wsum = weighted(Tensor::from_fn(3, 1, |r, _| r as f64 - 1.3));
        probes.push((
            "row_cosine",
            x.clone(),
            Box::new(move |tape, v| {
                let c = tape.leaf(w2.clone());
                let y = tape.row_cosine_eps(v, c, 1e-12)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(w.clone());
        probes.push((
            "row_normalize",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.row_normalize(v, 1e-12)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(Tensor::from_fn(4, 4, |r, c| (r + 2 * c) as f64 * 0.2 - 0.77));
        probes.push((
            "gather_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.gather_rows(v, &[2, 0, 2, 1])?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let w2 = w.clone();
        let wsum = weighted(Tensor::from_fn(3, 8, |r, c| (r as f64 - c as f64) * 0.3));
        probes.push((
            "concat_cols",
            x.clone(),
            Box::new(move |tape, v| {
                let c = tape.constant(w2.clone());
                let y = tape.concat_cols(&[c, v])?;
                let y = tape.tanh(y)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let w2 = w.clone();
        let wsum = weighted(Tensor::from_fn(6, 4, |r, c| (r as f64 * c as f64) * 0.1 - 0.4));
        probes.push((
            "concat_rows",
            x.clone(),
            Box::new(move |tape, v| {
                let c = tape.constant(w2.clone());
                let y = tape.concat_rows(&[v, c])?;
                let y = tape.mul(y, y)?;
                wsum(tape, y)
            }),
        ));
    }
    {
        let wsum = weighted(Tensor::from_fn(3, 2, |r, c| r as f64 + c as f64 - 1.0));
        probes.push((
            "slice_cols",
            x.clone(),
            Box::new(move |tape, v| {
                let y = tape.slice_cols(v, 1, 2)?;
                let y = tape.exp(y)?;
                wsum(tape, y)
            }),
        ));
    }
    probes
}

