//! Context layer: parallel same-padded convolutions over the token axis, each
//! followed by tanh, fused by an elementwise max.

use crate::error::{GrnError, Result};
use crate::numcore::{Graph, NodeId, Real, SeqLayout};

/// One convolution branch's `(kernel, bias)` handles.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub kernel: NodeId,
    pub bias: NodeId,
}

fn branch<T: Real>(g: &mut Graph<'_, T>, z: NodeId, b: Branch, layout: &SeqLayout) -> Result<NodeId> {
    let conv = g.conv1d_segments(z, b.kernel, Some(b.bias), &layout.segments())?;
    Ok(g.tanh(conv))
}

/// `max_k tanh(conv_k(Z))`, padded rows zeroed after the fusion.
pub fn context_layer<T: Real>(g: &mut Graph<'_, T>, z: NodeId, branches: &[Branch], layout: &SeqLayout) -> Result<NodeId> {
    if branches.is_empty() {
        return Err(GrnError::EmptyInput { op: "context_layer" });
    }
    let outs = branches
        .iter()
        .map(|&b| branch(g, z, b, layout))
        .collect::<Result<Vec<_>>>()?;
    let fused = g.max_across(&outs)?;
    g.mask_rows(fused, &layout.row_mask())
}

/// A single branch with no cross-branch fusion.
pub fn context_branch_only<T: Real>(g: &mut Graph<'_, T>, z: NodeId, b: Branch, layout: &SeqLayout) -> Result<NodeId> {
    let out = branch(g, z, b, layout)?;
    g.mask_rows(out, &layout.row_mask())
}

/// Linear map standing in for the context layer when it is switched off.
pub fn projection<T: Real>(g: &mut Graph<'_, T>, z: NodeId, weight: NodeId, bias: NodeId, layout: &SeqLayout) -> Result<NodeId> {
    let out = g.linear(z, weight, Some(bias))?;
    g.mask_rows(out, &layout.row_mask())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_function;
    use crate::numcore::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    /// Input `[B*T x din]` with zero padded rows.
    fn input(rng: &mut ChaCha8Rng, layout: &SeqLayout, din: usize) -> Tensor<f64> {
        let mut t = rand_tensor(rng, &[layout.rows(), din], 1.0);
        for (r, keep) in layout.row_mask().into_iter().enumerate() {
            if !keep {
                t.data_mut()[r * din..(r + 1) * din].fill(0.0);
            }
        }
        t
    }

    fn kernels(rng: &mut ChaCha8Rng, ks: &[usize], dout: usize, din: usize) -> Vec<(Tensor<f64>, Tensor<f64>)> {
        ks.iter()
            .map(|&k| (rand_tensor(rng, &[dout, k, din], 0.7), rand_tensor(rng, &[dout], 0.3)))
            .collect()
    }

    fn eval(x: &Tensor<f64>, ks: &[(Tensor<f64>, Tensor<f64>)], layout: &SeqLayout) -> Tensor<f64> {
        let mut g = Graph::new(0);
        let z = g.constant(x.clone());
        let branches: Vec<Branch> = ks
            .iter()
            .map(|(k, b)| Branch {
                kernel: g.param(k.shape(), k.data()).unwrap(),
                bias: g.param(b.shape(), b.data()).unwrap(),
            })
            .collect();
        let out = context_layer(&mut g, z, &branches, layout).unwrap();
        g.tensor(out)
    }

    #[test]
    fn shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layout = SeqLayout::new(5, vec![5, 3]);
        let x = input(&mut rng, &layout, 6);
        let out = eval(&x, &kernels(&mut rng, &[1, 3, 5], 8, 6), &layout);
        assert_eq!(out.shape(), [10, 8]);
        for (r, keep) in layout.row_mask().into_iter().enumerate() {
            let row = out.row(r);
            if keep {
                assert!(row.iter().all(|v| v.abs() < 1.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn saturated_branches_leave_branch_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = SeqLayout::new(4, vec![4]);
        let x = input(&mut rng, &layout, 3);
        let mut ks = kernels(&mut rng, &[1, 3, 5], 4, 3);
        for (_, b) in ks.iter_mut().skip(1) {
            b.data_mut().fill(-1e3);
        }
        let fused = eval(&x, &ks, &layout);
        let only = eval(&x, &ks[..1], &layout);
        assert_eq!(fused, only);
    }

    #[test]
    fn identical_branches_equal_single_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = SeqLayout::new(6, vec![6, 2]);
        let x = input(&mut rng, &layout, 3);
        let k = kernels(&mut rng, &[3], 4, 3).remove(0);
        let triple = eval(&x, &[k.clone(), k.clone(), k.clone()], &layout);
        let mut g = Graph::new(0);
        let z = g.constant(x.clone());
        let b = Branch {
            kernel: g.param(k.0.shape(), k.0.data()).unwrap(),
            bias: g.param(k.1.shape(), k.1.data()).unwrap(),
        };
        let single = context_branch_only(&mut g, z, b, &layout).unwrap();
        assert_eq!(g.tensor(single), triple);
    }

    #[test]
    fn padding_invariance_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ks = kernels(&mut rng, &[1, 3, 5], 4, 3);
        let tight = SeqLayout::new(5, vec![5]);
        let x = input(&mut rng, &tight, 3);
        let base = eval(&x, &ks, &tight);

        let loose = SeqLayout::new(13, vec![5]);
        let mut xl = Tensor::zeros(vec![13, 3]);
        xl.data_mut()[..15].copy_from_slice(x.data());
        let padded = eval(&xl, &ks, &loose);
        assert_eq!(&padded.data()[..20], base.data());

        // shift the tokens two places right inside an all-zero frame of a
        // single 11-token sequence; interior outputs move with them
        let frame = SeqLayout::new(11, vec![11]);
        let mut xs = Tensor::zeros(vec![11, 3]);
        xs.data_mut()[6..21].copy_from_slice(x.data());
        let mut xo = Tensor::zeros(vec![11, 3]);
        xo.data_mut()[..15].copy_from_slice(x.data());
        let shifted = eval(&xs, &ks, &frame);
        let origin = eval(&xo, &ks, &frame);
        for t in 0..9 {
            assert_eq!(shifted.row(t + 2), origin.row(t));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = SeqLayout::new(4, vec![4, 3]);
        let x = input(&mut rng, &layout, 3);
        let mut inputs = vec![x];
        for (k, b) in kernels(&mut rng, &[1, 3, 5], 4, 3) {
            inputs.push(k);
            inputs.push(b);
        }
        let worst = check_function(&inputs, 21, |g, ids| {
            let branches: Vec<Branch> = ids[1..]
                .chunks(2)
                .map(|c| Branch {
                    kernel: c[0],
                    bias: c[1],
                })
                .collect();
            context_layer(g, ids[0], &branches, &layout)
        })
        .unwrap();
        assert!(worst.iter().all(|&w| w < 1e-4), "{worst:?}");

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, b) = kernels(&mut rng, &[3], 4, 3).remove(0);
        let worst = check_function(&[inputs[0].clone(), k, b], 22, |g, ids| {
            context_branch_only(
                g,
                ids[0],
                Branch {
                    kernel: ids[1],
                    bias: ids[2],
                },
                &layout,
            )
        })
        .unwrap();
        assert!(worst.iter().all(|&w| w < 1e-4), "{worst:?}");
    }
}
