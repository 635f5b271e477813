//! Central finite-difference gradient checks.
//!
//! Everything here runs at 64-bit. The numeric side only ever evaluates
//! forward passes, so it stays independent of the backward code it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, to_bioes, Batch, Scheme, Sentence, Vocab};
use crate::synthetic::synthetic_corpus;
use crate::error::Result;
use crate::model::{self, ModelConfig, ModelParams};
use crate::numcore::{Graph, NodeId, Tensor};

/// Perturbation used by every check in this crate.
pub const EPS: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Worst elementwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `build` with respect to every input.
///
/// `build` receives fresh leaf nodes for `inputs` and returns an output node;
/// the scalar under test is a fixed random weighting of that output. Returns
/// the worst relative error per input.
pub fn check_function<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::new(seed);
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids)?;
        let w = match weights {
            Some(w) => w.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        };
        let loss = g.weighted_sum(out, w.clone())?;
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.grad(id).map_or_else(|| vec![0.0; g.value(id).len()], <[f64]>::to_vec))
            .collect();
        Ok((g.value(loss)[0], w, grads))
    };

    let (_, weights, analytic) = eval(inputs, None)?;
    let mut worst = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut err = None;
        let numeric = numeric_gradient(
            |probe| {
                let mut values = inputs.to_vec();
                values[k] = Tensor::new(input.shape().to_vec(), probe.to_vec()).expect("shape");
                match eval(&values, Some(&weights)) {
                    Ok((l, _, _)) => l,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input.data(),
            EPS,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst.push(max_relative_error(&analytic[k], &numeric, REL_FLOOR));
    }
    Ok(worst)
}

/// Worst relative error for one parameter group of the full model.
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic CRF-loss gradient of every parameter against
/// central differences.
///
/// `fault` names a parameter group whose analytic gradient is deliberately
/// scaled before comparison; it exists only as a negative control.
pub fn check_model(
    config: &ModelConfig,
    params: &ModelParams<f64>,
    batch: &Batch,
    fault: Option<&str>,
) -> Result<Vec<GroupReport>> {
    let loss_of = |p: &ModelParams<f64>| -> Result<f64> {
        let mut g = Graph::new(0);
        let bound = p.bind(&mut g)?;
        let loss = model::loss(&mut g, config, &bound, batch, false)?;
        Ok(g.value(loss)[0])
    };

    let analytic = {
        let mut g = Graph::new(0);
        let bound = params.bind(&mut g)?;
        let loss = model::loss(&mut g, config, &bound, batch, false)?;
        g.backward(loss)?;
        bound.grads(&g)
    };

    let mut probe = params.clone();
    let mut reports = Vec::new();
    for (name, tensor) in params.iter() {
        let mut grad = analytic[name].clone();
        if fault == Some(name.as_str()) {
            grad.iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
        }
        let mut worst: f64 = 0.0;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("param").data_mut()[i] = orig + EPS;
            let plus = loss_of(&probe)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig - EPS;
            let minus = loss_of(&probe)?;
            probe.get_mut(name).expect("param").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            worst = worst.max(relative_error(grad[i], numeric, REL_FLOOR));
        }
        reports.push(GroupReport {
            name: name.clone(),
            count: tensor.len(),
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

/// Three labeled sentences of at most five tokens, converted to BIOES, with a
/// vocabulary that keeps every word.
pub fn toy_problem(seed: u64) -> Result<(Vec<Sentence>, Vocab)> {
    let mut sentences = synthetic_corpus(3, seed);
    for s in &mut sentences {
        s.tokens.truncate(5);
        s.labels.truncate(5);
    }
    to_bioes(&mut sentences, Scheme::Bio)?;
    let vocab = build_vocab(&sentences, &[], 1);
    Ok((sentences, vocab))
}

/// [`check_model`] on [`toy_problem`] with freshly drawn parameters.
pub fn check_toy_model(config: &ModelConfig, batch: &Batch, seed: u64, fault: Option<&str>) -> Result<Vec<GroupReport>> {
    let params = model::init_params::<f64>(config, seed)?;
    check_model(config, &params, batch, fault)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::encode_batch;

    #[test]
    fn negative_control_is_caught() {
        let (s, v) = toy_problem(1).unwrap();
        assert!(s.iter().all(|x| x.len() <= 5));
        let mc = ModelConfig::reduced(v.num_words(), v.num_chars(), v.labels().to_vec());
        let b = encode_batch(&s, &v).unwrap();
        let good = check_toy_model(&mc, &b, 2, None).unwrap();
        assert!(good.iter().all(|r| r.max_rel_error < 1e-4), "{good:?}");
        let bad = check_toy_model(&mc, &b, 2, Some("relation.weight")).unwrap();
        for r in bad {
            assert_eq!(r.max_rel_error >= 1e-4, r.name == "relation.weight", "{r:?}");
        }
    }
}
