//! Central finite-difference checks of the tape's gradients in `f64`.
//!
//! Entry-wise errors use `|a − n| / max(|a|, |n|, floor)`, where `a` is the
//! analytic and `n` the numeric derivative. The floor keeps entries whose
//! true gradient is zero from turning rounding noise into a large ratio.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::assemble::MultimodalSample;
use crate::error::Result;
use crate::model::{BridgeKind, ModelConfig, OvisModel};
use crate::patch::ImageTensor;
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::TextVocab;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.3e}", self.name, self.entries, self.max_rel_err)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("positive shape")
}

/// Checks `f` with respect to every entry of every input.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let x0 = probe[k].data()[i];
            probe[k].data_mut()[i] = x0 + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * STEP)));
            entries += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_owned(),
        entries,
        max_rel_err: worst,
    })
}

/// Random projection to a scalar so every output entry carries gradient.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    op: OpFn,
    out_shape: Vec<usize>,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let m = rng.random_range(1..=4);
    let k = rng.random_range(1..=5);
    let n = rng.random_range(1..=4);
    let mut cases = Vec::new();
    let mut add = |name, inputs: Vec<Tensor<f64>>, out_shape: Vec<usize>, op: OpFn| {
        cases.push(OpCase {
            name,
            inputs,
            op,
            out_shape,
        })
    };
    add("matmul", vec![randn(rng, &[m, k]), randn(rng, &[k, n])], vec![m, n], Box::new(|t, v| t.matmul(v[0], v[1])));
    add("matmul_bt", vec![randn(rng, &[m, k]), randn(rng, &[n, k])], vec![m, n], Box::new(|t, v| t.matmul_bt(v[0], v[1])));
    add("add", vec![randn(rng, &[m, k]), randn(rng, &[m, k])], vec![m, k], Box::new(|t, v| t.add(v[0], v[1])));
    add("add_row", vec![randn(rng, &[m, k]), randn(rng, &[k])], vec![m, k], Box::new(|t, v| t.add_row(v[0], v[1])));
    add("mul", vec![randn(rng, &[m, k]), randn(rng, &[m, k])], vec![m, k], Box::new(|t, v| t.mul(v[0], v[1])));
    let c: f64 = rng.sample(StandardNormal);
    add("scale", vec![randn(rng, &[m, k])], vec![m, k], Box::new(move |t, v| t.scale(v[0], c)));
    add("gelu", vec![randn(rng, &[m, k])], vec![m, k], Box::new(|t, v| t.gelu(v[0])));
    let kk = k + 1;
    add(
        "layernorm",
        vec![randn(rng, &[m, kk]), randn(rng, &[kk]), randn(rng, &[kk])],
        vec![m, kk],
        Box::new(|t, v| t.layernorm(v[0], v[1], v[2])),
    );
    add("reshape", vec![randn(rng, &[m, k])], vec![k, m], Box::new(move |t, v| t.reshape(v[0], &[k, m])));
    let r0 = rng.random_range(0..m);
    add("slice_rows", vec![randn(rng, &[m, k])], vec![m - r0, k], Box::new(move |t, v| t.slice_rows(v[0], r0, m - r0)));
    let c0 = rng.random_range(0..k);
    add("slice_cols", vec![randn(rng, &[m, k])], vec![m, k - c0], Box::new(move |t, v| t.slice_cols(v[0], c0, k - c0)));
    add(
        "concat_rows",
        vec![randn(rng, &[m, k]), randn(rng, &[n, k])],
        vec![m + n, k],
        Box::new(|t, v| t.concat_rows(&[v[0], v[1]])),
    );
    add(
        "concat_cols",
        vec![randn(rng, &[m, k]), randn(rng, &[m, n])],
        vec![m, k + n],
        Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
    );
    add("transpose", vec![randn(rng, &[m, k])], vec![k, m], Box::new(|t, v| t.transpose(v[0])));
    let ids: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..m)).collect();
    let rows = ids.len();
    add("embedding_rows", vec![randn(rng, &[m, k])], vec![rows, k], Box::new(move |t, v| t.embedding_rows(v[0], &ids)));
    add("softmax_rows", vec![randn(rng, &[m, k])], vec![m, k], Box::new(|t, v| t.softmax_rows(v[0])));
    add("causal_softmax_rows", vec![randn(rng, &[m, m])], vec![m, m], Box::new(|t, v| t.causal_softmax_rows(v[0])));
    let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
    mask[0] = true;
    add(
        "cross_entropy",
        vec![randn(rng, &[m, k])],
        vec![1],
        Box::new(move |t, v| t.cross_entropy(v[0], &targets, &mask)),
    );
    add("sum", vec![randn(rng, &[m, k])], vec![1], Box::new(|t, v| t.sum(v[0])));
    cases
}

/// Every differentiable tape operation on `rounds` random shape draws.
pub fn op_suite(seed: u64, rounds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for r in 0..rounds {
        let mut rng = stream(seed, "gradcheck/ops", r as u64);
        for case in op_cases(&mut rng) {
            let w = randn(&mut rng, &case.out_shape);
            let op = &case.op;
            let res = check_fn(&format!("{}#{r}", case.name), &case.inputs, |t, v| {
                let y = op(t, v)?;
                project(t, y, &w)
            })?;
            out.push(res);
        }
    }
    Ok(out)
}

/// Small model with a larger init so gradients are well away from zero.
pub fn check_model_config(bridge: BridgeKind) -> ModelConfig {
    ModelConfig {
        bridge,
        image_width: 8,
        image_height: 8,
        channels: 2,
        patch: 4,
        enc_width: 8,
        enc_layers: 2,
        enc_heads: 2,
        visual_vocab: 6,
        llm_width: 8,
        llm_layers: 2,
        llm_heads: 2,
        max_seq: 24,
        mlp_ratio: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn random_sample(rng: &mut ChaCha8Rng, cfg: &ModelConfig, vocab: &TextVocab) -> MultimodalSample {
    let n = cfg.channels * cfg.image_width * cfg.image_height;
    let pixels = (0..n).map(|_| rng.random::<f32>()).collect();
    let image = ImageTensor::new(cfg.channels, cfg.image_width, cfg.image_height, pixels).expect("valid image");
    let word = |rng: &mut ChaCha8Rng| rng.random_range(5..vocab.size());
    let mut prompt: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| word(rng)).collect();
    let at = rng.random_range(0..=prompt.len());
    prompt.insert(at, vocab.image());
    let target = (0..rng.random_range(1..=3)).map(|_| word(rng)).collect();
    MultimodalSample {
        prompt,
        target,
        image: Some(image),
    }
}

fn model_loss(model: &OvisModel<f64>, sample: &MultimodalSample) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, |_| false);
    let l = model.loss(&mut tape, &bind, sample)?;
    Ok(tape.value(l).item())
}

/// The composed pipeline from pixels to loss. Each case checks `entries`
/// randomly chosen parameter entries plus one random direction through all
/// parameters at once.
pub fn model_suite(seed: u64, cases: usize, entries: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for c in 0..cases {
        let bridge = if c % 2 == 0 { BridgeKind::Ovis } else { BridgeKind::Connector };
        let mut model = OvisModel::<f64>::new(check_model_config(bridge), seed.wrapping_add(c as u64))?;
        let mut rng = stream(seed, "gradcheck/model", c as u64);
        let sample = random_sample(&mut rng, &model.cfg, &model.vocab);

        let mut tape = Tape::new();
        let bind = model.store.bind(&mut tape, |_| true);
        let l = model.loss(&mut tape, &bind, &sample)?;
        tape.backward(l)?;
        model.store.zero_grads();
        model.store.accumulate_grads(&tape, &bind);

        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        let mut worst = 0.0f64;
        for _ in 0..entries {
            let id = ids[rng.random_range(0..ids.len())];
            let i = rng.random_range(0..model.store.value(id).numel());
            let analytic = model.store.get(id).grad[i];
            let x0 = model.store.value(id).data()[i];
            model.store.get_mut(id).value.data_mut()[i] = x0 + STEP;
            let up = model_loss(&model, &sample)?;
            model.store.get_mut(id).value.data_mut()[i] = x0 - STEP;
            let down = model_loss(&model, &sample)?;
            model.store.get_mut(id).value.data_mut()[i] = x0;
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));
        }

        // Directional derivative along a random unit vector.
        let dirs: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| (0..model.store.value(id).numel()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let norm = dirs.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let analytic: f64 = ids
            .iter()
            .zip(&dirs)
            .map(|(&id, d)| model.store.get(id).grad.iter().zip(d).map(|(g, u)| g * u / norm).sum::<f64>())
            .sum();
        let shift = |model: &mut OvisModel<f64>, h: f64| {
            for (&id, d) in ids.iter().zip(&dirs) {
                for (x, u) in model.store.get_mut(id).value.data_mut().iter_mut().zip(d) {
                    *x += h * u / norm;
                }
            }
        };
        let base = model.clone();
        shift(&mut model, STEP);
        let up = model_loss(&model, &sample)?;
        let mut model = base;
        shift(&mut model, -STEP);
        let down = model_loss(&model, &sample)?;
        worst = worst.max(rel_err(analytic, (up - down) / (2.0 * STEP)));

        out.push(CheckResult {
            name: format!("model/{bridge}#{c}"),
            entries: entries + 1,
            max_rel_err: worst,
        });
    }
    Ok(out)
}
