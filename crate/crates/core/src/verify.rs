//! Finite-difference gradient suite shared by the `gradcheck` command and
//! the acceptance tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{check_param_gradients, finite_difference_check, Tape, Tensor, Var};
use crate::byte_codec::{ByteSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PaddedIds};
use crate::msc::{new_msc, KSeries};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// conv1d, softmax, layer norm and label-smoothed cross-entropy.
    Ops,
    Msc,
    /// A two-layer encoder-decoder with MSC, all parameters.
    Full,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "msc" => Ok(Scope::Msc),
            "full" => Ok(Scope::Full),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!(
                "unknown gradcheck scope {s:?}; expected ops, msc, full or all"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Msc => "msc",
            Scope::Full => "full",
            Scope::All => "all",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Probed elements whose central difference was usable.
    pub checked: usize,
    /// Probes skipped because they straddled a ReLU kink.
    pub kinks: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.kinks * 4 < self.checked
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub eps: f64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Largest error per check name, in first-seen order.
    pub fn by_name(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for r in &self.results {
            match out.iter_mut().find(|(n, _)| *n == r.name) {
                Some((_, e)) => *e = e.max(r.max_rel_err),
                None => out.push((r.name, r.max_rel_err)),
            }
        }
        out
    }

    /// One summary line starting with PASS or FAIL.
    pub fn summary(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        let cmp = if self.max_rel_err() < self.tolerance {
            "<"
        } else {
            ">="
        };
        format!(
            "{verdict}, max rel err {:.3e} {cmp} {:e}",
            self.max_rel_err(),
            self.tolerance
        )
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Weighted sum with fixed random weights, so that outputs with a constant
/// plain sum (softmax, layer norm) still get informative gradients.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_result(name: &'static str, seed: u64, err: f64, checked: usize) -> CheckResult {
    CheckResult {
        name,
        seed,
        max_rel_err: err,
        checked,
        kinks: 0,
    }
}

fn check_ops(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let k = [1, 3, 5, 7][seed as usize % 4];
    let x = random(&[2, 6, 3], seed);
    let w = random(&[k, 3, 2], seed + 100);
    let b = random(&[2], seed + 200);
    let conv = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.conv1d(x, w, b, (k - 1) / 2)?;
        weighted_sum(t, y, seed)
    };
    let e1 = finite_difference_check(
        |t, v| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            conv(t, v, w, b)
        },
        &x,
        EPS,
    )?;
    let e2 = finite_difference_check(
        |t, v| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            conv(t, x, v, b)
        },
        &w,
        EPS,
    )?;
    let e3 = finite_difference_check(
        |t, v| {
            let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
            conv(t, x, w, v)
        },
        &b,
        EPS,
    )?;
    out.push(op_result(
        "conv1d",
        seed,
        e1.max(e2).max(e3),
        x.numel() + w.numel() + b.numel(),
    ));

    let s = random(&[3, 5], seed + 300);
    let e = finite_difference_check(
        |t, v| {
            let y = t.softmax(v);
            weighted_sum(t, y, seed)
        },
        &s,
        EPS,
    )?;
    out.push(op_result("softmax", seed, e, s.numel()));

    let x = random(&[4, 6], seed + 400);
    let g = random(&[6], seed + 401);
    let bb = random(&[6], seed + 402);
    let e1 = finite_difference_check(
        |t, v| {
            let (g, b) = (t.constant(g.clone()), t.constant(bb.clone()));
            let y = t.layer_norm(v, g, b)?;
            weighted_sum(t, y, seed)
        },
        &x,
        EPS,
    )?;
    let e2 = finite_difference_check(
        |t, v| {
            let (x, b) = (t.constant(x.clone()), t.constant(bb.clone()));
            let y = t.layer_norm(x, v, b)?;
            weighted_sum(t, y, seed)
        },
        &g,
        EPS,
    )?;
    let e3 = finite_difference_check(
        |t, v| {
            let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
            let y = t.layer_norm(x, g, v)?;
            weighted_sum(t, y, seed)
        },
        &bb,
        EPS,
    )?;
    out.push(op_result(
        "layer_norm",
        seed,
        e1.max(e2).max(e3),
        x.numel() + 12,
    ));

    let logits = random(&[6, 8], seed + 500);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class 7 plays the padding id; one row is padding.
    let mut targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..7)).collect();
    targets[5] = 7;
    let e = finite_difference_check(
        |t, v| t.label_smoothed_ce(v, &targets, 0.1, 7),
        &logits,
        EPS,
    )?;
    out.push(op_result("label_smoothed_ce", seed, e, logits.numel()));
    Ok(())
}

fn check_msc(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let (layer, mut store) = new_msc(8, &KSeries::new(vec![0, 1, 3, 7])?, seed)?;
    let x = random(&[2, 5, 8], seed + 50);
    let keep = [true, true, true, true, true, true, true, true, false, false];
    let e = finite_difference_check(
        |t, v| {
            let y = layer.forward(t, &store, v, &keep)?;
            weighted_sum(t, y, seed)
        },
        &x,
        EPS,
    )?;
    let report = check_param_gradients(
        &mut store,
        |t, s| {
            let xv = t.constant(x.clone());
            let y = layer.forward(t, s, xv, &keep)?;
            weighted_sum(t, y, seed)
        },
        EPS,
        6,
        seed,
    )?;
    out.push(CheckResult {
        name: "msc_forward",
        seed,
        max_rel_err: e.max(report.max_rel_err),
        checked: x.numel() + report.checked,
        kinks: report.kinks,
    });
    Ok(())
}

/// The two-layer model used by the full-model check.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 24,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.0,
        k_series: KSeries::new(vec![0, 1, 3, 7]).expect("valid"),
        msc_layers: vec![0],
        max_positions: 64,
        ..ModelConfig::desk()
    }
}

fn check_full(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut model = Model::build(small_model_config(), seed)?;
    let v = Vocab::default();
    let seqs: Vec<ByteSequence> = ["abcd", "xy"].iter().map(|s| v.encode(s, true)).collect();
    let cut = |f: fn(&ByteSequence) -> Vec<usize>| {
        let rows: Vec<ByteSequence> = seqs.iter().map(|s| ByteSequence::new(f(s))).collect();
        PaddedIds::from_sequences(&rows, v.pad_id)
    };
    let src = PaddedIds::from_sequences(&seqs, v.pad_id);
    let tin = cut(|s| s.ids[..s.len() - 1].to_vec());
    let tout = cut(|s| s.ids[1..].to_vec());
    let frozen = model.clone();
    let report = check_param_gradients(
        model.store_mut(),
        |t, store| {
            let logits = frozen.forward_train_with(t, store, &src, &tin, None)?;
            let flat = t.reshape(logits, &[tin.batch * tin.len, v.size])?;
            t.label_smoothed_ce(flat, &tout.ids, 0.1, v.pad_id)
        },
        EPS,
        3,
        seed,
    )?;
    out.push(CheckResult {
        name: "full_model",
        seed,
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        kinks: report.kinks,
    });
    Ok(())
}

/// Runs every check of `scope` once per seed.
pub fn gradcheck(scope: Scope, seeds: &[u64]) -> Result<GradcheckReport> {
    if seeds.is_empty() {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        if matches!(scope, Scope::Ops | Scope::All) {
            check_ops(seed, &mut results)?;
        }
        if matches!(scope, Scope::Msc | Scope::All) {
            check_msc(seed, &mut results)?;
        }
        if matches!(scope, Scope::Full | Scope::All) {
            check_full(seed, &mut results)?;
        }
    }
    Ok(GradcheckReport {
        scope,
        eps: EPS,
        tolerance: TOLERANCE,
        results,
    })
}
