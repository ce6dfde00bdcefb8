use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_param_gradients, Tape, Tensor};
use crate::byte_codec::{ByteSequence, Vocab};
use crate::error::Error;
use crate::msc::KSeries;

fn tiny(k: &[usize]) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 24,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.1,
        k_series: KSeries::new(k.to_vec()).unwrap(),
        msc_layers: vec![0],
        max_positions: 64,
        ..ModelConfig::desk()
    }
}

fn random_text_seq(rng: &mut ChaCha8Rng, max: usize) -> ByteSequence {
    let len = rng.gen_range(1..=max);
    let text: String = (0..len)
        .map(|_| rng.gen_range(b'a'..=b'z') as char)
        .collect();
    Vocab::default().encode(&text, true)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn full_sized_parameter_counts() {
    let msc = Model::build(ModelConfig::full(), 0).unwrap();
    let base = Model::build(ModelConfig::full().baseline(), 0).unwrap();
    let (m, b) = (msc.num_params() as f64, base.num_params() as f64);
    assert!((b / 44.3e6 - 1.0).abs() < 0.05, "baseline {b}");
    assert!((m / 45.0e6 - 1.0).abs() < 0.05, "msc {m}");
    let zero = ModelConfig {
        k_series: KSeries::identity(8),
        ..ModelConfig::full()
    };
    let zero = Model::build(zero, 0).unwrap();
    assert_eq!(zero.num_params(), base.num_params());
}

#[test]
fn desk_preset_builds_and_runs() {
    let model = Model::build(ModelConfig::desk(), 3).unwrap();
    let src = Vocab::default().encode("hello", true);
    let out = model.encode_batch(&[src]).unwrap();
    assert_eq!(out.shape(), &[1, 7, 64]);
    assert!(out.is_finite());
}

#[test]
fn indivisible_heads_fail_to_build() {
    let cfg = ModelConfig {
        heads: 7,
        ..ModelConfig::full()
    };
    assert!(matches!(Model::build(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn zero_series_matches_baseline_bitwise() {
    let cfg = tiny(&[0, 0, 0, 0]);
    let a = Model::build(cfg.clone(), 11).unwrap();
    let b = Model::build(cfg.baseline(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let src: Vec<_> = (0..4).map(|_| random_text_seq(&mut rng, 9)).collect();
    assert_eq!(
        bits(&a.encode_batch(&src).unwrap()),
        bits(&b.encode_batch(&src).unwrap())
    );
}

#[test]
fn trailing_pads_do_not_change_real_positions() {
    let model = Model::build(tiny(&[0, 3, 5, 7]), 2).unwrap();
    let short = Vocab::default().encode("abc", true);
    let long = Vocab::default().encode("abcdefghij", true);
    let alone = model.encode_batch(std::slice::from_ref(&short)).unwrap();
    let batched = model.encode_batch(&[short.clone(), long]).unwrap();
    let n = short.len() * 16;
    for (a, b) in alone.data()[..n].iter().zip(&batched.data()[..n]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_token_input_is_finite() {
    let model = Model::build(tiny(&[7, 7, 7, 7]), 2).unwrap();
    let out = model.encode_batch(&[ByteSequence::new(vec![65])]).unwrap();
    assert!(out.is_finite());
}

#[test]
fn too_long_input_is_rejected() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 2).unwrap();
    let src = ByteSequence::new(vec![65; 65]);
    assert!(matches!(
        model.encode_batch(&[src]),
        Err(Error::TooLong { len: 65, max: 64 })
    ));
}

#[test]
fn batch_permutation_equivariance() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let src: Vec<_> = (0..3).map(|_| random_text_seq(&mut rng, 8)).collect();
    let out = model.encode_batch(&src).unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| src[i].clone()).collect();
    let pout = model.encode_batch(&permuted).unwrap();
    let len = out.shape()[1];
    let row = len * 16;
    for (j, &i) in perm.iter().enumerate() {
        let real = src[i].len() * 16;
        assert_eq!(
            &pout.data()[j * row..j * row + real],
            &out.data()[i * row..i * row + real]
        );
    }
}

fn batch_of(texts: &[&str]) -> (PaddedIds, PaddedIds, PaddedIds) {
    let v = Vocab::default();
    let seqs: Vec<_> = texts.iter().map(|t| v.encode(t, true)).collect();
    let tin: Vec<_> = seqs
        .iter()
        .map(|s| ByteSequence::new(s.ids[..s.len() - 1].to_vec()))
        .collect();
    let tout: Vec<_> = seqs
        .iter()
        .map(|s| ByteSequence::new(s.ids[1..].to_vec()))
        .collect();
    (
        PaddedIds::from_sequences(&seqs, v.pad_id),
        PaddedIds::from_sequences(&tin, v.pad_id),
        PaddedIds::from_sequences(&tout, v.pad_id),
    )
}

#[test]
fn untrained_loss_is_near_uniform() {
    let model = Model::build(ModelConfig::desk(), 5).unwrap();
    let (src, tin, tout) = batch_of(&["hello world", "abc", "the quick brown fox"]);
    let mut tape = Tape::new();
    let logits = model.forward_train(&mut tape, &src, &tin, None).unwrap();
    assert_eq!(tape.shape(logits), &[3, tin.len, 259]);
    let flat = tape.reshape(logits, &[3 * tin.len, 259]).unwrap();
    let loss = tape.label_smoothed_ce(flat, &tout.ids, 0.0, 256).unwrap();
    let loss = tape.scalar(loss);
    assert!((loss - 259f64.ln()).abs() < 0.5, "{loss}");
}

#[test]
fn decoder_is_causal() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 6).unwrap();
    let (src, tin, _) = batch_of(&["abcdef"]);
    let mut tape = Tape::new();
    let base = model.forward_train(&mut tape, &src, &tin, None).unwrap();
    let base = tape.value(base).clone();
    for j in 1..tin.len {
        let mut changed = tin.clone();
        changed.ids[j] = b'z' as usize;
        let mut tape = Tape::new();
        let out = model
            .forward_train(&mut tape, &src, &changed, None)
            .unwrap();
        let out = tape.value(out);
        let before = j * 259;
        assert_eq!(
            &out.data()[..before],
            &base.data()[..before],
            "position {j}"
        );
    }
}

#[test]
fn target_must_start_with_bos() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 6).unwrap();
    let (src, _, tout) = batch_of(&["abc"]);
    let mut tape = Tape::new();
    assert!(model.forward_train(&mut tape, &src, &tout, None).is_err());
}

#[test]
fn every_parameter_receives_a_gradient() {
    let mut model = Model::build(tiny(&[0, 1, 3, 5]), 8).unwrap();
    let (src, tin, tout) = batch_of(&["hello", "abc de"]);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model
        .forward_train(&mut tape, &src, &tin, Some(&mut rng))
        .unwrap();
    let flat = tape.reshape(logits, &[tin.batch * tin.len, 259]).unwrap();
    let loss = tape.label_smoothed_ce(flat, &tout.ids, 0.1, 256).unwrap();
    let grads = tape.backward(loss).unwrap();
    grads.write_to(model.store_mut());
    assert_eq!(model.msc_param_ids().len(), 6);
    for p in model.store().iter() {
        let g = p
            .grad
            .as_ref()
            .unwrap_or_else(|| panic!("{} has no grad", p.name));
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{} has an all-zero grad",
            p.name
        );
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let cfg = ModelConfig {
            dropout: 0.0,
            ..tiny(&[0, 1, 3, 7])
        };
        let mut model = Model::build(cfg, seed).unwrap();
        let (src, tin, tout) = batch_of(&["abcd", "xy"]);
        let m = model.clone();
        let report = check_param_gradients(
            model.store_mut(),
            |t, store| {
                let logits = m.forward_train_with(t, store, &src, &tin, None)?;
                let flat = t.reshape(logits, &[tin.batch * tin.len, 259])?;
                t.label_smoothed_ce(flat, &tout.ids, 0.1, 256)
            },
            1e-5,
            3,
            seed,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        // One near-zero ReLU input can sit under many probes; most must still be smooth.
        assert!(report.kinks * 4 < report.checked, "seed {seed}: {report:?}");
    }
}

#[test]
fn beam_one_equals_greedy() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let src = random_text_seq(&mut rng, 10);
        let g = model.greedy_decode(&src, 12).unwrap();
        let b = model.beam_decode(&src, 1, 12, 1.0).unwrap();
        assert_eq!(g, b);
    }
}

#[test]
fn decoding_terminates_within_max_len() {
    let model = Model::build(tiny(&[0, 1, 3, 5]), 10).unwrap();
    let src = Vocab::default().encode("hello", true);
    assert!(model.greedy_decode(&src, 7).unwrap().len() <= 7);
    assert!(model.beam_decode(&src, 3, 7, 1.0).unwrap().len() <= 7);
    assert!(model.greedy_decode(&src, 0).is_err());
    assert!(model.beam_decode(&src, 0, 5, 1.0).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(tiny(&[0, 1, 3, 5]), 12).unwrap();
    model.save(dir.path()).unwrap();
    let loaded = Model::load(dir.path()).unwrap();
    let src = vec![Vocab::default().encode("checkpoint", true)];
    assert_eq!(
        bits(&model.encode_batch(&src).unwrap()),
        bits(&loaded.encode_batch(&src).unwrap())
    );
}

#[test]
fn mismatched_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::build(tiny(&[0, 1, 3, 5]), 12).unwrap();
    model.save(dir.path()).unwrap();
    let other = ModelConfig {
        k_series: KSeries::new(vec![0, 3, 3, 5]).unwrap(),
        ..model.config().clone()
    };
    std::fs::write(
        dir.path().join(CONFIG_FILE),
        serde_json::to_string(&other).unwrap(),
    )
    .unwrap();
    assert!(matches!(Model::load(dir.path()), Err(Error::Checkpoint(_))));
}
