use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{read_json, scales_config, train_config, TrainRunConfig};
use super::manifest::RunManifest;
use super::Command;
use crate::byte_codec::{byte_group_histogram, dominant_group, Vocab};
use crate::data::{gen_synthetic, load_corpus, ParallelCorpus, Script, Task};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::msc::recommend_for_histogram;
use crate::train::{
    corpus_bleu_stats, scales_experiment, train, translate_lines, BleuStats, FINAL_DIR, LOG_FILE,
};
use crate::verify::{gradcheck, Scope};

pub(super) fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Preprocess {
            src,
            tgt,
            out,
            max_len,
        } => with_manifest("preprocess", &out, |m| {
            preprocess(m, &src, &tgt, &out, max_len)
        }),
        Command::Generate {
            task,
            script,
            size,
            seed,
            out_src,
            out_tgt,
            run_dir,
        } => with_manifest("generate", &run_dir, |m| {
            generate(m, task, script, size, seed, &out_src, &out_tgt)
        }),
        Command::Train {
            config,
            out,
            seed,
            max_steps,
        } => with_manifest("train", &out, |m| {
            cmd_train(m, &config, &out, seed, max_steps)
        }),
        Command::Translate {
            checkpoint,
            input,
            output,
            beam,
            run_dir,
        } => with_manifest("translate", &run_dir, |m| {
            translate(m, &checkpoint, &input, output.as_deref(), beam)
        }),
        Command::Eval {
            checkpoint,
            src,
            hyp,
            reference,
            beam,
            run_dir,
        } => with_manifest("eval", &run_dir, |m| {
            eval(
                m,
                checkpoint.as_deref(),
                src.as_deref(),
                hyp.as_deref(),
                &reference,
                beam,
                &run_dir,
            )
        }),
        Command::Gradcheck {
            scope,
            seed,
            seeds,
            run_dir,
        } => with_manifest("gradcheck", &run_dir, |m| {
            cmd_gradcheck(m, scope, seed, seeds, &run_dir)
        }),
        Command::Scales { config, out, seed } => with_manifest("scales", &out, |m| {
            cmd_scales(m, config.as_deref(), &out, seed)
        }),
    }
}

/// Runs `f` and writes the run manifest whatever the outcome.
fn with_manifest<F>(command: &str, run_dir: &Path, f: F) -> Result<i32>
where
    F: FnOnce(&mut RunManifest) -> Result<i32>,
{
    let mut manifest = RunManifest::start(command);
    let result = f(&mut manifest);
    if let Err(e) = manifest.finish(run_dir, &result) {
        log::error!("could not write run manifest: {e}");
        if result.is_ok() {
            return Err(e);
        }
    }
    result
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct PreprocessStats {
    pairs: usize,
    dropped_too_long: usize,
    dropped_empty: usize,
    src_tokens: usize,
    tgt_tokens: usize,
    /// Non-whitespace source codepoints of UTF-8 width 1, 2, 3 and 4.
    src_byte_groups: [usize; 4],
    tgt_byte_groups: [usize; 4],
    dominant_group: usize,
    recommended_k_series: String,
}

fn preprocess(
    m: &mut RunManifest,
    src: &Path,
    tgt: &Path,
    out: &Path,
    max_len: usize,
) -> Result<i32> {
    m.config = serde_json::json!({ "src": src, "tgt": tgt, "max_len": max_len });
    m.add_input(src)?;
    m.add_input(tgt)?;
    let (corpus, report) = load_corpus(src, tgt, max_len)?;
    create_dir(out)?;
    let vocab = Vocab::default();
    let mut histograms = [[0usize; 5]; 2];
    let mut tokens = [0usize; 2];
    for (side, name) in ["src", "tgt"].into_iter().enumerate() {
        let texts: Vec<&str> = if side == 0 {
            corpus.sources().collect()
        } else {
            corpus.targets().collect()
        };
        let mut dump = String::new();
        for text in texts {
            let seq = vocab.encode(text, true);
            tokens[side] += seq.len();
            dump.push_str(&seq.to_string());
            dump.push('\n');
            for (acc, n) in histograms[side].iter_mut().zip(byte_group_histogram(text)) {
                *acc += n;
            }
        }
        let path = out.join(format!("{name}.ids"));
        write_file(&path, &dump)?;
        m.outputs.push(path);
    }
    let dominant = dominant_group(&histograms[0])
        .ok_or_else(|| Error::Empty("source side has no text".into()))?;
    let stats = PreprocessStats {
        pairs: corpus.len(),
        dropped_too_long: report.too_long,
        dropped_empty: report.empty,
        src_tokens: tokens[0],
        tgt_tokens: tokens[1],
        src_byte_groups: histograms[0][1..].try_into().expect("four groups"),
        tgt_byte_groups: histograms[1][1..].try_into().expect("four groups"),
        dominant_group: dominant,
        recommended_k_series: recommend_for_histogram(&histograms[0]).to_string(),
    };
    let path = out.join("stats.json");
    let text = serde_json::to_string_pretty(&stats)?;
    write_file(&path, &text)?;
    m.outputs.push(path);
    println!("{text}");
    Ok(0)
}

fn generate(
    m: &mut RunManifest,
    task: Task,
    script: Script,
    size: usize,
    seed: u64,
    out_src: &Path,
    out_tgt: &Path,
) -> Result<i32> {
    m.config = serde_json::json!({ "task": task, "script": script, "size": size });
    m.seed = Some(seed);
    let corpus = gen_synthetic(task, script, size, seed)?;
    for path in [out_src, out_tgt] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }
    corpus.write(out_src, out_tgt)?;
    m.outputs
        .extend([out_src.to_path_buf(), out_tgt.to_path_buf()]);
    Ok(0)
}

fn load_data(
    cfg: &TrainRunConfig,
    m: &mut RunManifest,
) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let max_len = cfg.data.max_len.unwrap_or(cfg.model.max_positions);
    if let Some([ts, tt, vs, vt]) = cfg.data.files() {
        for p in [ts, tt, vs, vt] {
            m.add_input(p)?;
        }
        let (train_set, report) = load_corpus(ts, tt, max_len)?;
        log::info!("training pairs: {report:?}");
        let (valid, report) = load_corpus(vs, vt, max_len)?;
        log::info!("validation pairs: {report:?}");
        return Ok((train_set, valid));
    }
    let s = cfg.data.synthetic.as_ref().expect("validated");
    let train_set = gen_synthetic(s.task, s.script, s.train_size, s.seed)?;
    let valid = gen_synthetic(s.task, s.script, s.valid_size, s.seed.wrapping_add(1))?;
    Ok((train_set, valid))
}

fn cmd_train(
    m: &mut RunManifest,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    max_steps: Option<usize>,
) -> Result<i32> {
    m.add_input(config)?;
    let mut cfg = train_config(&read_json(config)?, seed)?;
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
        cfg.train.validate()?;
    }
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    let (train_set, valid) = load_data(&cfg, m)?;
    let model = Model::build(cfg.model.clone(), cfg.seed)?;
    log::info!("model with {} parameters", model.num_params());
    let outcome = train(model, &train_set, &valid, &cfg.train, Some(out))?;
    m.outputs.extend([out.join(FINAL_DIR), out.join(LOG_FILE)]);
    println!(
        "{}",
        serde_json::json!({
            "steps": outcome.steps,
            "validations": outcome.log.len(),
            "stop": outcome.stop,
            "best_valid_loss": outcome.best_valid,
            "final": out.join(FINAL_DIR),
        })
    );
    Ok(0)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    if path == Path::new("-") {
        std::io::stdin()
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<stdin>", e))?;
    } else {
        bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(n, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            String::from_utf8(line.to_vec()).map_err(|e| {
                Error::Corpus(format!(
                    "{}:{}: invalid UTF-8 at byte {}",
                    path.display(),
                    n + 1,
                    e.utf8_error().valid_up_to()
                ))
            })
        })
        .collect()
}

fn translate(
    m: &mut RunManifest,
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
    beam: Option<usize>,
) -> Result<i32> {
    let model = Model::load(checkpoint)?;
    let beam = beam.unwrap_or(model.config().beam);
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    m.config =
        serde_json::json!({ "checkpoint": checkpoint, "beam": beam, "model": model.config() });
    m.add_input(&checkpoint.join(crate::autodiff::checkpoint::PARAMS_FILE))?;
    if input != Path::new("-") {
        m.add_input(input)?;
    }
    let lines = read_lines(input)?;
    let hyps = translate_lines(&model, &lines, beam)?;
    let mut text = hyps.join("\n");
    if !hyps.is_empty() {
        text.push('\n');
    }
    match output {
        Some(path) => {
            write_file(path, &text)?;
            m.outputs.push(path.to_path_buf());
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct BleuReport {
    bleu: f64,
    precisions: [f64; 4],
    brevity_penalty: f64,
    sentences: usize,
    #[serde(flatten)]
    stats: BleuStats,
}

#[allow(clippy::too_many_arguments)]
fn eval(
    m: &mut RunManifest,
    checkpoint: Option<&Path>,
    src: Option<&Path>,
    hyp: Option<&Path>,
    reference: &Path,
    beam: Option<usize>,
    run_dir: &Path,
) -> Result<i32> {
    m.add_input(reference)?;
    let refs = read_lines(reference)?;
    let hyps = match (checkpoint, src, hyp) {
        (Some(ckpt), Some(src), _) => {
            let model = Model::load(ckpt)?;
            let beam = beam.unwrap_or(model.config().beam);
            m.config = serde_json::json!({ "checkpoint": ckpt, "beam": beam });
            m.add_input(&ckpt.join(crate::autodiff::checkpoint::PARAMS_FILE))?;
            m.add_input(src)?;
            let sources = read_lines(src)?;
            if sources.len() != refs.len() {
                return Err(Error::Corpus(format!(
                    "{} has {} lines but {} has {}",
                    src.display(),
                    sources.len(),
                    reference.display(),
                    refs.len()
                )));
            }
            translate_lines(&model, &sources, beam)?
        }
        (None, _, Some(hyp)) => {
            m.config = serde_json::json!({ "hyp": hyp });
            m.add_input(hyp)?;
            read_lines(hyp)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs --checkpoint with --src, or --hyp".into(),
            ))
        }
    };
    let stats = corpus_bleu_stats(&hyps, &refs)?;
    let precisions = std::array::from_fn(|i| {
        if stats.totals[i] == 0 {
            0.0
        } else {
            stats.precision(i + 1)
        }
    });
    let report = BleuReport {
        bleu: stats.score(),
        precisions,
        brevity_penalty: stats.brevity_penalty(),
        sentences: hyps.len(),
        stats,
    };
    let text = serde_json::to_string_pretty(&report)?;
    create_dir(run_dir)?;
    let path = run_dir.join("bleu.json");
    write_file(&path, &text)?;
    m.outputs.push(path);
    println!("BLEU = {:.2}", report.bleu);
    println!("{text}");
    Ok(0)
}

fn cmd_gradcheck(
    m: &mut RunManifest,
    scope: Scope,
    seed: u64,
    count: u64,
    run_dir: &Path,
) -> Result<i32> {
    let seeds: Vec<u64> = (seed..seed.saturating_add(count)).collect();
    m.config = serde_json::json!({ "scope": scope, "seeds": seeds });
    m.seed = Some(seed);
    let report = gradcheck(scope, &seeds)?;
    for (name, err) in report.by_name() {
        println!("{name}: max rel err {err:.3e}");
    }
    let kinks: usize = report.results.iter().map(|r| r.kinks).sum();
    if kinks > 0 {
        println!("skipped {kinks} probes that straddled a ReLU kink");
    }
    println!("{}", report.summary());
    create_dir(run_dir)?;
    let path = run_dir.join("gradcheck.json");
    write_file(&path, &serde_json::to_string_pretty(&report)?)?;
    m.outputs.push(path);
    Ok(if report.passed() { 0 } else { 3 })
}

fn cmd_scales(
    m: &mut RunManifest,
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<i32> {
    let value = match config {
        Some(path) => {
            m.add_input(path)?;
            read_json(path)?
        }
        None => serde_json::json!({}),
    };
    let cfg = scales_config(&value, seed)?;
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    create_dir(out)?;
    let matrix = scales_experiment(&cfg, Some(&out.join("cells")))?;
    let tsv = matrix.to_tsv();
    let path: PathBuf = out.join("scores.tsv");
    write_file(&path, &tsv)?;
    m.outputs.push(path);
    print!("{tsv}");
    let failed: Vec<String> = matrix
        .cells
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(j, c)| c.as_ref().err().map(|e| (i, j, e.clone())))
        })
        .map(|(i, j, e)| format!("{}/{}: {e}", matrix.scripts[i], matrix.variants[j].name()))
        .collect();
    for f in &failed {
        eprintln!("cell failed: {f}");
    }
    Ok(if failed.is_empty() { 0 } else { 3 })
}
