//! The seven pipeline commands, as library functions so tests can drive
//! them directly. Every command writes its effective `config.json` plus a
//! `MANIFEST.json` index of the files it produced, and derives all
//! randomness from `config.seed`, so a rerun from the serialized config
//! reproduces every artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use gazedec_core::cvae::{sample_targets, train_cvae, CvaeModel, GeneratedImage};
use gazedec_core::encoder::{
    encode_session, prune_topk, train_encoder, top1_accuracy, ClassPosterior, EncodeMode,
    EncoderModel, SessionStimulus,
};
use gazedec_core::gaze::{simulate_search, FixationLog};
use gazedec_core::rng::Stream;
use gazedec_core::stats::{chi_square_even_split, majority_vote, ConfusionMatrix};
use gazedec_core::stimuli::{build_collage_with, Category, Collage, ALL_CATEGORIES, NUM_CATEGORIES};
use gazedec_core::Tensor;

use crate::config::Config;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::pgm;
use crate::report::{
    write_json, AblationReport, CvaeReport, EncoderReport, EvaluationReport, RunInfo,
};
use crate::session::{read_session, write_session_jsonl};
use crate::tnsr;

/// Tracks the files a command creates and writes the MANIFEST.json index.
struct RunWriter {
    out: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a str,
    artifacts: &'a [String],
}

impl RunWriter {
    fn start(cfg: &Config, out: &Path) -> CliResult<RunWriter> {
        fs::create_dir_all(out)?;
        let mut w = RunWriter {
            out: out.to_path_buf(),
            files: Vec::new(),
        };
        cfg.write(&w.path("config.json"))?;
        w.record("config.json");
        Ok(w)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.files.push(rel.to_string());
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<()> {
        write_json(&self.path(rel), value)?;
        self.record(rel);
        Ok(())
    }

    fn finish(mut self, command: &str) -> CliResult<()> {
        self.files.sort();
        write_json(
            &self.out.join("MANIFEST.json"),
            &Manifest {
                command,
                config: "config.json",
                artifacts: &self.files,
            },
        )
    }
}

fn load_encoder(path: &Path) -> CliResult<EncoderModel> {
    EncoderModel::from_tensors(tnsr::read_checkpoint(path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_cvae(path: &Path) -> CliResult<CvaeModel> {
    CvaeModel::from_tensors(tnsr::read_checkpoint(path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn cmd_gen_data(cfg: &Config, out: &Path) -> CliResult<()> {
    let mut w = RunWriter::start(cfg, out)?;
    let (manifest, files) = dataset::gen_dataset(cfg, out)?;
    for f in &files {
        let rel = f.strip_prefix(out).unwrap_or(f);
        w.record(&rel.to_string_lossy().replace('\\', "/"));
    }
    // One PGM preview per category for eyeballing.
    for split in manifest.splits.iter().filter(|s| s.split == "train") {
        for &category in &ALL_CATEGORIES {
            if let Some(file) = split.files.iter().find(|f| f.category == category.name()) {
                let image = tnsr::read_tensor(&out.join(&file.path))?;
                let rel = format!(
                    "previews/{}.pgm",
                    category.name().to_ascii_lowercase().replace('-', "_")
                );
                pgm::write_pgm(&w.path(&rel), &image)?;
                w.record(&rel);
            }
        }
    }
    let total: usize = manifest.splits.iter().map(|s| s.files.len()).sum();
    println!("gen-data: {total} exemplars under {}", out.display());
    w.finish("gen-data")
}

// ---------------------------------------------------------------------------
// train-encoder / train-cvae
// ---------------------------------------------------------------------------

pub fn cmd_train_encoder(cfg: &Config, out: &Path) -> CliResult<()> {
    let dataset_dir = cfg.require_path("dataset")?.clone();
    let mut w = RunWriter::start(cfg, out)?;
    let train = dataset::load_split(&dataset_dir, "train")?;
    let val = dataset::load_split(&dataset_dir, "val")?;
    let test = dataset::load_split(&dataset_dir, "test")?;
    let core_cfg = cfg.encoder.to_core(cfg.collage.cell_px);
    let (model, history) = train_encoder(&train, &val, &core_cfg, cfg.seed)?;
    let val_accuracy = top1_accuracy(&model, &val, core_cfg.canvas_px)?;
    let test_accuracy = top1_accuracy(&model, &test, core_cfg.canvas_px)?;

    tnsr::write_checkpoint(&w.path("encoder.ckpt"), model.params())?;
    w.record("encoder.ckpt");
    w.write_json(
        "training_report.json",
        &EncoderReport {
            run: RunInfo::new(cfg.seed),
            epochs: core_cfg.epochs,
            batch: core_cfg.batch,
            lr: core_cfg.lr,
            train_examples: train.len(),
            epoch_loss: history.epoch_loss.clone(),
            epoch_val_accuracy: history.epoch_val_accuracy.clone(),
            val_accuracy,
            test_accuracy,
        },
    )?;
    println!(
        "train-encoder: val {:.4}, test {:.4} -> {}",
        val_accuracy,
        test_accuracy,
        out.display()
    );
    w.finish("train-encoder")
}

pub fn cmd_train_cvae(cfg: &Config, out: &Path) -> CliResult<()> {
    let dataset_dir = cfg.require_path("dataset")?.clone();
    let mut w = RunWriter::start(cfg, out)?;
    let train = dataset::load_split(&dataset_dir, "train")?;
    let core_cfg = cfg.cvae.to_core();
    let (model, curve) = train_cvae(&train, &core_cfg, cfg.seed)?;
    tnsr::write_checkpoint(&w.path("cvae.ckpt"), model.params())?;
    w.record("cvae.ckpt");
    w.write_json(
        "training_report.json",
        &CvaeReport {
            run: RunInfo::new(cfg.seed),
            epochs: core_cfg.epochs,
            batch: core_cfg.batch,
            lr: core_cfg.lr,
            train_examples: train.len(),
            epoch_neg_elbo: curve.clone(),
        },
    )?;
    println!(
        "train-cvae: negative ELBO {:.2} -> {:.2} over {} epochs -> {}",
        curve.first().copied().unwrap_or(f32::NAN),
        curve.last().copied().unwrap_or(f32::NAN),
        curve.len(),
        out.display()
    );
    w.finish("train-cvae")
}

// ---------------------------------------------------------------------------
// Session construction shared by simulate / evaluate / ablate
// ---------------------------------------------------------------------------

/// Build one session's collages and fixation logs from a derived stream.
fn build_session(
    cfg: &Config,
    category: Category,
    stream: &Stream,
) -> CliResult<(Vec<Collage>, Vec<FixationLog>)> {
    let collage_params = cfg.collage.to_core(&cfg.render, cfg.data.exemplar_px);
    let gaze_params = cfg.gaze.to_core();
    let n = cfg.session.collages.max(1);
    let mut collages = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    for c in 0..n {
        let mut s = stream.split("collage").split_index(c as u64);
        let collage_seed = s.next_u64();
        let gaze_seed = s.next_u64();
        let collage = build_collage_with(category, collage_seed, &collage_params)?;
        let log = simulate_search(&collage, &gaze_params, gaze_seed)?;
        collages.push(collage);
        logs.push(log);
    }
    Ok((collages, logs))
}

fn encode_built_session(
    cfg: &Config,
    encoder: &EncoderModel,
    collages: &[Collage],
    logs: &[FixationLog],
    mode: EncodeMode,
) -> CliResult<ClassPosterior> {
    let stimuli: Vec<SessionStimulus<'_>> = collages
        .iter()
        .zip(logs)
        .map(|(c, l)| SessionStimulus {
            canvas: &c.canvas,
            fixations: &l.fixations,
        })
        .collect();
    Ok(encode_session(
        encoder,
        &stimuli,
        mode,
        cfg.session.aggregation_enum()?,
        &cfg.fdm.to_core(),
    )?)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(cfg: &Config, out: &Path) -> CliResult<()> {
    let category = cfg.simulate_category()?;
    let mut effective = cfg.clone();
    if let Some(m) = cfg.simulate.collages {
        effective.session.collages = m;
    }
    if effective.simulate.participants == 0 {
        effective.simulate.participants = 1;
    }
    let cfg = &effective;
    let mut w = RunWriter::start(cfg, out)?;
    let root = Stream::new(cfg.seed).split("simulate").split(category.name());
    for p in 0..cfg.simulate.participants {
        let participant = format!("p{p:03}");
        let stream = root.split_index(p as u64);
        let (collages, mut logs) = build_session(cfg, category, &stream)?;
        for (c, (collage, log)) in collages.iter().zip(logs.iter_mut()).enumerate() {
            let rel = format!("collages/{participant}_c{c:03}.tnsr");
            tnsr::write_tensor(&w.path(&rel), &collage.canvas)?;
            w.record(&rel);
            let rel_pgm = format!("collages/{participant}_c{c:03}.pgm");
            pgm::write_pgm(&w.path(&rel_pgm), &collage.canvas)?;
            w.record(&rel_pgm);
            log.participant = participant.clone();
            log.collage_ref = rel;
        }
        let rel = format!("session_{participant}.jsonl");
        write_session_jsonl(&w.path(&rel), &logs)?;
        w.record(&rel);
    }
    println!(
        "simulate: {} participant session(s) searching {:?} -> {}",
        cfg.simulate.participants,
        category.name(),
        out.display()
    );
    w.finish("simulate")
}

// ---------------------------------------------------------------------------
// decode
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PosteriorDump {
    probs: Vec<f32>,
    by_category: std::collections::BTreeMap<String, f32>,
    argmax: String,
    k: String,
    pruned_probs: Vec<f32>,
    pruned_by_category: std::collections::BTreeMap<String, f32>,
    mode: String,
    aggregation: String,
}

#[derive(Serialize)]
struct DecodeSidecar<'a> {
    image: String,
    sample_index: usize,
    condition: &'a [f32],
    z: &'a [f32],
    seed: u64,
    mode: String,
    category_drawn: Option<String>,
}

fn by_category(probs: &[f32]) -> std::collections::BTreeMap<String, f32> {
    ALL_CATEGORIES
        .iter()
        .map(|c| (c.name().to_string(), probs[c.id() as usize]))
        .collect()
}

pub fn cmd_decode(cfg: &Config, out: &Path) -> CliResult<()> {
    let session_path = cfg
        .decode
        .session
        .as_ref()
        .ok_or_else(|| CliError::config("decode.session is not set (pass --session)"))?
        .clone();
    let encoder = load_encoder(cfg.require_path("encoder")?)?;
    let cvae = load_cvae(cfg.require_path("cvae")?)?;
    let mut w = RunWriter::start(cfg, out)?;

    let pairs = read_session(&session_path)?;
    if pairs.is_empty() {
        return Err(CliError::data("decode: empty session"));
    }
    let stimuli: Vec<SessionStimulus<'_>> = pairs
        .iter()
        .map(|(canvas, log)| SessionStimulus {
            canvas,
            fixations: &log.fixations,
        })
        .collect();
    let mode = cfg.session.mode_enum()?;
    let posterior = encode_session(
        &encoder,
        &stimuli,
        mode,
        cfg.session.aggregation_enum()?,
        &cfg.fdm.to_core(),
    )?;
    let k = cfg.session.k_enum()?;
    let pruned = prune_topk(&posterior, k)?;
    let mut seed_stream = Stream::new(cfg.seed).split("decode");
    let decode_seed = seed_stream.next_u64();
    let images = sample_targets(
        &cvae,
        &pruned,
        cfg.decode.samples,
        cfg.decode.sample_mode_enum()?,
        decode_seed,
    )?;

    w.write_json(
        "posterior.json",
        &PosteriorDump {
            probs: posterior.probs().to_vec(),
            by_category: by_category(posterior.probs()),
            argmax: posterior.argmax().name().to_string(),
            k: cfg.session.k.clone(),
            pruned_probs: pruned.probs().to_vec(),
            pruned_by_category: by_category(pruned.probs()),
            mode: cfg.session.mode.clone(),
            aggregation: cfg.session.aggregation.clone(),
        },
    )?;
    for (i, image) in images.iter().enumerate() {
        let rel = format!("decode_{i:03}.pgm");
        pgm::write_pgm(&w.path(&rel), &image.pixels)?;
        w.record(&rel);
        let sidecar_rel = format!("decode_{i:03}.json");
        w.write_json(
            &sidecar_rel,
            &DecodeSidecar {
                image: rel.clone(),
                sample_index: i,
                condition: &image.condition,
                z: &image.z,
                seed: decode_seed,
                mode: cfg.decode.sample_mode.clone(),
                category_drawn: image.category_drawn.map(|c| c.name().to_string()),
            },
        )?;
    }
    println!(
        "decode: posterior argmax {:?}, {} image(s) -> {}",
        posterior.argmax().name(),
        images.len(),
        out.display()
    );
    w.finish("decode")
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn oracle_votes(
    oracle: &EncoderModel,
    images: &[GeneratedImage],
    canvas_px: usize,
) -> CliResult<Vec<Category>> {
    images
        .iter()
        .map(|g| Ok(oracle.classify_on_canvas(&g.pixels, canvas_px)?.argmax()))
        .collect()
}

pub fn cmd_evaluate(cfg: &Config, out: &Path) -> CliResult<()> {
    let encoder = load_encoder(cfg.require_path("encoder")?)?;
    let cvae = load_cvae(cfg.require_path("cvae")?)?;
    let oracle = load_encoder(cfg.require_path("oracle")?)?;
    if cfg.eval.sessions < NUM_CATEGORIES || cfg.eval.sessions % NUM_CATEGORIES != 0 {
        return Err(CliError::config(format!(
            "eval.sessions must be a positive multiple of {NUM_CATEGORIES} so every category is covered, got {}",
            cfg.eval.sessions
        )));
    }
    let mut w = RunWriter::start(cfg, out)?;
    let per_category = cfg.eval.sessions / NUM_CATEGORIES;
    let mode = cfg.session.mode_enum()?;
    let k = cfg.session.k_enum()?;
    let sample_mode = cfg.decode.sample_mode_enum()?;
    let root = Stream::new(cfg.seed).split("evaluate");
    let mut confusion = ConfusionMatrix::new();
    for &category in &ALL_CATEGORIES {
        let cat_stream = root.split_index(category.id() as u64);
        for i in 0..per_category {
            let stream = cat_stream.split_index(i as u64);
            let (collages, logs) = build_session(cfg, category, &stream)?;
            let posterior = encode_built_session(cfg, &encoder, &collages, &logs, mode)?;
            let pruned = prune_topk(&posterior, k)?;
            let mut dstream = stream.split("decode");
            let decode_seed = dstream.next_u64();
            let images =
                sample_targets(&cvae, &pruned, cfg.decode.samples, sample_mode, decode_seed)?;
            let votes = oracle_votes(&oracle, &images, cfg.collage.cell_px)?;
            confusion.record(category, majority_vote(&votes)?);
        }
    }
    let per_category_accuracy = ALL_CATEGORIES
        .iter()
        .zip(confusion.per_category_accuracy())
        .map(|(c, a)| (c.name().to_string(), a))
        .collect();
    let report = EvaluationReport {
        run: RunInfo::new(cfg.seed),
        sessions_per_category: per_category,
        decodes_per_session: cfg.decode.samples,
        k: cfg.session.k.clone(),
        mode: cfg.session.mode.clone(),
        overall_accuracy: confusion.overall_accuracy(),
        per_category_accuracy,
        confusion: confusion.rows(),
        row_sums: ALL_CATEGORIES.iter().map(|&c| confusion.row_sum(c)).collect(),
    };
    w.write_json("evaluation_report.json", &report)?;
    println!(
        "evaluate: overall recovery {:.3} over {} sessions -> {}",
        report.overall_accuracy,
        cfg.eval.sessions,
        out.display()
    );
    w.finish("evaluate")
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub fn cmd_ablate(cfg: &Config, out: &Path) -> CliResult<()> {
    let encoder = load_encoder(cfg.require_path("encoder")?)?;
    let cvae = load_cvae(cfg.require_path("cvae")?)?;
    let oracle = load_encoder(cfg.require_path("oracle")?)?;
    if cfg.eval.trials < 100 {
        return Err(CliError::config(format!(
            "eval.trials must be >= 100 paired trials, got {}",
            cfg.eval.trials
        )));
    }
    let mut w = RunWriter::start(cfg, out)?;
    let k = cfg.session.k_enum()?;
    let sample_mode = cfg.decode.sample_mode_enum()?;
    let root = Stream::new(cfg.seed).split("ablate");
    let (mut local_wins, mut global_wins, mut ties) = (0u32, 0u32, 0u32);
    let (mut local_top1, mut global_top1) = (0u32, 0u32);
    for t in 0..cfg.eval.trials {
        let category = ALL_CATEGORIES[t % NUM_CATEGORIES];
        let stream = root.split_index(t as u64);
        let (collages, logs) = build_session(cfg, category, &stream)?;
        let p_local = encode_built_session(cfg, &encoder, &collages, &logs, EncodeMode::Local)?;
        let p_global = encode_built_session(cfg, &encoder, &collages, &logs, EncodeMode::Global)?;
        if p_local.argmax() == category {
            local_top1 += 1;
        }
        if p_global.argmax() == category {
            global_top1 += 1;
        }
        let mut dstream = stream.split("decode");
        let decode_seed = dstream.next_u64();
        // Same z draws for both modes: the comparison differs only in the
        // condition vector.
        let images_local = sample_targets(
            &cvae,
            &prune_topk(&p_local, k)?,
            cfg.decode.samples,
            sample_mode,
            decode_seed,
        )?;
        let images_global = sample_targets(
            &cvae,
            &prune_topk(&p_global, k)?,
            cfg.decode.samples,
            sample_mode,
            decode_seed,
        )?;
        let m_local = majority_vote(&oracle_votes(&oracle, &images_local, cfg.collage.cell_px)?)?;
        let m_global = majority_vote(&oracle_votes(&oracle, &images_global, cfg.collage.cell_px)?)?;
        match (m_local == category, m_global == category) {
            (true, false) => local_wins += 1,
            (false, true) => global_wins += 1,
            _ => ties += 1,
        }
    }
    let local_points = local_wins as f64 + ties as f64 / 2.0;
    let global_points = global_wins as f64 + ties as f64 / 2.0;
    let (chi_square, p_value) = chi_square_even_split(local_points, global_points)?;
    let report = AblationReport {
        run: RunInfo::new(cfg.seed),
        trials: cfg.eval.trials,
        collages_per_trial: cfg.session.collages,
        k: cfg.session.k.clone(),
        local_wins,
        global_wins,
        ties,
        local_points,
        global_points,
        local_win_rate: local_points / cfg.eval.trials as f64,
        chi_square,
        p_value,
        significant_at_005: p_value < 0.05,
        local_top1_recovery: local_top1 as f64 / cfg.eval.trials as f64,
        global_top1_recovery: global_top1 as f64 / cfg.eval.trials as f64,
    };
    w.write_json("ablation_report.json", &report)?;
    println!(
        "ablate: local win rate {:.3} (chi^2 {:.3}, p {:.4}) over {} trials -> {}",
        report.local_win_rate,
        report.chi_square,
        report.p_value,
        report.trials,
        out.display()
    );
    w.finish("ablate")
}

// ---------------------------------------------------------------------------
// Re-exported helpers for the acceptance suite
// ---------------------------------------------------------------------------

/// Load an encoder checkpoint (public wrapper).
pub fn encoder_from_checkpoint(path: &Path) -> CliResult<EncoderModel> {
    load_encoder(path)
}

/// Load a CVAE checkpoint (public wrapper).
pub fn cvae_from_checkpoint(path: &Path) -> CliResult<CvaeModel> {
    load_cvae(path)
}

/// Build a session and encode it in the given mode; used by tests that
/// need posterior-level access with the same derivations as `evaluate`.
pub fn session_posterior(
    cfg: &Config,
    encoder: &EncoderModel,
    category: Category,
    stream: &Stream,
    mode: EncodeMode,
) -> CliResult<(ClassPosterior, Vec<Collage>, Vec<FixationLog>)> {
    let (collages, logs) = build_session(cfg, category, stream)?;
    let posterior = encode_built_session(cfg, encoder, &collages, &logs, mode)?;
    Ok((posterior, collages, logs))
}

/// Decode a posterior with the standard stream derivation and score the
/// images with an oracle; returns the per-image votes.
pub fn decode_and_vote(
    cfg: &Config,
    cvae: &CvaeModel,
    oracle: &EncoderModel,
    posterior: &ClassPosterior,
    stream: &Stream,
) -> CliResult<Vec<Category>> {
    let k = cfg.session.k_enum()?;
    let pruned = prune_topk(posterior, k)?;
    let mut dstream = stream.split("decode");
    let decode_seed = dstream.next_u64();
    let images = sample_targets(
        cvae,
        &pruned,
        cfg.decode.samples,
        cfg.decode.sample_mode_enum()?,
        decode_seed,
    )?;
    oracle_votes(oracle, &images, cfg.collage.cell_px)
}
