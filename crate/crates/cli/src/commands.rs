use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capcore::data::{
    expand_examples, format_action_justification, normalize_and_tokenize, split, CaptionRecord, VisualSource,
    Vocabulary,
};
use capcore::metrics::{evaluate_corpus, EvalPair};
use capcore::model::{generate, ModelParams, Strategy};
use capcore::training::{evaluate_loss, TrainData, Trainer};
use capcore::vision::{sample_frames, standardize_frame, ResNetMini, VisualFeatureSet};
use capcore::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Decoding, RunConfig};
use crate::error::{CliError, CliResult};
use crate::features::{read_features, write_features};
use crate::manifest::{read_manifest, resolve, write_manifest};
use crate::report::{plot_data, render_machine, render_text};

fn manifest_path(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.data
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("no manifest given (--manifest or data.manifest)".into()))
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::data(p.display(), e))
}

fn write_file(p: &Path, text: &str) -> CliResult<()> {
    fs::write(p, text).map_err(|e| CliError::data(p.display(), e))
}

/// Writes the resolved configuration next to the outputs.
pub fn echo_config(cfg: &RunConfig, command: &str) -> CliResult<()> {
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(format!("{command}.config.toml")), &cfg.echo())
}

/// File-name-safe form of a video id.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Paths written into an output manifest: unchanged when the output sits
/// beside the input manifest, absolute otherwise.
fn rebase(records: &[CaptionRecord], from: &Path, to_dir: &Path) -> Vec<CaptionRecord> {
    let from_dir = from.parent().unwrap_or(Path::new("."));
    let same = match (fs::canonicalize(if from_dir.as_os_str().is_empty() { Path::new(".") } else { from_dir }), fs::canonicalize(to_dir)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    records
        .iter()
        .cloned()
        .map(|mut r| {
            if !same {
                let fix = |p: &String| {
                    let full = resolve(from, p);
                    std::path::absolute(&full).unwrap_or(full).to_string_lossy().into_owned()
                };
                r.source = match &r.source {
                    VisualSource::Features(p) => VisualSource::Features(fix(p)),
                    VisualSource::Frames(p) => VisualSource::Frames(fix(p)),
                };
            }
            r
        })
        .collect()
}

/// Sorted `.png` files of a frame directory.
pub fn list_frames(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(dir.display(), e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| CliError::data(dir.display(), e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .png frames", dir.display())));
    }
    Ok(files)
}

/// Loads an image as a `[3×size×size]` tensor in `[0, 1]`.
pub fn load_frame(path: &Path, size: usize) -> CliResult<Tensor> {
    let img = image::open(path).map_err(|e| CliError::data(path.display(), e))?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, size, size], data)?)
}

fn extract_one(record: &CaptionRecord, manifest: &Path, net: &ResNetMini, cfg: &RunConfig) -> CliResult<VisualFeatureSet> {
    match &record.source {
        VisualSource::Features(p) => Ok(read_features(&resolve(manifest, p))?),
        VisualSource::Frames(d) => {
            let files = list_frames(&resolve(manifest, d))?;
            let n = cfg.extract.frames_per_video.min(files.len());
            let picks = sample_frames(files.len(), n, cfg.extract.sample_policy())?;
            let mut frames = Vec::with_capacity(picks.len());
            for &i in &picks {
                frames.push(standardize_frame(&load_frame(&files[i], cfg.extract.input_size)?));
            }
            let indices: Vec<u32> = picks.iter().map(|&i| i as u32).collect();
            let mut set = net.extract_features(&record.video_id, &frames, &indices)?;
            set.video_id = record.video_id.clone();
            Ok(set)
        }
    }
}

pub fn extract(cfg: &RunConfig, keep_going: bool, force: bool) -> CliResult<()> {
    let manifest = manifest_path(cfg)?;
    let records = read_manifest(manifest)?;
    let feature_dir = cfg.out.join("features");
    let index_path = cfg.out.join("index.jsonl");
    let names: Vec<String> = records.iter().map(|r| format!("{}.mmvc", file_stem(&r.video_id))).collect();
    let mut unique = std::collections::BTreeSet::new();
    for (r, n) in records.iter().zip(&names) {
        if !unique.insert(n) {
            return Err(CliError::Data(format!("video id {:?} collides with another as a file name", r.video_id)));
        }
    }
    if !force {
        let existing = std::iter::once(index_path.clone())
            .chain(names.iter().map(|n| feature_dir.join(n)))
            .find(|p| p.exists());
        if let Some(p) = existing {
            return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", p.display())));
        }
    }
    create_dir(&feature_dir)?;
    let net = ResNetMini::new(cfg.extract.resnet(), cfg.seed)?;
    let threads = match cfg.extract.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(records.len().max(1));
    let mut results: Vec<Option<CliResult<VisualFeatureSet>>> = (0..records.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads)
            .map(|w| {
                let (records, net) = (&records, &net);
                s.spawn(move || {
                    (w..records.len())
                        .step_by(threads)
                        .map(|i| (i, extract_one(&records[i], manifest, net, cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in workers {
            for (i, r) in h.join().expect("extraction worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut index = Vec::new();
    let mut failed = Vec::new();
    for ((record, name), result) in records.iter().zip(&names).zip(results) {
        match result.expect("every record processed") {
            Ok(set) => {
                write_features(&set, &feature_dir.join(name))?;
                let mut r = record.clone();
                r.source = VisualSource::Features(format!("features/{name}"));
                index.push(r);
            }
            Err(e) => {
                log::warn!("{}: {e}", record.video_id);
                failed.push(record.video_id.clone());
            }
        }
    }
    write_manifest(&index_path, &index)?;
    log::info!("extracted {} of {} videos", index.len(), records.len());
    if !failed.is_empty() && !keep_going {
        return Err(CliError::Data(format!("extraction failed for {}", failed.join(", "))));
    }
    Ok(())
}

pub fn split_cmd(cfg: &RunConfig) -> CliResult<()> {
    let manifest = manifest_path(cfg)?;
    let records = read_manifest(manifest)?;
    let (train, test) = split(&records, cfg.data.test_fraction, cfg.seed)?;
    create_dir(&cfg.out)?;
    write_manifest(&cfg.out.join("train.jsonl"), &rebase(&train, manifest, &cfg.out))?;
    write_manifest(&cfg.out.join("test.jsonl"), &rebase(&test, manifest, &cfg.out))?;
    log::info!("split {} records into {} train and {} test", records.len(), train.len(), test.len());
    Ok(())
}

/// Reads the feature file of every record.
pub fn load_features(records: &[CaptionRecord], manifest: &Path) -> CliResult<BTreeMap<String, VisualFeatureSet>> {
    let mut out = BTreeMap::new();
    for r in records {
        let VisualSource::Features(p) = &r.source else {
            return Err(CliError::Data(format!("{}: record has frames, run extract first", r.video_id)));
        };
        let path = resolve(manifest, p);
        let mut set = read_features(&path).map_err(|e| CliError::Data(format!("{}: {}: {e}", r.video_id, path.display())))?;
        set.video_id = r.video_id.clone();
        out.insert(r.video_id.clone(), set);
    }
    Ok(out)
}

/// Training corpus of a manifest.
pub fn train_data(cfg: &RunConfig, manifest: &Path) -> CliResult<TrainData> {
    let records = read_manifest(manifest)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", manifest.display())));
    }
    let features = load_features(&records, manifest)?;
    let examples = expand_examples(&records);
    let corpus: Vec<Vec<String>> = examples.iter().map(|e| normalize_and_tokenize(&e.text)).collect();
    let vocab = Vocabulary::build(&corpus, cfg.data.min_frequency, cfg.data.vocab_cap)?;
    Ok(TrainData { examples, features, vocab })
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.mmck")
}

/// Checkpoints in a directory, oldest first.
pub fn list_checkpoints(dir: &Path) -> Vec<(usize, PathBuf)> {
    let mut out: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix("epoch-")?.strip_suffix(".mmck")?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    out.sort();
    out
}

const LOG_HEADER: &str = "step\tepoch\tloss\tgrad_norm\tloss_scale\tskipped\twall_time\n";

/// Keeps log rows up to `step`, dropping those a resumed run will redo.
fn trim_log(path: &Path, step: u64) -> CliResult<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return write_file(path, LOG_HEADER);
    };
    let mut kept = String::from(LOG_HEADER);
    for line in text.lines().skip(1) {
        let s: Option<u64> = line.split('\t').next().and_then(|v| v.parse().ok());
        if s.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_file(path, &kept)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub global_step: u64,
    pub last_epoch_loss: f64,
    /// Token-mean NLL over the training set after the last update.
    pub train_loss: f64,
}

pub fn train(cfg: &RunConfig, resume: bool, force: bool) -> CliResult<TrainSummary> {
    let manifest = manifest_path(cfg)?;
    let data = train_data(cfg, manifest)?;
    let feature_dim = data.features.values().next().map(|f| f.cols()).unwrap_or(1);
    if let Some(f) = data.features.values().find(|f| f.cols() != feature_dim) {
        return Err(CliError::Data(format!("{}: feature width {} differs from {feature_dim}", f.video_id, f.cols())));
    }
    let ck_dir = cfg.out.join("checkpoints");
    let log_path = cfg.out.join("train_log.tsv");
    create_dir(&ck_dir)?;
    let existing = list_checkpoints(&ck_dir);
    let train_cfg = cfg.train.train_config(cfg.seed);
    let mut trainer = match existing.last() {
        Some((_, path)) if resume => {
            let ck = load_checkpoint(path)?;
            let (mut t, vocab) = Trainer::from_checkpoint(ck)?;
            if vocab != data.vocab {
                return Err(CliError::Data(format!("{}: vocabulary differs from the training manifest", path.display())));
            }
            let mut wanted = train_cfg.clone();
            wanted.epochs = t.config.epochs;
            if wanted != t.config {
                log::warn!("resuming with the checkpoint's training settings");
            }
            t.config.epochs = train_cfg.epochs;
            trim_log(&log_path, t.global_step)?;
            log::info!("resuming from {} (epoch {})", path.display(), t.epoch);
            t
        }
        Some((_, path)) if !force => {
            return Err(CliError::Usage(format!(
                "{} exists; pass --resume to continue or --force to start over",
                path.display()
            )));
        }
        _ => {
            for (_, p) in &existing {
                fs::remove_file(p).map_err(|e| CliError::data(p.display(), e))?;
            }
            write_file(&log_path, LOG_HEADER)?;
            let model_cfg = cfg.model.model_config(data.vocab.len(), feature_dim);
            Trainer::new(ModelParams::init(model_cfg, cfg.seed)?, train_cfg)?
        }
    };
    let start = Instant::now();
    let mut last_epoch_loss = f64::NAN;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::data(log_path.display(), e))?;
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.train_epoch(&data).map_err(|e| match CliError::from(e) {
            CliError::Numeric(m) => {
                let last = list_checkpoints(&ck_dir).last().map(|(_, p)| p.display().to_string());
                CliError::Numeric(format!("{m}; last good checkpoint: {}", last.unwrap_or_else(|| "none".into())))
            }
            other => other,
        })?;
        if !stats.mean_loss.is_finite() {
            return Err(CliError::Numeric(format!("epoch {} loss is {}", stats.epoch, stats.mean_loss)));
        }
        let wall = start.elapsed().as_secs_f64();
        let mut rows = String::new();
        for s in &stats.steps {
            rows.push_str(&format!(
                "{}\t{}\t{:?}\t{:?}\t{:?}\t{}\t{wall:.3}\n",
                s.step, stats.epoch, s.loss, s.grad_norm, s.loss_scale, s.skipped as u8
            ));
        }
        log.write_all(rows.as_bytes()).map_err(|e| CliError::data(log_path.display(), e))?;
        let path = ck_dir.join(checkpoint_name(trainer.epoch));
        save_checkpoint(&trainer.checkpoint(&data.vocab, true), &path)?;
        let all = list_checkpoints(&ck_dir);
        for (_, old) in all.iter().take(all.len().saturating_sub(cfg.train.keep_last)) {
            fs::remove_file(old).map_err(|e| CliError::data(old.display(), e))?;
        }
        log::info!(
            "epoch {} loss {:.5} grad norm {:.4} updates {} skipped {}",
            stats.epoch,
            stats.mean_loss,
            stats.grad_norm_mean,
            stats.updates,
            stats.skipped
        );
        last_epoch_loss = stats.mean_loss;
    }
    save_checkpoint(&trainer.checkpoint(&data.vocab, false), &cfg.out.join("model.mmck"))?;
    let train_loss = evaluate_loss(&trainer.model, &data, trainer.config.batch_size, trainer.config.max_len)?;
    let summary = TrainSummary {
        epochs: trainer.epoch,
        global_step: trainer.global_step,
        last_epoch_loss,
        train_loss,
    };
    write_file(
        &cfg.out.join("train_summary.txt"),
        &format!(
            "epochs={}\nglobal_step={}\nlast_epoch_loss={:?}\ntrain_loss={:?}\n",
            summary.epochs, summary.global_step, summary.last_epoch_loss, summary.train_loss
        ),
    )?;
    println!("train_loss={:?}", summary.train_loss);
    Ok(summary)
}

pub fn generate_cmd(cfg: &RunConfig) -> CliResult<()> {
    let manifest = manifest_path(cfg)?;
    let ck_path = cfg
        .generate
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("no checkpoint given (--checkpoint or generate.checkpoint)".into()))?;
    let ck = load_checkpoint(ck_path)?;
    let vocab = ck.vocab.clone();
    let params = ModelParams::from_named(ck.model_config, ck.params)?;
    let records = read_manifest(manifest)?;
    let features = load_features(&records, manifest)?;
    let strategy = match cfg.generate.strategy {
        Decoding::Greedy => Strategy::Greedy,
        Decoding::Beam => Strategy::Beam(cfg.generate.beam_width),
    };
    let mut out = String::new();
    for r in &records {
        let ids = generate(&features[&r.video_id], &params, strategy, cfg.generate.max_len)?;
        let text = vocab.decode(&ids)?;
        out.push_str(&format!("{}\t{text}\n", r.video_id));
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("captions.tsv"), &out)
}

/// `video_id TAB caption` lines.
pub fn read_captions(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("{}:{}: expected video_id<TAB>caption", path.display(), n + 1)))?;
        out.push((id.to_string(), caption.to_string()));
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig, machine: bool, plot: bool) -> CliResult<String> {
    let captions_path = cfg
        .data
        .captions
        .as_deref()
        .ok_or_else(|| CliError::Usage("no captions file given (--captions or data.captions)".into()))?;
    let refs_path = cfg
        .data
        .references
        .as_deref()
        .ok_or_else(|| CliError::Usage("no reference manifest given (--references or data.references)".into()))?;
    let captions = read_captions(captions_path)?;
    let refs: BTreeMap<String, CaptionRecord> =
        read_manifest(refs_path)?.into_iter().map(|r| (r.video_id.clone(), r)).collect();
    let missing: Vec<&str> = captions.iter().filter(|(id, _)| !refs.contains_key(id)).map(|(id, _)| id.as_str()).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("no references for: {}", missing.join(", "))));
    }
    let pairs = captions
        .iter()
        .map(|(id, text)| {
            let references = format_action_justification(&refs[id]).iter().map(|r| normalize_and_tokenize(r)).collect();
            EvalPair::new(normalize_and_tokenize(text), references)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate_corpus(&pairs, &cfg.metrics.metric_config()).map_err(|e| CliError::Data(e.to_string()))?;
    let text = if machine { render_machine(&report) } else { render_text(&report) };
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("report.txt"), &text)?;
    if plot {
        let ids: Vec<String> = captions.into_iter().map(|(id, _)| id).collect();
        write_file(&cfg.out.join("plot_data.tsv"), &plot_data(&report, &ids))?;
    }
    print!("{text}");
    Ok(text)
}
