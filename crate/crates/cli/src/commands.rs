use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use fcntag::audio::{
    extract_features, read_feature, read_feature_header, read_wav, write_feature, FeatureKind,
    FeatureMatrix, FrontendConfig,
};
use fcntag::data::{
    build_vocab, label_matrix, read_manifest, synth_generate, Split, SynthConfig, TagVocabulary,
};
use fcntag::eval::{bar_chart, bins_per_khz, line_plot, roc_curve, write_report, Series, TagScores};
use fcntag::model::{load_checkpoint, model_spec, param_count, shape_trace, Model, ModelSpec};
use fcntag::train::{
    predict_set, read_history, train, FeatureSource, RunPaths, TaggedSet, TrainConfig, TrainError,
};

use crate::config::Config;
use crate::{
    CliError, EvaluateArgs, InspectArgs, PlotArgs, PredictArgs, PreprocessArgs, SynthArgs,
    TrainArgs,
};

const INDEX_HEADER: &str = "clip_id,path";
const EVAL_BATCH: usize = 32;

fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::LogMel => "mel",
        FeatureKind::LogStft => "stft",
        FeatureKind::MfccStack => "mfcc",
    }
}

fn data_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(data_err(path))
}

fn frontend_defaults(cfg: &mut Config) {
    let fc = FrontendConfig::default();
    cfg.set("frontend.target_rate", fc.target_rate);
    cfg.set("frontend.n_fft", fc.n_fft);
    cfg.set("frontend.hop", fc.hop);
    cfg.set("frontend.n_frames", fc.n_frames);
    cfg.set("frontend.n_mels", fc.n_mels);
    cfg.set("frontend.n_mfcc", fc.n_mfcc);
    cfg.set("frontend.fmin", fc.fmin);
    cfg.set("frontend.fmax", fc.fmax);
}

fn frontend_from(cfg: &Config) -> Result<FrontendConfig, CliError> {
    let fc = FrontendConfig {
        target_rate: cfg.parse("frontend.target_rate")?,
        n_fft: cfg.parse("frontend.n_fft")?,
        hop: cfg.parse("frontend.hop")?,
        n_frames: cfg.parse("frontend.n_frames")?,
        n_mels: cfg.parse("frontend.n_mels")?,
        n_mfcc: cfg.parse("frontend.n_mfcc")?,
        fmin: cfg.parse("frontend.fmin")?,
        fmax: cfg.parse("frontend.fmax")?,
    };
    fc.validate()?;
    Ok(fc)
}

fn train_defaults(cfg: &mut Config) {
    let tc = TrainConfig::default();
    cfg.set("train.batch_size", tc.batch_size);
    cfg.set("train.lr", tc.lr);
    cfg.set("train.beta1", tc.beta1);
    cfg.set("train.beta2", tc.beta2);
    cfg.set("train.eps", tc.eps_adam);
    cfg.set("train.max_epochs", tc.max_epochs);
    cfg.set("train.patience", tc.patience);
    cfg.set("train.seed", tc.seed);
    cfg.set("data.tags", 50);
}

fn train_from(cfg: &Config) -> Result<TrainConfig, CliError> {
    let tc = TrainConfig {
        batch_size: cfg.parse("train.batch_size")?,
        lr: cfg.parse("train.lr")?,
        beta1: cfg.parse("train.beta1")?,
        beta2: cfg.parse("train.beta2")?,
        eps_adam: cfg.parse("train.eps")?,
        max_epochs: cfg.parse("train.max_epochs")?,
        patience: cfg.parse("train.patience")?,
        seed: cfg.parse("train.seed")?,
    };
    tc.validate()?;
    Ok(tc)
}

struct DiskFeatures {
    paths: Vec<PathBuf>,
}

impl FeatureSource for DiskFeatures {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn get(&self, index: usize) -> Result<FeatureMatrix, TrainError> {
        read_feature(&self.paths[index])
            .map_err(|e| TrainError::BadData(format!("{}: {e}", self.paths[index].display())))
    }
}

fn read_index(features_dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let path = features_dir.join("index.csv");
    let text = fs::read_to_string(&path).map_err(data_err(&path))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != INDEX_HEADER {
                return Err(CliError::Data(format!(
                    "{}: bad header '{line}'",
                    path.display()
                )));
            }
            continue;
        }
        let Some((id, rel)) = line.split_once(',') else {
            return Err(CliError::Data(format!("{}: bad line '{line}'", path.display())));
        };
        map.insert(id.to_string(), features_dir.join(rel));
    }
    Ok(map)
}

fn features_for(
    clip_ids: &[String],
    index: &BTreeMap<String, PathBuf>,
) -> Result<DiskFeatures, CliError> {
    let mut paths = Vec::with_capacity(clip_ids.len());
    for id in clip_ids {
        let p = index
            .get(id)
            .ok_or_else(|| CliError::Data(format!("clip '{id}' missing from feature index")))?;
        paths.push(p.clone());
    }
    Ok(DiskFeatures { paths })
}

/// The first feature file must agree with what the model expects; a precise
/// message here beats a shape error deep inside the forward pass.
fn check_feature_shape(feats: &DiskFeatures, spec: &ModelSpec) -> Result<(), CliError> {
    let (kind, bands, frames, _) = read_feature_header(&feats.paths[0])?;
    if kind != spec.input_kind || bands != spec.input_bands || frames != spec.input_frames {
        return Err(CliError::Data(format!(
            "features are {} {}x{}, model {} expects {} {}x{}",
            kind_name(kind),
            bands,
            frames,
            spec.name,
            kind_name(spec.input_kind),
            spec.input_bands,
            spec.input_frames
        )));
    }
    Ok(())
}

fn worker_pool() -> Result<Option<rayon::ThreadPool>, CliError> {
    match std::env::var("FCN_NUM_WORKERS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    CliError::Usage(format!("FCN_NUM_WORKERS='{v}' is not a positive integer"))
                })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Data(e.to_string()))?;
            Ok(Some(pool))
        }
        Err(_) => Ok(None),
    }
}

pub fn cmd_preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let mut cfg = Config::new();
    frontend_defaults(&mut cfg);
    if let Some(file) = &a.config {
        cfg.merge_file(file)?;
    }
    cfg.set_opt("data.manifest", a.manifest.as_deref().map(Path::display));
    cfg.set_opt("frontend.kind", a.input.as_deref());
    cfg.set_opt("frontend.n_frames", a.frames);
    cfg.set_opt("preprocess.out", a.out.as_deref().map(Path::display));

    let kind = FeatureKind::parse(cfg.require("frontend.kind")?)
        .ok_or_else(|| CliError::Usage("frontend.kind must be mel, stft or mfcc".into()))?;
    let fc = frontend_from(&cfg)?;
    let manifest_path = PathBuf::from(cfg.require("data.manifest")?);
    let out = PathBuf::from(cfg.require("preprocess.out")?);
    let manifest = read_manifest(&manifest_path)?;

    make_dir(&out.join("features"))?;
    cfg.write(&out.join("config.txt"))?;

    let bands = kind.band_count(&fc);
    let hash = fc.hash();
    let process = |entry: &fcntag::data::ManifestEntry| -> Result<bool, String> {
        let feat_path = out.join("features").join(format!("{}.feat", entry.clip_id));
        if let Ok((k, b, f, h)) = read_feature_header(&feat_path) {
            if k == kind && b == bands && f == fc.n_frames && h == hash {
                return Ok(false);
            }
        }
        let clip = read_wav(&entry.path).map_err(|e| e.to_string())?;
        let m = extract_features(&clip, &fc, kind).map_err(|e| e.to_string())?;
        write_feature(&feat_path, &m).map_err(|e| e.to_string())?;
        Ok(true)
    };
    let run = || manifest.entries.par_iter().map(process).collect::<Vec<_>>();
    let results = match worker_pool()? {
        Some(pool) => pool.install(run),
        None => run(),
    };

    let index_path = out.join("index.csv");
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut failures = String::new();
    let (mut written, mut fresh) = (0usize, 0usize);
    for (entry, result) in manifest.entries.iter().zip(&results) {
        match result {
            Ok(wrote) => {
                if *wrote {
                    written += 1;
                } else {
                    fresh += 1;
                }
                index.push_str(&format!("{},features/{}.feat\n", entry.clip_id, entry.clip_id));
            }
            Err(msg) => failures.push_str(&format!("{},{msg}\n", entry.clip_id)),
        }
    }
    fs::write(&index_path, index).map_err(data_err(&index_path))?;
    println!("preprocess: {written} written, {fresh} up to date");
    if !failures.is_empty() {
        let failures_path = out.join("failures.txt");
        fs::write(&failures_path, &failures).map_err(data_err(&failures_path))?;
        return Err(CliError::Data(format!(
            "{} clips failed; see {}",
            failures.lines().count(),
            failures_path.display()
        )));
    }
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = Config::new();
    train_defaults(&mut cfg);
    if let Some(file) = &a.config {
        cfg.merge_file(file)?;
    }
    cfg.set_opt("data.manifest", a.manifest.as_deref().map(Path::display));
    cfg.set_opt("data.features", a.features.as_deref().map(Path::display));
    cfg.set_opt("data.tags", a.tags);
    cfg.set_opt("model.name", a.model.as_deref());
    cfg.set_opt("run.out", a.out.as_deref().map(Path::display));
    cfg.set_opt("train.seed", a.seed);
    cfg.set_opt("train.max_epochs", a.epochs);
    cfg.set_opt("train.batch_size", a.batch_size);
    cfg.set_opt("train.lr", a.lr);
    cfg.set_opt("train.patience", a.patience);

    let k: usize = cfg.parse("data.tags")?;
    let spec = model_spec(cfg.require("model.name")?, k)?;
    cfg.set("model.input", kind_name(spec.input_kind));
    if let Some(input) = &a.input {
        if input != kind_name(spec.input_kind) {
            return Err(CliError::Usage(format!(
                "--input {input} contradicts model {}, which takes {}",
                spec.name,
                kind_name(spec.input_kind)
            )));
        }
    }
    let tc = train_from(&cfg)?;

    let manifest = read_manifest(&PathBuf::from(cfg.require("data.manifest")?))?;
    let vocab = build_vocab(&manifest, k)?;
    let index = read_index(&PathBuf::from(cfg.require("data.features")?))?;
    let train_rows = label_matrix(&manifest, &vocab, Split::Train, false);
    let val_rows = label_matrix(&manifest, &vocab, Split::Valid, false);
    let train_feats = features_for(&train_rows.clip_ids, &index)?;
    let val_feats = features_for(&val_rows.clip_ids, &index)?;
    check_feature_shape(&train_feats, &spec)?;
    let train_set = TaggedSet::new(&train_feats, &train_rows.labels, k)?;
    let val_set = TaggedSet::new(&val_feats, &val_rows.labels, k)?;

    let out = PathBuf::from(cfg.require("run.out")?);
    make_dir(&out)?;
    cfg.write(&out.join("config.txt"))?;
    let spec_path = out.join("model.txt");
    fs::write(&spec_path, spec.to_text()).map_err(data_err(&spec_path))?;

    println!(
        "training {} on {} clips ({} validation), {} tags",
        spec.name,
        train_rows.n(),
        val_rows.n(),
        k
    );
    let mut model = Model::build(&spec, tc.seed)?;
    let paths = RunPaths {
        best_checkpoint: out.join("best.ckpt"),
        history: out.join("history.csv"),
    };
    let history = train(&mut model, &train_set, &val_set, &tc, &paths, |r| {
        println!(
            "epoch {:>3}  train loss {:.4}  val auc {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_macro_auc, r.wall_time_s
        );
    })?;
    println!(
        "best epoch {} val macro AUC {:.4}; run dir {}",
        history.best_epoch,
        history.best_val_auc,
        out.display()
    );
    Ok(())
}

fn load_labeled_split(
    manifest_path: &Path,
    features_dir: &Path,
    split: Split,
    k: usize,
) -> Result<(TagVocabulary, DiskFeatures, Vec<f32>, Vec<String>), CliError> {
    let manifest = read_manifest(manifest_path)?;
    let vocab = build_vocab(&manifest, k)?;
    let index = read_index(features_dir)?;
    let rows = label_matrix(&manifest, &vocab, split, false);
    let feats = features_for(&rows.clip_ids, &index)?;
    Ok((vocab, feats, rows.labels, rows.clip_ids))
}

fn open_checkpoint(path: &Path) -> Result<Model, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let split = Split::parse(&a.split)
        .ok_or_else(|| CliError::Usage(format!("bad split '{}'", a.split)))?;
    let mut model = open_checkpoint(&a.checkpoint)?;
    let k = model.spec.output_dim;
    let (vocab, feats, labels, _) = load_labeled_split(&a.manifest, &a.features, split, k)?;
    check_feature_shape(&feats, &model.spec)?;
    let scores = predict_set(&mut model, &feats, EVAL_BATCH)?;
    let report = fcntag::eval::macro_auc(&scores, &labels, feats.len(), k)?;

    make_dir(&a.out)?;
    let csv_path = a.out.join(format!("auc_{}.csv", split.as_str()));
    write_report(&csv_path, &vocab.tags, &report).map_err(data_err(&csv_path))?;
    println!(
        "macro AUC ({}): {:.4}  [{} tags scored, {} skipped]",
        split.as_str(),
        report.macro_auc,
        k - report.n_skipped,
        report.n_skipped
    );
    println!("per-tag report: {}", csv_path.display());

    if a.roc {
        let n = feats.len();
        let mut curves = Vec::new();
        for (tag, t_idx) in vocab.tags.iter().zip(0..k) {
            if report.per_tag[t_idx].is_none() {
                continue;
            }
            let tag_scores: Vec<f64> = (0..n).map(|i| scores[i * k + t_idx] as f64).collect();
            let tag_labels: Vec<bool> = (0..n).map(|i| labels[i * k + t_idx] > 0.5).collect();
            let points = roc_curve(&TagScores::new(tag_scores, tag_labels)?)?;
            curves.push((tag.clone(), points));
        }
        let series: Vec<Series<'_>> =
            curves.iter().map(|(l, p)| Series { label: l, points: p }).collect();
        let svg_path = a.out.join(format!("roc_{}.svg", split.as_str()));
        line_plot(
            &svg_path,
            &format!("ROC, {} split", split.as_str()),
            "false positive rate",
            "true positive rate",
            &series,
        )
        .map_err(data_err(&svg_path))?;
        println!("ROC curves: {}", svg_path.display());
    }
    Ok(())
}

pub fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let mut model = open_checkpoint(&a.checkpoint)?;
    let k = model.spec.output_dim;
    let manifest = read_manifest(&a.manifest)?;
    let index = read_index(&a.features)?;
    let split = match &a.split {
        Some(s) => {
            Some(Split::parse(s).ok_or_else(|| CliError::Usage(format!("bad split '{s}'")))?)
        }
        None => None,
    };
    let clip_ids: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| split.map_or(true, |s| e.split == s))
        .map(|e| e.clip_id.clone())
        .collect();
    if clip_ids.is_empty() {
        return Err(CliError::Data("no clips selected".into()));
    }
    let feats = features_for(&clip_ids, &index)?;
    check_feature_shape(&feats, &model.spec)?;
    let scores = predict_set(&mut model, &feats, EVAL_BATCH)?;

    let tags = match build_vocab(&manifest, k) {
        Ok(v) => v.tags,
        Err(_) => (0..k).map(|i| format!("tag{i:02}")).collect(),
    };
    let mut out = String::from("clip_id");
    for t in &tags {
        out.push(',');
        out.push_str(t);
    }
    out.push('\n');
    for (i, id) in clip_ids.iter().enumerate() {
        out.push_str(id);
        for t_idx in 0..k {
            out.push_str(&format!(",{:.6}", scores[i * k + t_idx]));
        }
        out.push('\n');
    }
    fs::write(&a.out, out).map_err(data_err(&a.out))?;
    println!("wrote scores for {} clips to {}", clip_ids.len(), a.out.display());
    Ok(())
}

pub fn cmd_inspect(a: InspectArgs) -> Result<(), CliError> {
    let spec = model_spec(&a.model, a.output_dim)?;
    println!(
        "{}: {} {}x{} input, {} tags",
        spec.name,
        kind_name(spec.input_kind),
        spec.input_bands,
        spec.input_frames,
        spec.output_dim
    );
    println!();
    print!("{}", spec.to_text());
    println!();
    println!("{:<10}  {}", "stage", "freq x time x ch");
    println!("{:<10}  {} x {} x 1", "input", spec.input_bands, spec.input_frames);
    for (i, (h, w, c)) in shape_trace(&spec)?.iter().enumerate() {
        println!("{:<10}  {} x {} x {}", format!("stage {}", i + 1), h, w, c);
    }
    println!();
    let counts = param_count(&spec)?;
    println!("{:<14}  {:>9}  {:>6}", "layer", "learned", "stats");
    for layer in &counts.per_layer {
        println!("{:<14}  {:>9}  {:>6}", layer.name, layer.learned, layer.stats);
    }
    println!("{:<14}  {:>9}  {:>6}", "total", counts.total_learned, counts.total_stats);
    if spec.name == "fcn4" {
        println!();
        println!(
            "note: this ladder is often depicted with intermediate maps 24x85 and 12x21; \
             those sizes contradict the stated pool sizes (4,5) and (3,8), which floor-divide \
             48x341 to 12x68 and then 4x8 as traced above (and do reach 1x1)."
        );
    }
    Ok(())
}

pub fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg = Config::new();
    let d = SynthConfig::default();
    cfg.set("synth.clips", d.n_clips);
    cfg.set("synth.seconds", d.duration_s);
    cfg.set("synth.rate", d.sample_rate);
    cfg.set("synth.seed", d.seed);
    if let Some(file) = &a.config {
        cfg.merge_file(file)?;
    }
    cfg.set_opt("synth.clips", a.clips);
    cfg.set_opt("synth.seconds", a.seconds);
    cfg.set_opt("synth.rate", a.rate);
    cfg.set_opt("synth.seed", a.seed);
    let sc = SynthConfig {
        n_clips: cfg.parse("synth.clips")?,
        duration_s: cfg.parse("synth.seconds")?,
        sample_rate: cfg.parse("synth.rate")?,
        seed: cfg.parse("synth.seed")?,
    };
    make_dir(&a.out)?;
    cfg.write(&a.out.join("config.txt"))?;
    let manifest = synth_generate(&sc, &a.out)?;
    let count = |s: Split| manifest.split(s).count();
    println!(
        "synthesized {} clips ({} train / {} valid / {} test) under {}",
        manifest.entries.len(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn run_label(dir: &Path) -> String {
    let cfg_path = dir.join("config.txt");
    if cfg_path.is_file() {
        let mut cfg = Config::new();
        if cfg.merge_file(&cfg_path).is_ok() {
            if let Some(name) = cfg.get("model.name") {
                return name.to_string();
            }
        }
    }
    dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let mut runs: Vec<PathBuf> = Vec::new();
    if a.run.join("history.csv").is_file() {
        runs.push(a.run.clone());
    } else {
        let entries = fs::read_dir(&a.run).map_err(data_err(&a.run))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("history.csv").is_file())
            .collect();
        dirs.sort();
        runs.extend(dirs);
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!("no history.csv under {}", a.run.display())));
    }

    make_dir(&out)?;
    let mut curves = Vec::new();
    for dir in &runs {
        let records = read_history(&dir.join("history.csv"))?;
        let points: Vec<(f64, f64)> =
            records.iter().map(|r| (r.epoch as f64, r.val_macro_auc)).collect();
        curves.push((run_label(dir), points));
    }
    let series: Vec<Series<'_>> =
        curves.iter().map(|(l, p)| Series { label: l, points: p }).collect();
    let curve_path = out.join("learning_curve.svg");
    line_plot(&curve_path, "validation macro AUC", "epoch", "macro AUC", &series)
        .map_err(data_err(&curve_path))?;
    println!("learning curve: {}", curve_path.display());

    let fc = FrontendConfig::default();
    let mel = bins_per_khz(FeatureKind::LogMel, &fc)?;
    let stft = bins_per_khz(FeatureKind::LogStft, &fc)?;
    let categories: Vec<String> =
        (0..mel.len()).map(|i| format!("{}-{} kHz", i, i + 1)).collect();
    let bins_path = out.join("bins_per_khz.svg");
    bar_chart(
        &bins_path,
        "frequency bins per kHz band",
        &categories,
        &[("mel", &mel), ("stft", &stft)],
    )
    .map_err(data_err(&bins_path))?;
    println!("bins per kHz: {}", bins_path.display());
    Ok(())
}
