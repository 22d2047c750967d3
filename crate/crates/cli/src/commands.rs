//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fakeformer::evaluation::{
    auc, average_precision, mask_ssim, perturb, stratify_by_ssim, EvalReport, Label, PerturbRow, ScoredSample,
};
use fakeformer::model::{forward, forward_batch, load_params, save_params, ModelConfig, ModelParams};
use fakeformer::synthesis::io::{load_landmarks, load_png, save_gray_png, save_landmarks, save_png};
use fakeformer::synthesis::{BlendMask, Image, Map};
use fakeformer::training::{synthesize, toy_corpus, train, CorpusItem};
use fakeformer::vulnerability::{ground_truth_heatmap, TargetSource};
use fakeformer::{rng, verify, Error, Result};
use rand::Rng as _;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{Manifest, Record};
use crate::{Cli, Command, EvalArgs, InferArgs, Outcome, SynthArgs, TrainArgs, VerifyArgs};

/// First toy-face seed of each generated corpus, far enough apart that
/// training, validation and evaluation faces never coincide.
const TRAIN_TOY_FIRST: u64 = 0;
const VAL_TOY_FIRST: u64 = 1_000_000;
const EVAL_TOY_FIRST: u64 = 2_000_000;

pub fn run(cli: &Cli) -> Result<Outcome> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone())?;
    match &cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Infer(a) => infer(&cfg, a),
        Command::Verify(a) => verify_cmd(&cfg, a, cli.out.is_some() || cfg.paths.out.is_some()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Creates the output directory and echoes the effective configuration into it.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir.join("effective_config.json"), cfg.to_json())?;
    Ok(dir)
}

fn toy_size(model: &ModelConfig) -> Result<usize> {
    if model.height != model.width {
        return Err(Error::Config(format!(
            "procedural faces are square but the model expects {}×{}",
            model.height, model.width
        )));
    }
    Ok(model.height)
}

fn check_corpus(items: &[CorpusItem], model: &ModelConfig) -> Result<()> {
    for it in items {
        for f in &it.frames {
            if (f.image.height(), f.image.width()) != (model.height, model.width) {
                return Err(Error::Data(format!(
                    "{}: frame is {}×{}, the model expects {}×{}",
                    it.source_id,
                    f.image.height(),
                    f.image.width(),
                    model.height,
                    model.width
                )));
            }
        }
    }
    Ok(())
}

/// Real corpus from `--toy N` or a manifest.
fn load_corpus(toy: Option<usize>, manifest: Option<&Path>, first: u64, model: &ModelConfig) -> Result<Vec<CorpusItem>> {
    let items = match (toy, manifest) {
        (Some(n), _) => toy_corpus(n, toy_size(model)?, first),
        (None, Some(p)) => Manifest::load(p)?.real_corpus()?,
        (None, None) => return Err(Error::Config("no corpus: pass --toy N or set paths.manifest".into())),
    };
    if items.is_empty() {
        return Err(Error::Data("the corpus has no real frames".into()));
    }
    check_corpus(&items, model)?;
    Ok(items)
}

#[derive(Serialize)]
struct HeatmapSidecar<'a> {
    side: usize,
    data: &'a [f64],
}

fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<Outcome> {
    let seed = cfg.seed()?;
    let corpus = load_corpus(args.toy, cfg.paths.manifest.as_deref(), TRAIN_TOY_FIRST, &cfg.model)?;
    let dir = prepare_out(cfg)?;
    for sub in ["real", "fake"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for (i, item) in corpus.iter().enumerate() {
        for (j, frame) in item.frames.iter().enumerate() {
            let stem = format!("{}_{j:03}", item.source_id);
            let rel = |sub: &str, suffix: &str| PathBuf::from(sub).join(format!("{stem}{suffix}"));
            let (img, lms) = (rel("real", ".png"), rel("real", ".json"));
            save_png(&dir.join(&img), &frame.image)?;
            save_landmarks(&dir.join(&lms), &frame.landmarks)?;

            let mut r = rng::stream(seed, &[0x5e7d, i as u64, j as u64]);
            let fake = synthesize(&corpus, i, frame, &mut r, &cfg.train)?;
            let heat = ground_truth_heatmap(
                TargetSource::Fake(&fake.boundary),
                cfg.model.patch,
                cfg.train.aggregate,
                cfg.train.sigma,
            )?;
            let (h, w) = (frame.image.height(), frame.image.width());
            let fake_img = rel("fake", ".png");
            let mask = rel("fake", "_mask.png");
            save_png(&dir.join(&fake_img), &fake.image)?;
            save_gray_png(&dir.join(&mask), h, w, fake.mask.data())?;
            save_gray_png(&dir.join(rel("fake", "_boundary.png")), h, w, fake.boundary.map().data())?;
            heat.save_png(&dir.join(rel("fake", "_heatmap.png")))?;
            let sidecar = HeatmapSidecar {
                side: heat.side(),
                data: heat.data(),
            };
            write_file(
                &dir.join(rel("fake", "_heatmap.json")),
                serde_json::to_string(&sidecar).expect("heatmap serializes"),
            )?;
            reals.push(Record {
                image: img.clone(),
                landmarks: lms.clone(),
                label: Label::Real,
                source_id: item.source_id.clone(),
                mask: None,
                pair: None,
            });
            fakes.push(Record {
                image: fake_img,
                landmarks: lms,
                label: Label::Fake,
                source_id: item.source_id.clone(),
                mask: Some(mask),
                pair: Some(img),
            });
        }
    }
    let n = reals.len();
    reals.extend(fakes);
    Manifest::save(&dir.join("manifest.jsonl"), &reals)?;
    println!("wrote {n} real and {n} pseudo-fake frames to {}", dir.display());
    Ok(Outcome::Ok)
}

fn train_cmd(cfg: &RunConfig, args: &TrainArgs) -> Result<Outcome> {
    cfg.seed()?;
    if args.checkpoint_every == Some(0) {
        return Err(Error::Config("--checkpoint-every must be at least 1".into()));
    }
    let items = load_corpus(args.toy, cfg.paths.manifest.as_deref(), TRAIN_TOY_FIRST, &cfg.model)?;
    let val = match (args.val_toy, &cfg.paths.val_manifest) {
        (None, None) => Vec::new(),
        (toy, m) => load_corpus(toy, m.as_deref(), VAL_TOY_FIRST, &cfg.model)?,
    };
    let dir = prepare_out(cfg)?;
    let hist_path = dir.join("history.jsonl");
    let mut history = BufWriter::new(File::create(&hist_path).map_err(io_err(&hist_path))?);
    let outcome = train(&items, &val, &cfg.model, &cfg.train, |rec, params| {
        let line = serde_json::to_string(rec).expect("record serializes");
        println!("{line}");
        writeln!(history, "{line}").and_then(|_| history.flush()).map_err(io_err(&hist_path))?;
        if let Some(k) = args.checkpoint_every {
            if (rec.epoch + 1) % k == 0 {
                save_params(&dir.join(format!("checkpoint_epoch{:03}.fkf1", rec.epoch + 1)), params)?;
            }
        }
        Ok(())
    })?;
    save_params(&dir.join("weights.fkf1"), &outcome.params)?;
    eprintln!("weights written to {}", dir.join("weights.fkf1").display());
    Ok(Outcome::Ok)
}

/// One labelled frame to score.
struct EvalItem {
    image: Image,
    label: Label,
    source_id: String,
    path: Option<PathBuf>,
    mask_ssim: Option<f64>,
}

fn load_mask(path: &Path) -> Result<BlendMask> {
    let img = load_png(path)?;
    Ok(BlendMask::new(Map::new(img.height(), img.width(), img.plane(0).to_vec())?))
}

fn manifest_items(path: &Path, model: &ModelConfig) -> Result<Vec<EvalItem>> {
    let m = Manifest::load(path)?;
    m.check_dims(model.height, model.width)?;
    m.records
        .iter()
        .map(|r| {
            let image = load_png(&r.image)?;
            let mask_ssim = match (r.label, &r.mask, &r.pair) {
                (Label::Fake, Some(mask), Some(pair)) => Some(mask_ssim(&image, &load_png(pair)?, &load_mask(mask)?)?),
                _ => None,
            };
            Ok(EvalItem {
                image,
                label: r.label,
                source_id: r.source_id.clone(),
                path: Some(r.image.clone()),
                mask_ssim,
            })
        })
        .collect()
}

fn toy_items(n: usize, cfg: &RunConfig) -> Result<Vec<EvalItem>> {
    let seed = cfg.seed()?;
    let corpus = toy_corpus(n, toy_size(&cfg.model)?, EVAL_TOY_FIRST);
    let mut items = Vec::with_capacity(2 * n);
    for (i, item) in corpus.iter().enumerate() {
        let frame = &item.frames[0];
        let mut r = rng::stream(seed, &[0xe7a1, i as u64]);
        let fake = synthesize(&corpus, i, frame, &mut r, &cfg.train)?;
        let ssim = mask_ssim(&fake.image, &frame.image, &fake.mask)?;
        items.push(EvalItem {
            image: frame.image.clone(),
            label: Label::Real,
            source_id: item.source_id.clone(),
            path: None,
            mask_ssim: None,
        });
        items.push(EvalItem {
            image: fake.image,
            label: Label::Fake,
            source_id: item.source_id.clone(),
            path: None,
            mask_ssim: Some(ssim),
        });
    }
    Ok(items)
}

fn score_images(params: &ModelParams, images: &[&Image], batch: usize) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(images.len());
    for part in images.chunks(batch) {
        scores.extend(forward_batch(params, part)?.iter().map(|o| o.score()));
    }
    Ok(scores)
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<&'a Path>,
    #[serde(flatten)]
    sample: &'a ScoredSample,
}

fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Outcome> {
    let params = load_params(&args.weights)?;
    let model = params.config().clone();
    let items = match (args.toy, args.manifest.as_ref().or(cfg.paths.manifest.as_ref())) {
        (Some(n), _) => toy_items(n, cfg)?,
        (None, Some(p)) => manifest_items(p, &model)?,
        (None, None) => return Err(Error::Config("no evaluation set: pass --manifest, --toy N or set paths.manifest".into())),
    };
    if args.stratify && !items.iter().any(|i| i.mask_ssim.is_some()) {
        return Err(Error::Data("--stratify needs fakes with mask and pair entries".into()));
    }
    let perturb_seed = if args.perturb { Some(cfg.seed()?) } else { None };
    let dir = prepare_out(cfg)?;

    let images: Vec<&Image> = items.iter().map(|i| &i.image).collect();
    let scores = score_images(&params, &images, cfg.eval.batch_size)?;
    let scored: Vec<ScoredSample> = items
        .iter()
        .zip(&scores)
        .map(|(it, &s)| ScoredSample {
            mask_ssim: it.mask_ssim,
            ..ScoredSample::new(s, it.label, it.source_id.clone())
        })
        .collect();
    let mut report = EvalReport::from_samples(&scored, cfg.eval.aggregation)?;
    if args.stratify {
        report.bins = Some(stratify_by_ssim(&scored, &cfg.eval.bins)?);
    }
    if let Some(seed) = perturb_seed {
        let mut rows = Vec::new();
        for &kind in &cfg.eval.perturbations {
            for &severity in &cfg.eval.severities {
                let perturbed = items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| perturb(&it.image, kind, severity, rng::stream(seed, &[0x9e27, i as u64]).random()))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Image> = perturbed.iter().collect();
                let s = score_images(&params, &refs, cfg.eval.batch_size)?;
                let samples: Vec<ScoredSample> = scored
                    .iter()
                    .zip(s)
                    .map(|(o, score)| ScoredSample { score, ..o.clone() })
                    .collect();
                rows.push(PerturbRow {
                    kind,
                    severity,
                    auc: auc(&samples)?,
                    ap: average_precision(&samples)?,
                });
            }
        }
        report.perturbations = Some(rows);
    }

    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("report.csv"), report.to_csv())?;
    let mut lines = String::new();
    for (it, s) in items.iter().zip(&scored) {
        let line = ScoreLine {
            image: it.path.as_deref(),
            sample: s,
        };
        lines.push_str(&serde_json::to_string(&line).expect("score serializes"));
        lines.push('\n');
    }
    write_file(&dir.join("scores.jsonl"), lines)?;
    println!("{}", report.to_json());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct InferLine {
    score: f64,
    logit: f64,
    heatmap: PathBuf,
}

fn infer(cfg: &RunConfig, args: &InferArgs) -> Result<Outcome> {
    let params = load_params(&args.weights)?;
    let model = params.config();
    let image = load_png(&args.image)?;
    if (image.height(), image.width()) != (model.height, model.width) {
        return Err(Error::Data(format!(
            "{} is {}×{}, the model expects {}×{}",
            args.image.display(),
            image.height(),
            image.width(),
            model.height,
            model.width
        )));
    }
    if let Some(l) = &args.landmarks {
        load_landmarks(l, image.height(), image.width())?;
    }
    let out = forward(&params, &image)?;
    let dir = prepare_out(cfg)?;
    let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let heatmap = dir.join(format!("{stem}_heatmap.png"));
    out.heatmap.save_png(&heatmap)?;
    let line = InferLine {
        score: out.score(),
        logit: out.logit,
        heatmap,
    };
    println!("{}", serde_json::to_string(&line).expect("result serializes"));
    Ok(Outcome::Ok)
}

fn verify_cmd(cfg: &RunConfig, args: &VerifyArgs, write: bool) -> Result<Outcome> {
    let opts = verify::VerifyOptions {
        seeds: args.seeds,
        cases: args.cases,
        fault: args.fault.clone(),
    };
    let report = verify::run(&opts)?;
    print!("{}", report.to_text());
    if write {
        let dir = prepare_out(cfg)?;
        write_file(
            &dir.join("verify_report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
    }
    Ok(if report.passed() { Outcome::Ok } else { Outcome::VerifyFailed })
}
