use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use pathonet::annotation::{read_annotations, write_annotations, CellAnnotation, CellClass, CellCounts};
use pathonet::config::RunConfig;
use pathonet::density::DensityMap;
use pathonet::evaluate::{
    aggregate_patient, compute_prf, match_detections, ClassTally, rmse_scores, tune_thresholds, MatchConfig, MatchReport,
    ScoreReport,
};
use pathonet::labelgen::{augment, render_density_map, tile_and_split, DatasetSplit, Dihedral, SplitTag};
use pathonet::model::{build_pathonet, forward, image_to_tensor, load_checkpoint, save_checkpoint, ModelParams};
use pathonet::postprocess::extract_cells;
use pathonet::synth::{generate_tile, SynthConfig};
use pathonet::tensor::Tensor;
use pathonet::train::{Sample, TrainConfig, Trainer};
use rayon::prelude::*;

use crate::error::CliError;
use crate::files::{self, create_dir, list, load_image, save_image, sibling, stem, write_text};
use crate::{DetectArgs, EvalArgs, InferArgs, PrepareArgs, RenderArgs, ScoreArgs, SynthArgs, TrainArgs, TuneArgs};

fn require_seed(cfg: &RunConfig, command: &str) -> Result<u64, CliError> {
    cfg.seed
        .ok_or_else(|| CliError::Usage(format!("{command} is randomized and needs an explicit --seed")))
}

/// Independent per-item stream seeds derived from one run seed.
fn item_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = require_seed(cfg, "synth")?;
    create_dir(&a.out)?;
    let base = SynthConfig {
        tile_size: cfg.tile_size,
        overlap_probability: a.overlap,
        ..SynthConfig::default()
    };
    let tiles: Vec<_> = (0..a.count)
        .into_par_iter()
        .map(|i| generate_tile(&base.clone().with_seed(item_seed(seed, i))))
        .collect::<Result<_, _>>()?;
    let mut total = 0;
    for (i, tile) in tiles.iter().enumerate() {
        let name = format!("tile_{i:04}");
        save_image(&a.out.join(format!("{name}.png")), &tile.image)?;
        write_annotations(&a.out.join(format!("{name}.json")), &tile.annotations())?;
        total += tile.cells.len();
    }
    println!("wrote {} tiles with {total} cells to {}", a.count, a.out.display());
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--size expects WxH, got {s:?}"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    let w: usize = w.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

pub fn render_labels(a: &RenderArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let cells = read_annotations(&a.cells)?;
    let (w, h) = match (&a.image, &a.size) {
        (Some(p), _) => {
            let img = load_image(p)?;
            (img.width() as usize, img.height() as usize)
        }
        (None, Some(s)) => parse_size(s)?,
        (None, None) => return Err(CliError::Usage("give --image or --size".into())),
    };
    let map = render_density_map(&cells, h, w, &cfg.label())?;
    map.save(&a.out)?;
    Ok(())
}

fn variant_name(d: Dihedral) -> &'static str {
    match d {
        Dihedral::Identity => "id",
        Dihedral::FlipX => "flipx",
        Dihedral::FlipY => "flipy",
        Dihedral::Rot90 => "rot90",
        Dihedral::Rot180 => "rot180",
        Dihedral::Rot270 => "rot270",
        Dihedral::Transpose => "transpose",
        Dihedral::AntiTranspose => "antitranspose",
    }
}

pub fn prepare(a: &PrepareArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = require_seed(cfg, "prepare")?;
    let images = list(&a.input, "png")?;
    if images.is_empty() {
        return Err(CliError::Data(format!("{}: no .png images", a.input.display())));
    }
    let sources: Vec<(RgbImage, Vec<CellAnnotation>)> = images
        .par_iter()
        .map(|p| Ok((load_image(p)?, read_annotations(&sibling(p, "json")?)?)))
        .collect::<Result<_, CliError>>()?;
    let split = DatasetSplit::new(cfg.train_fraction, seed);
    let tiles = tile_and_split(&sources, cfg.tile_size, &split)?;
    let label = cfg.label();
    for tag in [SplitTag::Train, SplitTag::Test] {
        create_dir(&a.out.join(tag.as_str()))?;
    }
    let written: Vec<usize> = tiles
        .par_iter()
        .map(|t| -> Result<usize, CliError> {
            let n = cfg.tile_size as usize;
            let dir = a.out.join(t.split.as_str());
            let name = format!("{}_r{}_c{}", stem(&images[t.source]), t.row, t.col);
            let map = render_density_map(&t.cells, n, n, &label)?;
            let variants = if t.split == SplitTag::Train && !a.no_augment {
                augment(&t.image, &map)?
            } else {
                vec![(Dihedral::Identity, t.image.clone(), map)]
            };
            let many = variants.len() > 1;
            for (d, image, map) in &variants {
                let name = if many { format!("{name}_{}", variant_name(*d)) } else { name.clone() };
                save_image(&dir.join(format!("{name}.png")), image)?;
                write_annotations(&dir.join(format!("{name}.json")), &d.apply_cells(&t.cells, n))?;
                map.save(&dir.join(format!("{name}.dmap")))?;
            }
            Ok(variants.len())
        })
        .collect::<Result<_, _>>()?;

    let tags = split.assign(images.len());
    let mut listing = String::new();
    for (p, tag) in images.iter().zip(&tags) {
        writeln!(listing, "{} {}", stem(p), tag.as_str()).unwrap();
    }
    write_text(&a.out.join("split.txt"), &listing)?;
    let train_sources = tags.iter().filter(|t| **t == SplitTag::Train).count();
    println!(
        "{} sources ({train_sources} train), {} tiles, {} samples written",
        images.len(),
        tiles.len(),
        written.iter().sum::<usize>()
    );
    Ok(())
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let images = list(dir, "png")?;
    if images.is_empty() {
        return Err(CliError::Data(format!("{}: no .png tiles", dir.display())));
    }
    images
        .par_iter()
        .map(|p| {
            let image = load_image(p)?;
            let target = DensityMap::load(&sibling(p, "dmap")?)?;
            if (target.width(), target.height()) != (image.width() as usize, image.height() as usize) {
                return Err(CliError::Data(format!("{}: label size differs from the image", p.display())));
            }
            Ok(Sample {
                image: image_to_tensor(&image),
                target,
            })
        })
        .collect()
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = require_seed(cfg, "train")?;
    let samples = load_samples(&a.data)?;
    let params = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => build_pathonet(&cfg.widths, seed)?,
    };
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule: cfg.schedule(),
        seed,
        shuffle: true,
    };
    let mut trainer = Trainer::new(params);
    trainer.fit(&samples, &train_cfg, |log| {
        println!("epoch {} lr {:.6e} loss {:.6}", log.epoch + 1, log.lr, log.mean_loss);
    })?;
    save_checkpoint(&trainer.params, &a.out)?;
    println!("saved {} ({} parameters)", a.out.display(), trainer.params.param_count());
    Ok(())
}

/// Network output for an image of any size: zero-padded on the right and
/// bottom to a multiple of 8, then cropped back.
fn predict(params: &ModelParams, image: &RgbImage) -> Result<DensityMap, CliError> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (pw, ph) = (w.div_ceil(8) * 8, h.div_ceil(8) * 8);
    let x = image_to_tensor(image);
    let padded = if (pw, ph) == (w, h) {
        x
    } else {
        let mut data = vec![0.0f32; 3 * ph * pw];
        for c in 0..3 {
            for y in 0..h {
                let src = &x.data()[(c * h + y) * w..(c * h + y + 1) * w];
                data[(c * ph + y) * pw..(c * ph + y) * pw + w].copy_from_slice(src);
            }
        }
        Tensor::new(vec![3, ph, pw], data).expect("shape matches")
    };
    let out = forward(params, &padded)?;
    if (pw, ph) == (w, h) {
        return Ok(out);
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for class in CellClass::ALL {
        let plane = out.channel(class);
        for y in 0..h {
            data.extend_from_slice(&plane[y * pw..y * pw + w]);
        }
    }
    Ok(DensityMap::from_vec(h, w, data)?)
}

/// Output paths for a batch: `--out` for a single input, else
/// `--out-dir/NAME.ext`.
fn outputs(inputs: &[PathBuf], out: &Option<PathBuf>, out_dir: &Option<PathBuf>, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    match (out, out_dir) {
        (Some(o), None) if inputs.len() == 1 => Ok(vec![o.clone()]),
        (Some(_), None) => Err(CliError::Usage("several inputs need --out-dir".into())),
        (None, Some(d)) => {
            create_dir(d)?;
            Ok(inputs.iter().map(|p| d.join(format!("{}.{ext}", stem(p)))).collect())
        }
        _ => Err(CliError::Usage("give --out or --out-dir".into())),
    }
}

fn predict_all(model: &Path, images: &[PathBuf]) -> Result<Vec<DensityMap>, CliError> {
    let params = load_checkpoint(model)?;
    images.par_iter().map(|p| predict(&params, &load_image(p)?)).collect()
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let outs = outputs(&a.image, &a.out, &a.out_dir, "dmap")?;
    for (map, out) in predict_all(&a.model, &a.image)?.iter().zip(&outs) {
        map.save(out)?;
    }
    Ok(())
}

pub fn detect(a: &DetectArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let post = cfg.postprocess();
    if let Some(d) = &a.density {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| CliError::Usage("--density needs --out".into()))?;
        let cells = extract_cells(&DensityMap::load(d)?, &post)?;
        write_annotations(out, &cells)?;
        return Ok(());
    }
    let model = a.model.as_ref().expect("clap requires --model without --density");
    if a.image.is_empty() {
        return Err(CliError::Usage("give --image or --density".into()));
    }
    let outs = outputs(&a.image, &a.out, &a.out_dir, "json")?;
    let maps = predict_all(model, &a.image)?;
    let cells: Vec<Vec<CellAnnotation>> = maps
        .par_iter()
        .map(|m| extract_cells(m, &post))
        .collect::<Result<_, _>>()?;
    for (c, out) in cells.iter().zip(&outs) {
        write_annotations(out, c)?;
    }
    Ok(())
}

/// `(name, gt, pred)` triples from two files or two directories.
fn eval_pairs(gt: &Path, pred: &Path) -> Result<Vec<(String, Vec<CellAnnotation>, Vec<CellAnnotation>)>, CliError> {
    if !gt.exists() {
        return Err(CliError::io(gt, "no such file"));
    }
    if !pred.exists() {
        return Err(CliError::io(pred, "no such file"));
    }
    if gt.is_dir() != pred.is_dir() {
        return Err(CliError::Usage("--gt and --pred must both be files or both directories".into()));
    }
    if !gt.is_dir() {
        return Ok(vec![(stem(gt), read_annotations(gt)?, read_annotations(pred)?)]);
    }
    let gts = list(gt, "json")?;
    if gts.is_empty() {
        return Err(CliError::Data(format!("{}: no annotation files", gt.display())));
    }
    for p in list(pred, "json")? {
        if !gt.join(p.file_name().unwrap()).exists() {
            return Err(CliError::Data(format!("{}: prediction without ground truth", p.display())));
        }
    }
    gts.iter()
        .map(|g| {
            let p = pred.join(g.file_name().unwrap());
            if !p.exists() {
                return Err(CliError::io(&p, "no such file"));
            }
            Ok((stem(g), read_annotations(g)?, read_annotations(&p)?))
        })
        .collect()
}

fn read_patients(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in files::read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(image), Some(patient), None) => {
                map.insert(image.to_string(), patient.to_string());
            }
            _ => {
                return Err(CliError::Data(format!(
                    "{}:{}: expected `IMAGE PATIENT`",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(map)
}

fn fmt_score(r: &ScoreReport) -> [String; 4] {
    [
        format!("{:.4}", r.ki67.value),
        r.ki67_band.as_str().to_string(),
        format!("{:.4}", r.til.value),
        r.til_band.as_str().to_string(),
    ]
}

pub fn eval(a: &EvalArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let match_cfg = MatchConfig {
        radius: cfg.match_radius,
    };
    let pairs = eval_pairs(&a.gt, &a.pred)?;
    let reports: Vec<MatchReport> = pairs
        .par_iter()
        .map(|(_, g, p)| match_detections(g, p, &match_cfg))
        .collect::<Result<_, _>>()?;
    let mut pooled = MatchReport::default();
    for r in &reports {
        pooled.merge_tallies(r);
    }
    let prf = compute_prf(&pooled);

    let mut text = String::new();
    let mut kv = String::new();
    writeln!(kv, "radius = {}", match_cfg.radius).unwrap();
    writeln!(kv, "images = {}", pairs.len()).unwrap();
    writeln!(
        text,
        "{:<16}{:>8}{:>8}{:>8}{:>11}{:>9}{:>9}",
        "class", "tp", "fp", "fn", "precision", "recall", "f1"
    )
    .unwrap();
    let rows = CellClass::ALL
        .iter()
        .map(|c| (c.as_str(), pooled.tally(*c), prf.per_class[c.channel()]))
        .chain([("micro", pooled.tallies.iter().fold(ClassTally::default(), |mut a, t| {
            a += *t;
            a
        }), prf.micro)]);
    for (name, t, m) in rows {
        writeln!(
            text,
            "{name:<16}{:>8}{:>8}{:>8}{:>11.4}{:>9.4}{:>9.4}{}",
            t.tp,
            t.fp,
            t.fn_,
            m.precision,
            m.recall,
            m.f1,
            if m.degenerate { "  (degenerate)" } else { "" }
        )
        .unwrap();
        for (k, v) in [("tp", t.tp), ("fp", t.fp), ("fn", t.fn_)] {
            writeln!(kv, "{name}.{k} = {v}").unwrap();
        }
        writeln!(kv, "{name}.precision = {}", m.precision).unwrap();
        writeln!(kv, "{name}.recall = {}", m.recall).unwrap();
        writeln!(kv, "{name}.f1 = {}", m.f1).unwrap();
        writeln!(kv, "{name}.degenerate = {}", m.degenerate).unwrap();
    }

    let counts = |pick: fn(&(String, Vec<CellAnnotation>, Vec<CellAnnotation>)) -> &Vec<CellAnnotation>| {
        pairs.iter().map(|p| CellCounts::from_cells(pick(p))).collect::<Vec<_>>()
    };
    let (truth_counts, pred_counts) = (counts(|p| &p.1), counts(|p| &p.2));
    let sum = |v: &[CellCounts]| v.iter().fold(CellCounts::default(), |a, c| a + *c);
    let truth = ScoreReport::from_counts(&sum(&truth_counts));
    let pred = ScoreReport::from_counts(&sum(&pred_counts));
    writeln!(text).unwrap();
    for (label, r) in [("truth", &truth), ("predicted", &pred)] {
        let [k, kb, t, tb] = fmt_score(r);
        writeln!(text, "{label:<10} ki67 {k} ({kb})  til {t} ({tb})").unwrap();
        let key = if label == "truth" { "truth" } else { "pred" };
        writeln!(kv, "{key}.ki67 = {}", r.ki67.value).unwrap();
        writeln!(kv, "{key}.ki67_band = {kb}").unwrap();
        writeln!(kv, "{key}.til = {}", r.til.value).unwrap();
        writeln!(kv, "{key}.til_band = {tb}").unwrap();
    }

    if pairs.len() > 1 {
        let scores = |v: &[CellCounts]| -> (Vec<f64>, Vec<f64>) {
            v.iter()
                .map(|c| {
                    let r = ScoreReport::from_counts(c);
                    (r.ki67.value, r.til.value)
                })
                .unzip()
        };
        let ((pk, pt), (tk, tt)) = (scores(&pred_counts), scores(&truth_counts));
        let (rk, rt) = (rmse_scores(&pk, &tk)?, rmse_scores(&pt, &tt)?);
        writeln!(text, "per-image rmse  ki67 {rk:.4}  til {rt:.4}").unwrap();
        writeln!(kv, "image.ki67_rmse = {rk}").unwrap();
        writeln!(kv, "image.til_rmse = {rt}").unwrap();
    }

    if let Some(path) = &a.patients {
        let mapping = read_patients(path)?;
        let by_name = |v: &[CellCounts]| -> BTreeMap<String, CellCounts> {
            pairs.iter().zip(v).map(|(p, c)| (p.0.clone(), *c)).collect()
        };
        let agg = aggregate_patient(&mapping, &by_name(&pred_counts), &by_name(&truth_counts))?;
        writeln!(text).unwrap();
        for p in &agg.patients {
            let [pk, pkb, pt, ptb] = fmt_score(&p.predicted);
            let [tk, tkb, tt, ttb] = fmt_score(&p.truth);
            writeln!(
                text,
                "patient {}  ki67 {pk} ({pkb}) vs {tk} ({tkb})  til {pt} ({ptb}) vs {tt} ({ttb})",
                p.patient
            )
            .unwrap();
        }
        writeln!(
            text,
            "patients {}  ki67 band accuracy {:.4}  til band accuracy {:.4}  ki67 rmse {:.4}  til rmse {:.4}",
            agg.patients.len(),
            agg.ki67_accuracy,
            agg.til_accuracy,
            agg.ki67_rmse,
            agg.til_rmse
        )
        .unwrap();
        writeln!(kv, "patients = {}", agg.patients.len()).unwrap();
        writeln!(kv, "patient.ki67_accuracy = {}", agg.ki67_accuracy).unwrap();
        writeln!(kv, "patient.til_accuracy = {}", agg.til_accuracy).unwrap();
        writeln!(kv, "patient.ki67_rmse = {}", agg.ki67_rmse).unwrap();
        writeln!(kv, "patient.til_rmse = {}", agg.til_rmse).unwrap();
    }

    print!("{text}");
    if let Some(path) = &a.kv {
        write_text(path, &kv)?;
    }
    Ok(())
}

fn parse_counts_list(s: &str) -> Result<CellCounts, CliError> {
    let v: Vec<u64> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--counts expects POS,NEG,LYM, got {s:?}")))?;
    match v[..] {
        [p, n, l] => Ok(CellCounts::new(p, n, l)),
        _ => Err(CliError::Usage(format!("--counts expects POS,NEG,LYM, got {s:?}"))),
    }
}

/// Annotation list, JSON counts object, or `class = count` lines.
fn read_counts(path: &Path) -> Result<CellCounts, CliError> {
    let text = files::read_text(path)?;
    let body = text.trim_start();
    let bad = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    if body.starts_with('[') {
        let cells = pathonet::annotation::parse_annotations(body)?;
        return Ok(CellCounts::from_cells(&cells));
    }
    if body.starts_with('{') {
        return serde_json::from_str(body).map_err(|e| bad(e.to_string()));
    }
    let mut counts = CellCounts::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `class = count`, got {line:?}")))?;
        let class: CellClass = k.trim().parse().map_err(|_| bad(format!("unknown class {:?}", k.trim())))?;
        *counts.get_mut(class) = v.trim().parse().map_err(|_| bad(format!("bad count {:?}", v.trim())))?;
    }
    Ok(counts)
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let counts = match (&a.cells, &a.counts) {
        (Some(p), _) => read_counts(p)?,
        (None, Some(s)) => parse_counts_list(s)?,
        (None, None) => return Err(CliError::Usage("give --cells or --counts".into())),
    };
    let r = ScoreReport::from_counts(&counts);
    for c in CellClass::ALL {
        println!("{} {}", c.as_str(), counts.get(c));
    }
    let [k, kb, t, tb] = fmt_score(&r);
    println!("ki67 {k} {kb}{}", if r.ki67.degenerate { " (degenerate)" } else { "" });
    println!("til {t} {tb}{}", if r.til.degenerate { " (degenerate)" } else { "" });
    Ok(())
}

pub fn tune(a: &TuneArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let annotations = list(&a.data, "json")?;
    if annotations.is_empty() {
        return Err(CliError::Data(format!("{}: no annotation files", a.data.display())));
    }
    let maps: Vec<DensityMap> = match &a.model {
        Some(model) => {
            let images: Vec<PathBuf> = annotations.iter().map(|p| sibling(p, "png")).collect::<Result<_, _>>()?;
            predict_all(model, &images)?
        }
        None => annotations
            .iter()
            .map(|p| Ok(DensityMap::load(&sibling(p, "dmap")?)?))
            .collect::<Result<_, CliError>>()?,
    };
    let validation: Vec<(DensityMap, Vec<CellAnnotation>)> = maps
        .into_iter()
        .zip(&annotations)
        .map(|(m, p)| Ok((m, read_annotations(p)?)))
        .collect::<Result<_, CliError>>()?;
    let result = tune_thresholds(
        &validation,
        &MatchConfig {
            radius: cfg.match_radius,
        },
        &cfg.postprocess(),
    )?;
    for c in CellClass::ALL {
        let i = c.channel();
        println!("{} threshold {} f1 {:.4}", c.as_str(), result.thresholds[i], result.f1[i]);
    }
    let line = format!(
        "thresholds = {},{},{}\n",
        result.thresholds[0], result.thresholds[1], result.thresholds[2]
    );
    print!("{line}");
    if let Some(out) = &a.out {
        write_text(out, &line)?;
    }
    Ok(())
}
