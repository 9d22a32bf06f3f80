use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::Method;
use super::{create_dir, Context};
use crate::data::{
    filter_by_hc, generate_phantom_pair, preprocess as preprocess_item, split_indices, write_annotations,
    AnnotatedImage, AnnotationRecord, Ellipse,
};
use crate::denoiser::{smoothed_endpoints, train_denoiser_with, Checkpoint, Denoiser, LossRecord, NetworkDenoiser};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};
use crate::manifest::{FileDigest, ItemFailure, Manifest};
use crate::metrics::{DownsampleFlatten, MetricsReport, ReportInput, RoiSpec};
use crate::sampler::{decode_traced, encode_traced};
use crate::translate::{ddic_from_latent, write_trace, DdicStepTrace};

const PNG16_MAPPING: &str =
    "model range [lo, hi] stored linearly as 16-bit PNG [0, 65535]; values outside the range are clamped";

/// Seed for item `index`, derived from the global seed only.
pub(crate) fn item_seed(global: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(global);
    rng.set_stream(index);
    rng.next_u64()
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration types serialize")
}

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("configuration has no [{name}] section")))
}

/// `.png` files directly inside `dir`, sorted by name.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads every raster in `dir`, expressed in `range`.
fn load_dir(dir: &Path, range: Option<IntensityRange>) -> Result<(Vec<PathBuf>, Vec<ImageGrid>)> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .png images in {}", dir.display())));
    }
    let images = files
        .iter()
        .map(|p| {
            let img = ImageGrid::load(p)?;
            Ok(match range {
                Some(r) => img.renormalized(r),
                None => img,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((files, images))
}

fn digests(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<FileDigest>> {
    paths.iter().map(|p| FileDigest::of(p, base)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn finish(ctx: &Context, mut manifest: Manifest, outputs: &[PathBuf]) -> Result<()> {
    let mut outputs = outputs.to_vec();
    outputs.sort();
    manifest.outputs = digests(&outputs, Some(&ctx.out))?;
    manifest.write(ctx.out.join("manifest.json"))
}

fn report_failures(failures: &[ItemFailure], total: usize) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    for f in failures {
        eprintln!("{}: {}", f.item, f.error);
    }
    Err(Error::Data(format!("{} of {total} items failed", failures.len())))
}

/// Ramanujan's approximation to an ellipse perimeter.
fn perimeter(e: &Ellipse) -> f64 {
    let (a, b) = (e.semi_major, e.semi_minor);
    let h = ((a - b) / (a + b)).powi(2);
    std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}

pub fn phantom_gen(ctx: &Context) -> Result<()> {
    let section = require(&ctx.config.phantom, "phantom")?;
    if section.spec.seed != 0 {
        return Err(Error::Config(
            "phantom.spec.seed is derived per item from the global seed; set `seed` instead".into(),
        ));
    }
    if section.count == 0 {
        return Err(Error::Config("phantom count must be positive".into()));
    }
    section.spec.validate()?;
    ctx.prepare_out(false)?;
    let seed = ctx.config.seed;
    let pairs = ctx.pool()?.install(|| {
        (0..section.count)
            .into_par_iter()
            .map(|i| generate_phantom_pair(&section.spec.with_seed(item_seed(seed, i as u64))))
            .collect::<Result<Vec<_>>>()
    })?;

    let dirs = ["a", "b", "clean_a"].map(|d| ctx.out.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut outputs = Vec::new();
    let mut geometry = BTreeMap::new();
    let mut rois = BTreeMap::new();
    let mut records = Vec::new();
    let n = section.spec.size as f64;
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("phantom_{i:04}.png");
        for (dir, img) in dirs.iter().zip([&p.domain_a, &p.domain_b, &p.clean_a]) {
            let path = dir.join(&name);
            img.save_png16(&path)?;
            outputs.push(path);
        }
        records.push(AnnotationRecord {
            filename: name.clone(),
            pixel_size_mm: section.pixel_size_mm,
            hc_mm: Some(perimeter(&p.geometry.head) * section.pixel_size_mm),
            center_row: Some((n - 1.0) / 2.0),
            center_col: Some((n - 1.0) / 2.0),
            angle_deg: Some(0.0),
            mask: None,
        });
        rois.insert(name.clone(), p.geometry.rois.clone());
        geometry.insert(name, p.geometry.clone());
    }
    let files = [("geometry.json", to_json(&geometry)), ("rois.json", to_json(&rois))];
    for (f, v) in files {
        let path = ctx.out.join(f);
        write_json(&path, &v)?;
        outputs.push(path);
    }
    let ann = ctx.out.join("annotations.csv");
    write_annotations(&ann, &records)?;
    outputs.push(ann);

    let mut manifest = Manifest::new("phantom-gen", seed, to_json(section));
    manifest.intensity_mapping = Some(PNG16_MAPPING.replace("[lo, hi]", "[-1, 1]"));
    manifest.notes.push(format!(
        "item i uses phantom seed derived from global seed {seed} and stream i"
    ));
    finish(ctx, manifest, &outputs)?;
    println!("wrote {} phantom pairs to {}", section.count, ctx.out.display());
    Ok(())
}

pub fn preprocess(ctx: &Context) -> Result<()> {
    let section = require(&ctx.config.preprocess, "preprocess")?;
    section.output.validate()?;
    if let Some(f) = section.train_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {f}")));
        }
    }
    let records = crate::data::read_annotations(&section.annotations)?;
    ctx.prepare_out(false)?;
    let base = section.annotations.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut failures = Vec::new();
    let mut inputs = vec![section.annotations.clone()];
    let mut items: Vec<AnnotatedImage> = Vec::new();
    for r in &records {
        match r.load(&section.images, &base) {
            Ok(item) => {
                inputs.push(section.images.join(&r.filename));
                if let Some(m) = &r.mask {
                    inputs.push(base.join(m));
                }
                items.push(item);
            }
            Err(e) => failures.push(ItemFailure {
                item: r.filename.clone(),
                error: e.to_string(),
            }),
        }
    }
    let loaded = items.len();
    let mut notes = Vec::new();
    if let Some([lo, hi]) = section.hc_range {
        let out = filter_by_hc(items, lo, hi)?;
        notes.push(format!(
            "hc filter [{lo}, {hi}] mm kept {} of {loaded}: {} outside the range, {} without hc",
            out.kept.len(),
            out.out_of_range,
            out.missing_hc
        ));
        items = out.kept;
    }
    let results: Vec<Result<ImageGrid>> = ctx.pool()?.install(|| {
        items
            .par_iter()
            .map(|it| preprocess_item(it, &section.output))
            .collect()
    });
    let mut done = Vec::new();
    for (it, r) in items.iter().zip(results) {
        match r {
            Ok(img) => done.push((it.name.clone(), img)),
            Err(e) => failures.push(ItemFailure {
                item: it.name.clone(),
                error: e.to_string(),
            }),
        }
    }
    done.sort_by(|a, b| a.0.cmp(&b.0));

    let mut outputs = Vec::new();
    let groups: Vec<(&str, Vec<usize>)> = match section.train_fraction {
        None => vec![("images", (0..done.len()).collect())],
        Some(f) => {
            let mut s = split_indices(done.len(), f, ctx.config.seed)?;
            s.train.sort_unstable();
            s.test.sort_unstable();
            let names = |ix: &[usize]| ix.iter().map(|&i| done[i].0.clone()).collect::<Vec<_>>();
            let split = serde_json::json!({
                "seed": ctx.config.seed,
                "train_fraction": f,
                "train": names(&s.train),
                "test": names(&s.test),
            });
            let path = ctx.out.join("split.json");
            write_json(&path, &split)?;
            outputs.push(path);
            vec![("train", s.train), ("test", s.test)]
        }
    };
    for (dir, idx) in groups {
        let d = ctx.out.join(dir);
        create_dir(&d)?;
        for i in idx {
            let (name, img) = &done[i];
            let path = d.join(Path::new(name).with_extension("png"));
            img.save_png16(&path)?;
            outputs.push(path);
        }
    }

    let mut manifest = Manifest::new("preprocess", ctx.config.seed, to_json(section));
    manifest.inputs = digests(&inputs, None)?;
    manifest.intensity_mapping = Some(PNG16_MAPPING.replace(
        "[lo, hi]",
        &format!(
            "[{}, {}]",
            section.output.output_range.lo, section.output.output_range.hi
        ),
    ));
    manifest.notes = notes;
    manifest.failures = failures.clone();
    finish(ctx, manifest, &outputs)?;
    report_failures(&failures, records.len())?;
    println!("preprocessed {} images into {}", done.len(), ctx.out.display());
    Ok(())
}

fn write_loss(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_loss(path: &Path) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize().map(|x| x.map_err(|e| Error::format(path, e))).collect()
}

pub fn train(ctx: &Context, resume: bool, halt_after: Option<usize>) -> Result<()> {
    let section = require(&ctx.config.train, "train")?;
    let schedule = section.schedule.build()?;
    section.architecture.validate().map_err(Error::Config)?;
    let norm = IntensityRange::new(section.normalization.lo, section.normalization.hi)?;
    let mut optim = section.optim.clone();
    optim.seed = ctx.config.seed;
    optim.validate()?;
    let (files, images) = load_dir(&section.data, Some(norm))?;
    let shape = images[0].shape();
    ctx.prepare_out(resume)?;
    let ckpt_dir = ctx.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let latest = ckpt_dir.join("latest.json");
    let loss_path = ctx.out.join("loss.csv");

    let mut manifest = Manifest::new("train", ctx.config.seed, to_json(&(section, &optim)));
    manifest.inputs = digests(&files, None)?;
    let (resume_state, mut history) = if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let mut stored = ck
            .train_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("latest checkpoint has no training configuration".into()))?;
        stored.steps = optim.steps;
        if stored != optim
            || ck.architecture != section.architecture
            || ck.schedule != section.schedule
            || ck.normalization != norm
            || ck.image_shape != [shape.0, shape.1]
        {
            return Err(Error::Config(
                "the latest checkpoint was written with a different configuration".into(),
            ));
        }
        manifest.checkpoints.push(FileDigest::of(&latest, Some(&ctx.out))?);
        manifest.notes.push(format!("resumed from step {}", ck.step));
        let state = ck.train_state()?;
        let mut hist = read_loss(&loss_path)?;
        hist.retain(|r| r.step <= state.step);
        (Some(state), hist)
    } else {
        (None, Vec::new())
    };

    let meta = (&section.schedule, norm, shape);
    let mut on_checkpoint = |state: &crate::denoiser::TrainState, session: &[LossRecord]| -> Result<()> {
        let ck = Checkpoint::from_train_state(state, meta, &optim);
        ck.save(ckpt_dir.join(format!("step_{:07}.json", state.step)))?;
        ck.save(&latest)?;
        let mut all = history.clone();
        all.extend_from_slice(session);
        write_loss(&loss_path, &all)?;
        log::info!("step {}: checkpoint written", state.step);
        Ok(())
    };
    let outcome = train_denoiser_with(
        &images,
        &schedule,
        &section.architecture,
        &optim,
        resume_state,
        halt_after,
        &mut on_checkpoint,
    )?;
    history.extend(outcome.loss_trace.iter().cloned());
    write_loss(&loss_path, &history)?;
    let ck = Checkpoint::from_train_state(&outcome.state, meta, &optim);
    ck.save(&latest)?;

    let mut outputs = vec![loss_path.clone(), latest.clone()];
    if outcome.state.step < optim.steps {
        manifest.notes.push(format!(
            "stopped at step {} of {}; rerun with --resume to continue",
            outcome.state.step, optim.steps
        ));
        println!("stopped at step {} of {}", outcome.state.step, optim.steps);
    } else {
        let model = ctx.out.join("model.json");
        ck.save(&model)?;
        outputs.push(model);
        if let Some((first, last)) = smoothed_endpoints(&history, 100) {
            manifest.notes.push(format!("smoothed loss {first:.6} -> {last:.6}"));
            println!("trained {} steps, smoothed loss {first:.4} -> {last:.4}", optim.steps);
        }
    }
    for entry in std::fs::read_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))? {
        let p = entry.map_err(|e| Error::io(&ckpt_dir, e))?.path();
        if p != latest {
            outputs.push(p);
        }
    }
    finish(ctx, manifest, &outputs)
}

fn load_denoiser(path: &Path) -> Result<NetworkDenoiser> {
    Checkpoint::load(path)?.denoiser()
}

struct Translated {
    image: ImageGrid,
    trace: Option<Vec<DdicStepTrace>>,
    latents: Vec<(&'static str, crate::sampler::LatentTrace)>,
}

pub fn translate(ctx: &Context) -> Result<()> {
    let section = require(&ctx.config.translate, "translate")?;
    let src = load_denoiser(&section.source_checkpoint)?;
    let dst = load_denoiser(&section.target_checkpoint)?;
    if !src.schedule().same_as(dst.schedule()) {
        return Err(Error::Config(
            "source and target checkpoints use different schedules".into(),
        ));
    }
    if src.normalization() != dst.normalization() {
        return Err(Error::Config(
            "source and target checkpoints use different intensity normalizations".into(),
        ));
    }
    if section.method == Method::Ddic {
        section.ddic.validate()?;
    }
    let norm = src.normalization();
    let (files, images) = load_dir(&section.inputs, Some(norm))?;
    ctx.prepare_out(false)?;

    let stride = section.latent_stride;
    let method = section.method;
    let run_one = |x: &ImageGrid| -> Result<Translated> {
        let enc = encode_traced(x, &src, stride)?;
        let mut latents = Vec::new();
        if let Some(t) = enc.trace {
            latents.push(("encode", t));
        }
        match method {
            Method::Ddib => {
                let dec = decode_traced(&enc.x, &dst, stride)?;
                if let Some(t) = dec.trace {
                    latents.push(("decode", t));
                }
                Ok(Translated {
                    image: dec.x,
                    trace: None,
                    latents,
                })
            }
            Method::Ddic => {
                let out = ddic_from_latent(&enc.x, &src, &dst, &section.ddic)?;
                Ok(Translated {
                    image: out.image,
                    trace: section.ddic.trace.then_some(out.trace),
                    latents,
                })
            }
        }
    };
    let results: Vec<Result<Translated>> = ctx.pool()?.install(|| images.par_iter().map(run_one).collect());

    let img_dir = ctx.out.join("images");
    create_dir(&img_dir)?;
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut improved = (0usize, 0usize);
    for (path, r) in files.iter().zip(results) {
        let name = file_name(path);
        match r {
            Ok(t) => {
                let out = img_dir.join(&name);
                t.image.save_png16(&out)?;
                outputs.push(out);
                if let Some(trace) = &t.trace {
                    let d = ctx.out.join("traces");
                    create_dir(&d)?;
                    let p = d.join(format!("{}.jsonl", file_stem(path)));
                    write_trace(trace, &p)?;
                    outputs.push(p);
                    for s in trace {
                        if let (Some(a), Some(b)) = (s.corr_before, s.corr_after) {
                            improved.1 += 1;
                            improved.0 += usize::from(b >= a);
                        }
                    }
                }
                for (kind, lt) in &t.latents {
                    let d = ctx.out.join("latents");
                    create_dir(&d)?;
                    let p = d.join(format!("{}.{kind}.json", file_stem(path)));
                    lt.write(&p)?;
                    outputs.push(p);
                }
            }
            Err(e) => failures.push(ItemFailure {
                item: name,
                error: e.to_string(),
            }),
        }
    }

    let mut manifest = Manifest::new("translate", ctx.config.seed, to_json(section));
    manifest.inputs = digests(&files, None)?;
    manifest.checkpoints = digests(
        &[section.source_checkpoint.clone(), section.target_checkpoint.clone()],
        None,
    )?;
    manifest.intensity_mapping = Some(PNG16_MAPPING.replace("[lo, hi]", &format!("[{}, {}]", norm.lo, norm.hi)));
    if improved.1 > 0 {
        manifest.notes.push(format!(
            "correlation did not decrease in {} of {} guided steps",
            improved.0, improved.1
        ));
    }
    manifest.failures = failures.clone();
    finish(ctx, manifest, &outputs)?;
    report_failures(&failures, files.len())?;
    println!(
        "translated {} images with {} into {}",
        files.len(),
        method.name(),
        img_dir.display()
    );
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let section = require(&ctx.config.evaluate, "evaluate")?;
    if section.methods.is_empty() {
        return Err(Error::Config("evaluate needs at least one method directory".into()));
    }
    if section.fid_size == 0 {
        return Err(Error::Config("fid_size must be positive".into()));
    }
    section.histogram.validate()?;
    let (src_files, sources) = load_dir(&section.source, None)?;
    let names: Vec<String> = src_files.iter().map(|p| file_name(p)).collect();
    let wanted: BTreeSet<&String> = names.iter().collect();
    let mut inputs = src_files.clone();
    let mut methods = Vec::new();
    for m in &section.methods {
        let (files, imgs) = load_dir(&m.dir, None)?;
        let have: Vec<String> = files.iter().map(|p| file_name(p)).collect();
        let have_set: BTreeSet<&String> = have.iter().collect();
        if have_set != wanted {
            let missing: Vec<_> = wanted.difference(&have_set).collect();
            let extra: Vec<_> = have_set.difference(&wanted).collect();
            return Err(Error::Data(format!(
                "{} does not match the source images: missing {missing:?}, unexpected {extra:?}",
                m.dir.display()
            )));
        }
        for (a, b) in sources.iter().zip(&imgs) {
            a.ensure_same_shape(b)?;
        }
        inputs.extend(files);
        methods.push((m.name.clone(), imgs));
    }
    let mut names_seen = BTreeSet::new();
    for m in &section.methods {
        if !names_seen.insert(&m.name) {
            return Err(Error::Config(format!("method name {:?} is used twice", m.name)));
        }
    }
    let rois: Option<Vec<Vec<RoiSpec>>> = match &section.rois {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let map: BTreeMap<String, Vec<RoiSpec>> = serde_json::from_str(&text).map_err(|e| Error::format(p, e))?;
            inputs.push(p.clone());
            Some(names.iter().map(|n| map.get(n).cloned().unwrap_or_default()).collect())
        }
    };
    ctx.prepare_out(false)?;
    let fx = DownsampleFlatten { size: section.fid_size };
    let report = ctx.pool()?.install(|| {
        MetricsReport::compute(&ReportInput {
            names: &names,
            sources: &sources,
            methods: &methods,
            rois: rois.as_deref(),
            histogram: section.histogram,
            extractor: &fx,
            extractor_name: format!("downsample-flatten-{}", section.fid_size),
            fid_regularization: section.fid_regularization,
        })
    })?;
    let outputs = report.write_all(&ctx.out)?;
    let mut manifest = Manifest::new("evaluate", ctx.config.seed, to_json(section));
    manifest.inputs = digests(&inputs, None)?;
    finish(ctx, manifest, &outputs)?;

    for s in &report.summaries {
        let mut line = format!("{:<12}", s.method);
        for m in &s.metrics {
            match (m.mean, m.std) {
                (Some(mean), Some(sd)) => line += &format!(" {}={mean:.4}±{sd:.4}", m.metric),
                (Some(mean), None) => line += &format!(" {}={mean:.4}", m.metric),
                _ => line += &format!(" {}=n/a", m.metric),
            }
        }
        if let Some(f) = s.fid {
            line += &format!(" fid={f:.4}");
        }
        println!("{line}");
    }
    for c in &report.comparisons {
        if let Some(p) = c.p {
            println!(
                "{} {} vs {}: t={:.4} p={p:.3e}",
                c.metric,
                c.method_a,
                c.method_b,
                c.t.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
