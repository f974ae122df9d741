use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use focusfuse_core::fusion::{diff_map, diff_range, make_multifocus_pair};
use focusfuse_core::image::{load_gray, save_f32map, save_pgm, save_unit_map_pgm};
use focusfuse_core::metrics::{evaluate, format_table};
use focusfuse_core::qnn::{gen_training_data, loss_curve_csv, score_map, train, LabelTable};
use focusfuse_core::synthetic::{half_plane_mask, textured_image};
use focusfuse_core::{run_pipeline, GrayImage, MetricsReport, QnnModel};

use crate::config::Settings;

/// Context marker: the error came from reading a model file.
#[derive(Debug)]
pub struct ModelLoad(pub PathBuf);

impl fmt::Display for ModelLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot load model {}", self.0.display())
    }
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
            .unwrap_or(false)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Image files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Sources inside a corpus case directory: every image except `fused.*`
/// and `gt.*`.
fn case_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(image_files(dir)?
        .into_iter()
        .filter(|p| !matches!(stem(p).as_str(), "fused" | "gt"))
        .collect())
}

fn find_named(dir: &Path, name: &str) -> Result<Option<PathBuf>> {
    Ok(image_files(dir)?.into_iter().find(|p| stem(p) == name))
}

fn load(path: &Path) -> Result<GrayImage> {
    load_gray(path).with_context(|| format!("cannot load image {}", path.display()))
}

fn load_model(settings: &Settings) -> Result<QnnModel> {
    let Some(path) = settings.model.as_ref() else {
        bail!("no model given (use --model or `model = PATH` in the config)");
    };
    QnnModel::load(path).context(ModelLoad(path.clone()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub struct TrainOutputs<'a> {
    pub model: &'a Path,
    pub loss_csv: Option<&'a Path>,
    pub provenance_csv: Option<&'a Path>,
}

pub fn cmd_train(settings: &Settings, images_dir: &Path, out: &TrainOutputs) -> Result<()> {
    let files = image_files(images_dir)?;
    ensure!(!files.is_empty(), "no .pgm or .png images in {}", images_dir.display());
    let pristine = files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, load(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = match &settings.labels {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read label table {}", path.display()))?;
            Some(LabelTable::parse_csv(&text)?.rescaled_to_unit())
        }
        None => None,
    };
    let data = gen_training_data(&pristine, &settings.sigmas, labels.as_ref())?;
    ensure!(
        !data.is_empty(),
        "no training patches: all {} images are smaller than 32x32",
        data.skipped
    );
    if settings.verbose {
        eprintln!(
            "training on {} patches from {} images ({} skipped), {} epochs",
            data.len(),
            pristine.len(),
            data.skipped,
            settings.hyper.epochs
        );
    }
    let init = QnnModel::random(settings.hyper.seed);
    let (model, curve) = train(&init, &data, &settings.hyper)?;
    if settings.verbose {
        for (i, l) in curve.iter().enumerate() {
            eprintln!("epoch {} loss {l:.6}", i + 1);
        }
    }
    if let Some(parent) = out.model.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    model.save(out.model)?;

    let loss_path = out
        .loss_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.model.with_extension("loss.csv"));
    write_text(&loss_path, &loss_curve_csv(&curve))?;

    let prov_path = out
        .provenance_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.model.with_extension("labels.csv"));
    let mut prov = String::from("filename,sigma,label,label_source,patches\n");
    for p in &data.provenance {
        let source = if p.external_label { "table" } else { "sigma" };
        prov.push_str(&format!("{},{},{},{source},{}\n", p.name, p.sigma, p.label, p.patches));
    }
    write_text(&prov_path, &prov)?;

    match curve.last() {
        Some(l) => println!("final loss {l:.6} after {} epochs", curve.len()),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn fuse_one(settings: &Settings, model: &QnnModel, inputs: &[PathBuf], out_dir: &Path) -> Result<()> {
    ensure!(inputs.len() >= 2, "need at least two source images, got {}", inputs.len());
    let images = inputs.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    for (p, img) in inputs.iter().zip(&images).skip(1) {
        ensure!(
            img.same_shape(&images[0]),
            "size mismatch: {} is {}x{} but {} is {}x{}",
            p.display(),
            img.width(),
            img.height(),
            inputs[0].display(),
            images[0].width(),
            images[0].height()
        );
    }
    let result = run_pipeline(&images, model, &settings.pipeline)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    if settings.dump_intermediates {
        result.dump(out_dir, &images)?;
    } else {
        save_pgm(&result.fused, out_dir.join("fused.pgm"))?;
    }
    if settings.verbose {
        for (stage, t) in &result.timings {
            eprintln!("{stage}: {:.1} ms", t.as_secs_f64() * 1e3);
        }
        for line in &result.solver_log {
            eprintln!("{line}");
        }
        for (i, ok) in result.converged.iter().enumerate() {
            if !ok {
                eprintln!("note: solver for source {} stopped before reaching tolerance", i + 1);
            }
        }
    }
    println!(
        "fused {}x{} -> {}",
        result.fused.width(),
        result.fused.height(),
        out_dir.join("fused.pgm").display()
    );
    Ok(())
}

pub fn cmd_fuse(settings: &Settings, inputs: &[PathBuf], batch: Option<&Path>, out_dir: &Path) -> Result<()> {
    let model = load_model(settings)?;
    match batch {
        None => fuse_one(settings, &model, inputs, out_dir),
        Some(root) => {
            ensure!(inputs.is_empty(), "give either source images or --batch, not both");
            let cases = subdirs(root)?;
            ensure!(!cases.is_empty(), "no case directories in {}", root.display());
            for case in cases {
                let name = case.file_name().unwrap_or_default();
                let sources = case_sources(&case)?;
                fuse_one(settings, &model, &sources, &out_dir.join(name))
                    .with_context(|| format!("case {}", case.display()))?;
            }
            Ok(())
        }
    }
}

pub fn cmd_score(settings: &Settings, image: &Path, out: &Path) -> Result<()> {
    let model = load_model(settings)?;
    let img = load(image)?;
    let map = score_map(&model, &img)?;
    if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        save_unit_map_pgm(&map, out)?;
    } else {
        save_f32map(&map, out)?;
    }
    let (lo, hi) = map.min_max();
    println!("score map {}x{} range [{lo:.4}, {hi:.4}] -> {}", map.width(), map.height(), out.display());
    Ok(())
}

pub struct EvalInput<'a> {
    pub files: &'a [PathBuf],
    pub gt: Option<&'a Path>,
    pub name: Option<&'a str>,
    pub dir: Option<&'a Path>,
    pub fused_dir: Option<&'a Path>,
    pub table: bool,
    pub out: Option<&'a Path>,
}

fn eval_case(name: String, sources: &[PathBuf], fused: &Path, gt: Option<&Path>) -> Result<MetricsReport> {
    ensure!(
        sources.len() == 2,
        "{name}: need exactly two source images, found {}",
        sources.len()
    );
    let a = load(&sources[0])?;
    let b = load(&sources[1])?;
    let f = load(fused)?;
    let gt = gt.map(load).transpose()?;
    Ok(evaluate(name, &a, &b, &f, gt.as_ref())?)
}

pub fn render_reports(reports: &[MetricsReport], table: bool) -> String {
    if table {
        return format_table(reports);
    }
    let with_psnr = reports.iter().any(|r| r.psnr_vs_gt.is_some());
    let mut s = format!("{}\n", MetricsReport::csv_header(with_psnr));
    for r in reports {
        s.push_str(&r.csv_row());
        if with_psnr && r.psnr_vs_gt.is_none() {
            s.push(',');
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(input: &EvalInput) -> Result<()> {
    let reports = match input.dir {
        None => {
            let [a, b, f] = input.files else {
                bail!("eval needs SOURCE1 SOURCE2 FUSED, or --dir");
            };
            let name = input.name.map(str::to_string).unwrap_or_else(|| stem(f));
            vec![eval_case(name, &[a.clone(), b.clone()], f, input.gt)?]
        }
        Some(root) => {
            ensure!(input.files.is_empty(), "give either three images or --dir, not both");
            let cases = subdirs(root)?;
            ensure!(!cases.is_empty(), "no case directories in {}", root.display());
            let mut reports = Vec::with_capacity(cases.len());
            for case in cases {
                let name = case.file_name().unwrap_or_default().to_string_lossy().into_owned();
                let fused_home = input.fused_dir.map(|d| d.join(&name)).unwrap_or_else(|| case.clone());
                let Some(fused) = find_named(&fused_home, "fused")? else {
                    bail!("{name}: no fused image in {}", fused_home.display());
                };
                let gt = find_named(&case, "gt")?;
                reports.push(eval_case(name, &case_sources(&case)?, &fused, gt.as_deref())?);
            }
            reports
        }
    };
    let text = render_reports(&reports, input.table);
    match input.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub enum SharpSource<'a> {
    File(&'a Path),
    Texture(usize),
}

pub enum MaskSpec<'a> {
    /// Line through the center; angle in degrees, 0 puts I1's sharp side on the left.
    HalfPlane(f64),
    File(&'a Path),
}

/// Accept masks stored as 0/1 or 0/255; anything else is rejected.
fn binary_mask(img: &GrayImage) -> Result<GrayImage> {
    let data = img.data();
    if data.iter().all(|&v| v == 0.0 || v == 255.0) {
        Ok(img.map(|v| v / 255.0))
    } else if data.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(img.clone())
    } else {
        bail!("mask must contain only 0 and 255 (or only 0 and 1)")
    }
}

pub fn cmd_synth(settings: &Settings, sharp: SharpSource, mask: MaskSpec, out_dir: &Path) -> Result<()> {
    let sharp = match sharp {
        SharpSource::File(p) => load(p)?,
        SharpSource::Texture(n) => {
            ensure!(n > 0, "texture size must be positive");
            textured_image(n, n, settings.hyper.seed)
        }
    };
    let mask = match mask {
        MaskSpec::HalfPlane(deg) => half_plane_mask(sharp.width(), sharp.height(), deg.to_radians()),
        MaskSpec::File(p) => {
            let m = load(p)?;
            ensure!(
                m.same_shape(&sharp),
                "mask {} is {}x{} but the sharp image is {}x{}",
                p.display(),
                m.width(),
                m.height(),
                sharp.width(),
                sharp.height()
            );
            binary_mask(&m).with_context(|| format!("bad mask {}", p.display()))?
        }
    };
    let (i1, i2, gt) = make_multifocus_pair(&sharp, &mask, settings.sigma_blur)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    save_pgm(&i1, out_dir.join("I1.pgm"))?;
    save_pgm(&i2, out_dir.join("I2.pgm"))?;
    save_pgm(&gt, out_dir.join("gt.pgm"))?;
    println!("wrote I1.pgm, I2.pgm, gt.pgm to {}", out_dir.display());
    Ok(())
}

pub fn cmd_diff(fused: &Path, sources: &[PathBuf], out_dir: &Path) -> Result<()> {
    ensure!(!sources.is_empty(), "need at least one source image");
    let f = load(fused)?;
    let images = sources.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    for (p, img) in sources.iter().zip(&images) {
        ensure!(img.same_shape(&f), "size mismatch between {} and {}", p.display(), fused.display());
    }
    let (lo, hi) = diff_range(&f, &images);
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    for (i, img) in images.iter().enumerate() {
        // A zero range means every difference is equal; there is nothing to scale.
        let d = if hi > lo {
            diff_map(&f, img, lo, hi)?
        } else {
            GrayImage::filled(f.width(), f.height(), 0.0)
        };
        save_pgm(&d, out_dir.join(format!("diff_{}.pgm", i + 1)))?;
    }
    println!("difference range [{lo}, {hi}], {} maps -> {}", images.len(), out_dir.display());
    Ok(())
}
