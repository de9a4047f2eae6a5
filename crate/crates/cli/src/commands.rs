use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fullglow::data::{
    boundary_map, center_dequantize, generate_dataset, grid_tensor_u8, quantize, read_dataset, read_image,
    read_instance_map, write_dataset, write_image, Grid, RgbImage,
};
use fullglow::model::FullGlow;
use fullglow::train::{self, load_checkpoint, trace_csv, TrainState};
use fullglow::verify::{run_all, VerifyOptions};
use fullglow::{Error, Result, Tensor};

use crate::run_config::RunConfig;
use crate::EXIT_NUMERICAL;

pub fn gen_data(n: usize, size: usize, seed: u64, classes: usize, out: &Path) -> Result<u8> {
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let samples = generate_dataset(n, size, classes, seed)?;
    write_dataset(out, &samples)?;
    println!("wrote {n} pairs of {size}×{size} to {}", out.display());
    Ok(0)
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub iterations: Option<u64>,
    pub trace: Option<PathBuf>,
    pub resume: bool,
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        cfg.train.iterations = iterations;
    }
    cfg.validate()?;
    cfg.train.checkpoint_path = Some(args.out.clone());
    // The effective settings, after overrides, for reproducing the run.
    std::fs::write(args.out.with_extension("run.cfg"), cfg.to_text())?;

    let data = read_dataset(&args.data)?;
    let mut state = if args.resume {
        let state = load_checkpoint::<f32>(&args.out)?;
        if *state.model.config() != cfg.model {
            return Err(Error::config(format!(
                "checkpoint {} was trained with a different model configuration",
                args.out.display()
            )));
        }
        state
    } else {
        TrainState::new(FullGlow::<f32>::new(cfg.model.clone(), cfg.train.seed)?)
    };

    let interval = cfg.train.checkpoint_interval;
    let mut rows = Vec::new();
    let result = train::train(&mut state, &data, &cfg.train, |row, _| {
        rows.push(*row);
        if (row.iteration + 1) % interval == 0 {
            eprintln!(
                "iteration {:>6}  loss {:.4}  bpd source {:.4}  target {:.4}",
                row.iteration + 1,
                row.loss,
                row.bpd_source,
                row.bpd_target
            );
        }
        Ok(())
    });
    let trace_path = args.trace.unwrap_or_else(|| args.out.with_extension("trace.csv"));
    std::fs::write(&trace_path, trace_csv(&rows))?;
    result?;
    println!("trained to iteration {}; checkpoint {}, trace {}", state.iteration, args.out.display(), trace_path.display());
    Ok(0)
}

/// Boundary map from an instance file when given, otherwise from the
/// distinct colours of the segmentation itself.
fn boundary_for(seg: &RgbImage, instances: Option<&Path>) -> Result<Tensor<f32>> {
    let ids = match instances {
        Some(path) => read_instance_map(path)?,
        None => {
            let data = (0..seg.height)
                .flat_map(|y| (0..seg.width).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let [r, g, b] = seg.pixel(x, y);
                    u32::from_be_bytes([0, r, g, b])
                })
                .collect();
            Grid::new(seg.width, seg.height, data)?
        }
    };
    if (ids.width, ids.height) != (seg.width, seg.height) {
        return Err(Error::config(format!(
            "instance map is {}×{}, segmentation is {}×{}",
            ids.width, ids.height, seg.width, seg.height
        )));
    }
    Ok(grid_tensor_u8(&boundary_map(&ids)))
}

/// Source tensor (and boundary map when the model uses one) for a
/// segmentation image, checked against the model's resolution.
fn conditioning(model: &FullGlow<f32>, seg_path: &Path, instances: Option<&Path>) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let seg = read_image(seg_path)?;
    let size = model.config().image_size;
    if (seg.width, seg.height) != (size, size) {
        return Err(Error::config(format!(
            "{} is {}×{}, the model expects {size}×{size}",
            seg_path.display(),
            seg.width,
            seg.height
        )));
    }
    let boundary = if model.uses_boundary() { Some(boundary_for(&seg, instances)?) } else { None };
    Ok((center_dequantize(&seg), boundary))
}

fn repeat(t: &Tensor<f32>, n: usize) -> Result<Tensor<f32>> {
    Tensor::stack(&vec![t.clone(); n])
}

pub fn sample(
    ckpt: &Path,
    cond: &Path,
    instances: Option<&Path>,
    temperature: f64,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<u8> {
    if n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let model = load_checkpoint::<f32>(ckpt)?.model;
    let (source, boundary) = conditioning(&model, cond, instances)?;
    let source = repeat(&source, n)?;
    let boundary = boundary.map(|b| repeat(&b, n)).transpose()?;
    let images = model.sample(&source, boundary.as_ref(), temperature, &mut ChaCha8Rng::seed_from_u64(seed))?;
    std::fs::create_dir_all(out)?;
    for i in 0..n {
        let path = out.join(format!("sample_{i:03}.ppm"));
        write_image(&path, &quantize(&images.sample(i))?)?;
    }
    println!("wrote {n} samples at temperature {temperature} to {}", out.display());
    Ok(0)
}

pub struct TransferArgs {
    pub ckpt: PathBuf,
    pub content_photo: PathBuf,
    pub content_seg: PathBuf,
    pub target_seg: PathBuf,
    pub content_instances: Option<PathBuf>,
    pub target_instances: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn transfer(args: TransferArgs) -> Result<u8> {
    let model = load_checkpoint::<f32>(&args.ckpt)?.model;
    let (a1, b1) = conditioning(&model, &args.content_seg, args.content_instances.as_deref())?;
    let (a2, b2) = conditioning(&model, &args.target_seg, args.target_instances.as_deref())?;
    let photo = read_image(&args.content_photo)?;
    if (photo.width, photo.height) != (model.config().image_size, model.config().image_size) {
        return Err(Error::config(format!("{} does not match the model resolution", args.content_photo.display())));
    }
    let out = model.content_transfer((&a1, b1.as_ref()), &center_dequantize(&photo), (&a2, b2.as_ref()))?;
    write_image(&args.out, &quantize(&out)?)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

pub fn bpd(ckpt: &Path, data: &Path) -> Result<u8> {
    let model = load_checkpoint::<f32>(ckpt)?.model;
    let samples = read_dataset(data)?;
    let size = model.config().image_size;
    if let Some(bad) = samples.iter().position(|s| s.size() != (size, size)) {
        return Err(Error::config(format!("pair {bad} is {:?}, the model expects {size}×{size}", samples[bad].size())));
    }
    println!("{:.6}", train::evaluate_bpd(&model, &samples)?);
    Ok(0)
}

pub fn verify(quick: bool) -> Result<u8> {
    let results = run_all(&VerifyOptions { quick }, |r| println!("{r}"));
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        println!("all {} checks passed", results.len());
        Ok(0)
    } else {
        println!("{failed} of {} checks failed", results.len());
        Ok(EXIT_NUMERICAL)
    }
}
