use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cowpro::evaluation::{one_shot_eval, HeadOverrides, QuadrantMap};
use cowpro::io::{
    read_quadrant_map, read_volume, synth_dataset, write_volume, Checkpoint, Dataset, RunConfig, SynthSpec, Volume,
};
use cowpro::numerics::gradcheck::{run_op_suite, DEFAULT_TOLERANCE};
use cowpro::superpixel::felzenszwalb;
use cowpro::training::{checkpoint_due, pipeline_gradcheck, Trainer};

/// 2 for file-system and file-format failures, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<cowpro::Error>() {
            return match err {
                cowpro::Error::Io { .. } | cowpro::Error::Format { .. } => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn io_err(path: &Path, e: std::io::Error) -> cowpro::Error {
    cowpro::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn synth(out: &Path, scans: usize, slices: usize, size: usize, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        scans,
        slices,
        size,
        seed,
    };
    let ds = synth_dataset(out, &spec)?;
    println!("wrote {} scans to {}", ds.scans().len(), out.display());
    Ok(())
}

pub fn pseudo_label(
    data: &Path,
    scale: Option<f64>,
    sigma: Option<f64>,
    min_size: Option<usize>,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = scale {
        cfg.superpixel.scale = v;
    }
    if let Some(v) = sigma {
        cfg.superpixel.sigma = v;
    }
    if let Some(v) = min_size {
        cfg.superpixel.min_size = v;
    }
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    let mut total = 0;
    for scan in ds.scans() {
        let vol = ds.load_scan(scan)?;
        let (h, w) = vol.extent()?;
        let params = cfg.felz_params(h, w);
        for (z, slice) in vol.slices.iter().enumerate() {
            let labels = felzenszwalb(slice, &params)?;
            ds.write_labels(scan, z, &labels)?;
            total += 1;
        }
    }
    println!("wrote {total} label maps");
    Ok(())
}

pub fn train(data: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let resumed = resume.map(Checkpoint::read).transpose()?;
    let cfg = match (config, &resumed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => c.config.clone(),
        (None, None) => RunConfig::default(),
    };
    let ds = Dataset::open(data)?;
    let (train_scans, held) = ds.split(cfg.data.num_folds, cfg.data.fold)?;
    let pool = ds.training_pool(&train_scans, &cfg.train.exclude_organs)?;
    eprintln!(
        "training on {} slices from {} scans ({} held out)",
        pool.len(),
        train_scans.len(),
        held.len()
    );
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_err(&cfg_path, e))?;

    let mut trainer = match resumed {
        Some(c) => Trainer::resume(&pool, cfg.train.clone(), c.weights, c.iteration as usize)?,
        None => Trainer::new(&pool, cfg.train.clone())?,
    };
    let log_path = out.join("loss.log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(trainer.iteration() > 0)
        .truncate(trainer.iteration() == 0)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if trainer.iteration() == 0 {
        writeln!(log, "# iteration ssl ccr lr").map_err(|e| io_err(&log_path, e))?;
    }
    trainer.run(|r, t| {
        writeln!(log, "{} {:.8} {:.8} {:e}", r.iteration, r.ssl, r.ccr, r.lr).map_err(|e| io_err(&log_path, e))?;
        let done = r.iteration + 1;
        if done % 100 == 0 {
            eprintln!("iter {done}: ssl {:.4} ccr {:.4} lr {:e}", r.ssl, r.ccr, r.lr);
        }
        if checkpoint_due(t.config(), done) {
            let ckpt = Checkpoint {
                iteration: done as u64,
                config: cfg.clone(),
                weights: t.weights().clone(),
            };
            ckpt.write(&out.join(format!("ckpt_{done:06}.cwpc")))?;
            if done == t.config().iterations {
                ckpt.write(&out.join("final.cwpc"))?;
            }
        }
        Ok(())
    })?;
    let t = trainer.telemetry();
    eprintln!(
        "done: {} iterations, cyclic term skipped {} times, {} slices skipped",
        trainer.iteration(),
        t.ccr_skipped,
        t.slices_skipped
    );
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub ckpt: &'a Path,
    pub organ: &'a str,
    pub quadrant_map: Option<&'a Path>,
    pub no_quadrant_mask: bool,
    pub overrides: HeadOverrides,
    pub records: Option<&'a Path>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(a.ckpt)?;
    let ds = Dataset::open(a.data)?;
    let (_, held) = ds.split(ckpt.config.data.num_folds, ckpt.config.data.fold)?;
    let Some((support_id, query_ids)) = held.split_last() else {
        bail!("held-out fold is empty");
    };
    let support = ds.load_scan(support_id)?;
    let queries = query_ids
        .iter()
        .map(|s| ds.load_scan(s))
        .collect::<cowpro::Result<Vec<_>>>()?;
    let head = a.overrides.apply(&ckpt.config.train.head);
    let qmap: Option<QuadrantMap> = if a.no_quadrant_mask {
        None
    } else {
        match a.quadrant_map {
            Some(p) => Some(read_quadrant_map(p)?),
            None if ds.quadrant_path().exists() => Some(read_quadrant_map(&ds.quadrant_path())?),
            None => None,
        }
    };
    let report = one_shot_eval(&support, &queries, a.organ, &ckpt.weights, &head, qmap.as_ref())
        .with_context(|| format!("evaluating {}", a.organ))?;
    println!("{report}");
    print!("{}", report.records());
    if let Some(p) = a.records {
        std::fs::write(p, report.records()).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

pub fn predict(support_img: &Path, support_mask: &Path, query_img: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::read(ckpt)?;
    let s = read_volume(support_img)?.to_tensor()?;
    let m = read_volume(support_mask)?.to_mask()?;
    let q = read_volume(query_img)?.to_tensor()?;
    let p = cowpro::model::predict(&ckpt.weights, &ckpt.config.train.head, &s, &m, &q)?;
    write_volume(out, &Volume::from_mask(&p.mask))?;
    println!("foreground pixels: {}", p.mask.count());
    Ok(())
}

pub fn gradcheck(seeds: u64) -> Result<()> {
    let mut checks = run_op_suite(0, seeds, DEFAULT_TOLERANCE)?;
    for seed in 0..seeds {
        checks.push(pipeline_gradcheck(seed)?);
    }
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        println!(
            "{:<24} seed {:>3}  rel err {:.2e}  {status}",
            c.name, c.seed, c.max_rel_error
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", checks.len());
    }
    println!("all {} gradient checks passed", checks.len());
    Ok(())
}
