use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use crowd_density::corpus::Corpus;
use crowd_density::evaluation::{cross_eval as cross_evaluate, evaluate, scale_sweep};
use crowd_density::gradcheck::battery;
use crowd_density::groundtruth::{DensityMap, GtMode, DEFAULT_FALLBACK_SIGMA};
use crowd_density::network::{Model, NetworkConfig};
use crowd_density::rng::{stream, Stream};
use crowd_density::sit::{draw_alphas, eval_alphas, mixer_expansion_coeffs, Phase, SitConfig};
use crowd_density::synth::synth_corpus;
use crowd_density::training::{train as run_training, TrainOutcome};
use crowd_density::{checkpoint, pgm, Scalar};
use serde::de::DeserializeOwned;

use crate::config::{self, usage, EvalRun, ExportRun, GradcheckRun, GtRun, MixerTestRun, Precision, SynthRun, TrainRun};
use crate::{EvalArgs, ExportArgs, GradcheckArgs, GtArgs, GtKind, MixerTestArgs, SweepArgs, SynthArgs, TrainArgs};

fn resolve<C: DeserializeOwned>(path: Option<&Path>, command: &str, default: impl FnOnce() -> C) -> Result<C> {
    match path {
        Some(p) => config::load(p, command),
        None => Ok(default()),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("missing --{flag} (or `{flag}` in the config)")))
}

fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let corpus = Corpus::load(manifest)?;
    for w in &corpus.warnings {
        eprintln!("warning: {w}");
    }
    Ok(corpus)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "synth", SynthRun::default)?;
    set(&mut c.count, a.count);
    set(&mut c.id, a.id);
    set(&mut c.out, a.out);
    set(&mut c.scene.profile, a.profile);
    set(&mut c.scene.width, a.width);
    set(&mut c.scene.height, a.height);
    set(&mut c.scene.count_range.0, a.min_people);
    set(&mut c.scene.count_range.1, a.max_people);
    set(&mut c.scene.noise, a.noise);
    set(&mut c.scene.seed, a.seed);
    if c.count == 0 {
        return Err(usage("--count must be positive"));
    }
    c.scene.validate()?;
    config::echo(&c.out, "synth", &c)?;
    let corpus = synth_corpus(&c.id, &c.scene, c.count, c.split)?;
    let manifest = corpus.save(&c.out)?;
    println!("wrote {} images, manifest {}", corpus.samples.len(), manifest.display());
    Ok(())
}

pub fn gt(a: GtArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "gt", GtRun::default)?;
    set(&mut c.manifest, a.manifest.map(Some));
    set(&mut c.out, a.out);
    let kind = a.mode.unwrap_or(match c.gt {
        GtMode::Fixed { .. } => GtKind::Fixed,
        GtMode::Adaptive { .. } => GtKind::Adaptive,
    });
    c.gt = match (kind, c.gt) {
        (GtKind::Fixed, GtMode::Fixed { sigma }) => GtMode::Fixed { sigma: a.sigma.unwrap_or(sigma) },
        (GtKind::Fixed, _) => GtMode::Fixed { sigma: a.sigma.unwrap_or(DEFAULT_FALLBACK_SIGMA) },
        (GtKind::Adaptive, GtMode::Adaptive { beta, k, fallback_sigma }) => GtMode::Adaptive {
            beta: a.beta.unwrap_or(beta),
            k: a.k.unwrap_or(k),
            fallback_sigma: a.sigma.unwrap_or(fallback_sigma),
        },
        (GtKind::Adaptive, _) => {
            let GtMode::Adaptive { beta, k, fallback_sigma } = GtMode::default() else { unreachable!() };
            GtMode::Adaptive {
                beta: a.beta.unwrap_or(beta),
                k: a.k.unwrap_or(k),
                fallback_sigma: a.sigma.unwrap_or(fallback_sigma),
            }
        }
    };
    if kind == GtKind::Fixed && (a.beta.is_some() || a.k.is_some()) {
        return Err(usage("--beta and --k only apply to --mode adaptive"));
    }
    let manifest = required(&c.manifest, "manifest")?.to_path_buf();
    let corpus = load_corpus(&manifest)?;
    config::echo(&c.out, "gt", &c)?;
    let (mut written, mut worst) = (0usize, 0.0f64);
    for s in &corpus.samples {
        let Some(ann) = &s.annotation else { continue };
        let map = c.gt.generate(ann)?;
        worst = worst.max((map.count() - ann.count() as f64).abs());
        map.save(&c.out.join(format!("{}.dmap", s.id)))?;
        written += 1;
    }
    println!("wrote {written} density maps to {}; max |sum - count| = {worst:.3e}", c.out.display());
    Ok(())
}

fn report_training<T>(out: &TrainOutcome<T>) {
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    for r in out.log.iter().filter(|r| r.val_mae.is_some()) {
        let loss = r.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.6}"));
        println!(
            "iter {:>6}  loss {loss:>12}  val MAE {:.4}  val MSE {:.4}",
            r.iter,
            r.val_mae.unwrap_or(f64::NAN),
            r.val_mse.unwrap_or(f64::NAN)
        );
    }
    if let Some(last) = out.checkpoints.last() {
        println!("final checkpoint {}", last.display());
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "train", TrainRun::default)?;
    set(&mut c.manifest, a.manifest.map(Some));
    set(&mut c.out, a.out);
    set(&mut c.precision, a.precision);
    set(&mut c.network.sit.groups, a.groups);
    if a.no_dense {
        c.network.dense = false;
    }
    let t = &mut c.train;
    set(&mut t.loss, a.loss);
    set(&mut t.iterations, a.iterations);
    set(&mut t.lr, a.lr);
    set(&mut t.batch, a.batch);
    set(&mut t.patch, a.patch);
    set(&mut t.seed, a.seed);
    set(&mut t.checkpoint_every, a.checkpoint_every);
    if a.no_flip {
        t.flip = false;
    }
    // a mixer given anywhere ends up in the network so the echo has one source of truth
    if let Some(m) = a.mixer.or(c.train.mixer.take()) {
        c.network.sit.mixer = m;
    }
    c.network.seed = c.train.seed;
    c.network.validate()?;
    c.train.validate(&c.network)?;
    let manifest = required(&c.manifest, "manifest")?.to_path_buf();
    let corpus = load_corpus(&manifest)?;
    config::echo(&c.out, "train", &c)?;
    match c.precision {
        Precision::F32 => report_training(&run_training::<f32>(&c.train, &c.network, &corpus, Some(&c.out))?),
        Precision::F64 => report_training(&run_training::<f64>(&c.train, &c.network, &corpus, Some(&c.out))?),
    }
    Ok(())
}

/// Fill an evaluation config from flags and echo it; returns it with the network resolved.
fn resolve_eval(command: &str, a: EvalArgs, ratios: Option<Vec<f64>>) -> Result<(EvalRun, NetworkConfig, Corpus)> {
    let mut c = resolve(a.config.as_deref(), command, || EvalRun::new(command))?;
    set(&mut c.checkpoint, a.checkpoint.map(Some));
    set(&mut c.manifest, a.manifest.map(Some));
    set(&mut c.split, a.split);
    set(&mut c.precision, a.precision);
    set(&mut c.ratios, ratios);
    set(&mut c.out, a.out);
    let checkpoint = required(&c.checkpoint, "checkpoint")?.to_path_buf();
    let net = match &c.network {
        Some(n) => n.clone(),
        None => config::network_beside(&checkpoint)?,
    };
    net.validate()?;
    c.network = Some(net.clone());
    let corpus = load_corpus(required(&c.manifest, "manifest")?)?;
    config::echo(&c.out, command, &c)?;
    Ok((c, net, corpus))
}

fn load_model<T: Scalar>(c: &EvalRun, net: &NetworkConfig) -> Result<Model<T>> {
    let path = c.checkpoint.as_deref().expect("checkpoint resolved");
    Ok(checkpoint::load(net, path)?)
}

fn eval_with<T: Scalar>(c: &EvalRun, net: &NetworkConfig, corpus: &Corpus) -> Result<()> {
    let model = load_model::<T>(c, net)?;
    let report = evaluate(&model, &corpus.split(c.split))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let path = c.out.join("report.csv");
    report.write_csv(&path)?;
    println!("{} images  MAE {:.4}  MSE {:.4}  report {}", report.records.len(), report.mae, report.mse, path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (c, net, corpus) = resolve_eval("eval", a, None)?;
    match c.precision {
        Precision::F32 => eval_with::<f32>(&c, &net, &corpus),
        Precision::F64 => eval_with::<f64>(&c, &net, &corpus),
    }
}

fn sweep_with<T: Scalar>(c: &EvalRun, net: &NetworkConfig, corpus: &Corpus) -> Result<()> {
    let model = load_model::<T>(c, net)?;
    let result = scale_sweep(&model, &corpus.split(c.split), &c.ratios)?;
    for (ratio, why) in &result.skipped {
        eprintln!("warning: area ratio {ratio} skipped: {why}");
    }
    let path = c.out.join("sweep.csv");
    result.write_csv(&path)?;
    print!("{}", result.to_csv());
    println!("sweep written to {}", path.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let (c, net, corpus) = resolve_eval("sweep", a.eval, a.ratios)?;
    match c.precision {
        Precision::F32 => sweep_with::<f32>(&c, &net, &corpus),
        Precision::F64 => sweep_with::<f64>(&c, &net, &corpus),
    }
}

fn cross_eval_with<T: Scalar>(c: &EvalRun, net: &NetworkConfig, corpus: &Corpus) -> Result<()> {
    let model = load_model::<T>(c, net)?;
    let report = cross_evaluate(&model, &corpus.split(c.split), &corpus.id)?;
    let path = c.out.join("report.csv");
    report.write_csv(&path)?;
    println!(
        "corpus {}: {} images  MAE {:.4}  MSE {:.4}  report {}",
        corpus.id,
        report.records.len(),
        report.mae,
        report.mse,
        path.display()
    );
    Ok(())
}

pub fn cross_eval(a: EvalArgs) -> Result<()> {
    let (c, net, corpus) = resolve_eval("cross-eval", a, None)?;
    match c.precision {
        Precision::F32 => cross_eval_with::<f32>(&c, &net, &corpus),
        Precision::F64 => cross_eval_with::<f64>(&c, &net, &corpus),
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "gradcheck", GradcheckRun::default)?;
    set(&mut c.seed, a.seed);
    set(&mut c.out, a.out);
    config::echo(&c.out, "gradcheck", &c)?;
    let entries = battery(c.seed)?;
    println!("{:<28} {:>10} {:>10} {:>8} {:>6}", "check", "max rel", "tolerance", "probed", "kinks");
    for e in &entries {
        println!(
            "{:<28} {:>10.2e} {:>10.0e} {:>8} {:>6}  {}",
            e.name,
            e.max_rel_err,
            e.tolerance,
            e.probed,
            e.kinks_skipped,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        return Err(anyhow!("{failed} gradient checks exceeded their tolerance"));
    }
    println!("all {} checks passed", entries.len());
    Ok(())
}

pub fn mixer_test(a: MixerTestArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "mixer-test", MixerTestRun::default)?;
    set(&mut c.groups, a.groups);
    set(&mut c.draws, a.draws);
    set(&mut c.seed, a.seed);
    set(&mut c.out, a.out);
    if c.groups == 0 || c.draws == 0 {
        return Err(usage("--G and --draws must be positive"));
    }
    config::echo(&c.out, "mixer-test", &c)?;
    let cfg = SitConfig { groups: c.groups, ..SitConfig::default() };
    let mut rng = stream(c.seed, Stream::Mixer);
    let (mut worst, mut min_coeff) = (0.0f64, f64::INFINITY);
    for _ in 0..c.draws {
        for row in mixer_expansion_coeffs(&draw_alphas(&mut rng, &cfg, Phase::Train), c.groups)? {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            min_coeff = row.iter().copied().fold(min_coeff, f64::min);
        }
    }
    let rows = mixer_expansion_coeffs(&eval_alphas(&cfg), c.groups)?;
    let last = rows.last().expect("at least one group");
    let shown = if last.len() > 1 { &last[1..] } else { &last[..] };
    println!("G = {}, {} draws", c.groups, c.draws);
    println!("max |row sum - 1| = {worst:.3e}");
    println!("min coefficient = {min_coeff:.3e}");
    println!(
        "alpha = 0.5 row for output {}: {}",
        c.groups - 1,
        shown.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    );
    if worst > 1e-12 || min_coeff < 0.0 {
        return Err(anyhow!("expansion rows are not convex"));
    }
    Ok(())
}

pub fn export_pgm(a: ExportArgs) -> Result<()> {
    let mut c = resolve(a.config.as_deref(), "export-pgm", ExportRun::default)?;
    set(&mut c.input, a.input.map(Some));
    set(&mut c.out, a.out.map(Some));
    let input = required(&c.input, "in")?.to_path_buf();
    let out = required(&c.out, "out")?.to_path_buf();
    let map = DensityMap::load(&input)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config::echo(dir, "export-pgm", &c)?;
    pgm::write_normalized(&out, &map.grid)?;
    println!("{}x{} map (sum {:.3}) written to {}", map.width(), map.height(), map.count(), out.display());
    Ok(())
}
