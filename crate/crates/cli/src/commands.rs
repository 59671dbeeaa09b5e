use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vaflab::bench::{
    ablation_sweep, build_probes, default_grid, evaluate, generate_corpus, read_jsonl, write_jsonl, Example, SweepAxis,
};
use vaflab::model::{checkpoint, train, ModelParams, Sequence};
use vaflab::report::{write_atomic, write_csv};
use vaflab::saliency::{layer_profile, HeadReduction};

use crate::config::{MethodArg, RunConfig};

#[derive(Debug, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
        Self { cfg, out }
    }

    fn report(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("cannot create {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn probes(&self) -> Result<Vec<Example>> {
        load_examples(&self.cfg.paths.probes, "probes")
    }

    fn params(&self) -> Result<ModelParams> {
        let path = &self.cfg.paths.checkpoint;
        let params = checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
        if params.config() != &self.cfg.model {
            bail!("checkpoint {} was trained with a different model config", path.display());
        }
        Ok(params)
    }
}

fn load_examples(path: &Path, what: &str) -> Result<Vec<Example>> {
    read_jsonl(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let world = &ctx.cfg.world;
    let corpus = generate_corpus(world)?;
    let probes = build_probes(&corpus.stats, world)?;
    for (path, rows) in [(&ctx.cfg.paths.corpus, &corpus.examples), (&ctx.cfg.paths.probes, &probes)] {
        ensure_parent(path)?;
        write_jsonl(path, rows).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "seed {}: {} training examples -> {}, {} probes -> {}",
        world.seed,
        corpus.examples.len(),
        ctx.cfg.paths.corpus.display(),
        probes.len(),
        ctx.cfg.paths.probes.display()
    );
    Ok(())
}

pub fn train_model(ctx: &Ctx) -> Result<()> {
    let vocab = ctx.cfg.world.vocab();
    let examples = load_examples(&ctx.cfg.paths.corpus, "corpus")?;
    let seqs: Vec<Sequence> = examples.iter().map(|e| e.to_sequence(&vocab)).collect::<vaflab::Result<_>>()?;
    let init = ModelParams::init(&ctx.cfg.model)?;
    let outcome = train(init, &seqs, &ctx.cfg.train)?;
    let path = &ctx.cfg.paths.checkpoint;
    ensure_parent(path)?;
    checkpoint::save(&outcome.params, path).with_context(|| format!("cannot write {}", path.display()))?;
    let rows: Vec<LossRow> = outcome
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow { epoch: i + 1, loss })
        .collect();
    let loss_path = ctx.report("train_loss.csv")?;
    write_csv(&loss_path, &rows)?;
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => println!(
            "{} epochs, {} steps, loss {:.4} -> {:.4}; checkpoint {}",
            rows.len(),
            outcome.steps,
            a.loss,
            b.loss,
            path.display()
        ),
        _ => println!("0 epochs; initial checkpoint {}", path.display()),
    }
    Ok(())
}

pub fn eval(ctx: &Ctx, method: MethodArg) -> Result<()> {
    let params = ctx.params()?;
    let probes = ctx.probes()?;
    let decode = ctx.cfg.decode_for(method);
    let report = evaluate(&params, &probes, &ctx.cfg.world.vocab(), &decode)?;
    let path = ctx.report(&format!("metrics_{}.csv", decode.method.name()))?;
    write_csv(&path, &report.rows())?;
    for row in report.rows() {
        println!(
            "{:<12} {:<8} acc {:6.2} prec {:6.2} rec {:6.2} f1 {:6.2}",
            row.category, row.method, row.accuracy, row.precision, row.recall, row.f1
        );
    }
    println!("forward calls {}; wrote {}", report.cost.forward_calls, path.display());
    Ok(())
}

pub fn saliency(ctx: &Ctx) -> Result<()> {
    let params = ctx.params()?;
    let vocab = ctx.cfg.world.vocab();
    let seqs: Vec<Sequence> = ctx
        .probes()?
        .iter()
        .map(|e| e.to_probe_sequence(&vocab))
        .collect::<vaflab::Result<_>>()?;
    let profile = layer_profile(&params, &seqs, HeadReduction::Sum)?;
    let csv = ctx.report("profile.csv")?;
    profile.write_csv(&csv)?;
    write_atomic(&ctx.report("flow.svg")?, profile.flow_svg().as_bytes())?;
    write_atomic(&ctx.report("allocation.svg")?, profile.allocation_svg().as_bytes())?;
    println!("{} layers over {} probes; wrote {}", profile.rows.len(), seqs.len(), csv.display());
    Ok(())
}

pub fn ablate(ctx: &Ctx, axis: SweepAxis) -> Result<()> {
    let params = ctx.params()?;
    let probes = ctx.probes()?;
    let grid = default_grid(axis, ctx.cfg.model.n_layers, ctx.cfg.decode.sampler.seed);
    let rows = ablation_sweep(
        &params,
        &probes,
        &ctx.cfg.world.vocab(),
        &ctx.cfg.vaf,
        &ctx.cfg.decode,
        &grid,
    )?;
    let path = ctx.report(&format!("ablate_{}.csv", axis.name()))?;
    write_csv(&path, &rows)?;
    for r in &rows {
        println!("{:<20} f1 {:6.2} adversarial f1 {:6.2}", r.setting, r.f1, r.adversarial_f1);
    }
    println!("wrote {}", path.display());
    Ok(())
}
