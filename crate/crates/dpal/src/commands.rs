//! The operations behind each CLI command.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dpal_core::data::{corrupt, generate_shapes, stream, BatchStream, Corruption, CorruptionFamily, ShapeDataset, Split};
use dpal_core::engine::{adapt_online, dataset_accuracy, evaluate_frozen, train_source, AdaptMode, Adapter, TrainedSource};
use dpal_core::lifting::{LiftingField, ParamId};
use dpal_core::smoothness::{gradient_gap_battery, lsmooth_battery_scaled, suboptimality_battery};
use dpal_core::vit::Backbone;
use dpal_core::Tensor;
use serde::Serialize;

use crate::config::RunConfig;
use crate::container::{self, Entry};
use crate::report::{self, Cell, EpochRow, RunSummary, SummaryRow};
use crate::store;
use crate::CliError;

/// A resolved configuration and its output directory.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// Progress lines go here; tests pass a sink.
    pub log: Box<dyn FnMut(&str)>,
}

impl Context {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            log: Box::new(|s| println!("{s}")),
        }
    }

    pub fn quiet(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
            log: Box::new(|_| {}),
        }
    }

    fn say(&mut self, s: &str) {
        (self.log)(s)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.config.string("paths.checkpoint") {
            Some(p) => PathBuf::from(p),
            None => self.out.join("source.dplc"),
        }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    fn test_set(&self) -> Result<ShapeDataset, CliError> {
        let n = self.config.usize("dataset.n_test")?;
        Ok(generate_shapes(n, Split::Test, self.config.u64("dataset.seed")?)?)
    }

    fn severities(&self) -> Result<Vec<u8>, CliError> {
        self.config
            .list::<usize>("adapt.severities")?
            .into_iter()
            .map(|s| u8::try_from(s).ok().filter(|s| *s <= 5).ok_or_else(|| bad_severity(s)))
            .collect()
    }

    fn load_backbone(&self) -> Result<Backbone, CliError> {
        store::load_backbone(&self.checkpoint_path())
    }
}

fn bad_severity(s: usize) -> CliError {
    CliError::Config(format!("severity {s} outside 0..=5"))
}

fn make_stream(ctx: &Context, test: &ShapeDataset, c: Corruption, seed: u64) -> Result<BatchStream, CliError> {
    let b = ctx.config.usize("adapt.batch_size")?;
    if b > test.len() {
        return Err(CliError::Config(format!(
            "adapt.batch_size {b} exceeds dataset.n_test {}",
            test.len()
        )));
    }
    Ok(stream(test, &c, b, seed, false)?)
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Trains the source model, then writes the checkpoint and `train_log.csv`.
pub fn train(ctx: &mut Context) -> Result<TrainedSource, CliError> {
    let n = ctx.config.usize("dataset.n")?;
    let model = ctx.config.model()?;
    let tc = ctx.config.train()?;
    let seed = ctx.config.u64("dataset.seed")?;
    let train = generate_shapes(n, Split::Train, seed)?;
    let test = ctx.test_set()?;
    mkdir(&ctx.out)?;
    let checkpoint = ctx.checkpoint_path();
    let start = Instant::now();
    let mut lines = Vec::new();
    let result = train_source(model, &train, Some(&test), &tc, |l| {
        lines.push(format!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {:.2e}  {:.0}s",
            l.epoch,
            l.mean_loss,
            l.train_accuracy,
            l.test_accuracy.unwrap_or(f64::NAN),
            l.lr,
            start.elapsed().as_secs_f64()
        ));
    })?;
    for l in &lines {
        ctx.say(l);
    }
    let rows: Vec<EpochRow> = result.epochs.iter().map(EpochRow::from).collect();
    report::write_csv(&ctx.out.join("train_log.csv"), &rows, report::EPOCH_HEADER)?;
    store::save_backbone(&checkpoint, &result.backbone)?;
    if let Some(e) = result.diverged_at {
        ctx.say(&format!("loss diverged in epoch {e}; kept the last finite checkpoint"));
    }
    let acc = result.test_accuracy.unwrap_or(f64::NAN);
    ctx.say(&format!("clean test accuracy {acc:.4}; checkpoint {}", checkpoint.display()));
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub corruption: String,
    pub severity: u8,
    pub accuracy: f64,
}

/// Frozen accuracy on the clean split and every configured corruption; writes `eval.csv`.
pub fn eval(ctx: &mut Context) -> Result<Vec<EvalRow>, CliError> {
    let backbone = ctx.load_backbone()?;
    let test = ctx.test_set()?;
    let seed = ctx.config.list::<u64>("adapt.seeds")?[0];
    let mut rows = vec![EvalRow {
        corruption: "clean".into(),
        severity: 0,
        accuracy: dataset_accuracy(&backbone, &test, 256)?,
    }];
    for family in ctx.config.list::<CorruptionFamily>("adapt.corruptions")? {
        for &severity in &ctx.severities()? {
            let s = make_stream(ctx, &test, Corruption::new(family, severity, seed)?, seed)?;
            rows.push(EvalRow {
                corruption: family.name().into(),
                severity,
                accuracy: evaluate_frozen(&backbone, &s)?,
            });
        }
    }
    for r in &rows {
        ctx.say(&format!("{:<16} {}  {:.4}", r.corruption, r.severity, r.accuracy));
    }
    mkdir(&ctx.out)?;
    report::write_csv(&ctx.out.join("eval.csv"), &rows, &["corruption", "severity", "accuracy"])?;
    Ok(rows)
}

pub struct AdaptOutcome {
    pub ran: usize,
    pub skipped: usize,
    pub runs: Vec<RunSummary>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every (corruption, severity, mode, seed) cell that has no finished
/// log yet, then rewrites the CSV summaries.
pub fn adapt(ctx: &mut Context) -> Result<AdaptOutcome, CliError> {
    let backbone = ctx.load_backbone()?;
    let model = backbone.cfg;
    let acfg = ctx.config.adapt(&model)?;
    let test = ctx.test_set()?;
    let runs_dir = ctx.runs_dir();
    mkdir(&runs_dir)?;
    let modes = ctx.config.list::<AdaptMode>("adapt.modes")?;
    let seeds = ctx.config.list::<u64>("adapt.seeds")?;
    let resolved = ctx.config.resolved();
    let (mut ran, mut skipped) = (0, 0);
    for family in ctx.config.list::<CorruptionFamily>("adapt.corruptions")? {
        for &severity in &ctx.severities()? {
            for mode in &modes {
                for &seed in &seeds {
                    let cell = Cell {
                        corruption: family.name().into(),
                        severity,
                        mode: mode.name(),
                        seed,
                    };
                    let path = report::run_path(&runs_dir, &cell);
                    if report::read_summary(&path)?.is_some() {
                        skipped += 1;
                        continue;
                    }
                    let s = make_stream(ctx, &test, Corruption::new(family, severity, seed)?, seed)?;
                    let start = Instant::now();
                    let mut adapter = Adapter::new(backbone.clone(), *mode, acfg, seed)?;
                    let r = adapt_online(&mut adapter, &s)?;
                    let wall = start.elapsed().as_secs_f64();
                    let summary = report::summarize(cell, &r, wall, resolved.clone());
                    report::write_run(&path, &r, &summary)?;
                    ctx.say(&format!("{}  accuracy {:.4}  {:.1}s", path.display(), r.accuracy, wall));
                    ran += 1;
                }
            }
        }
    }
    let (runs, summary) = report::write_reports(&runs_dir, &ctx.out)?;
    Ok(AdaptOutcome {
        ran,
        skipped,
        runs,
        summary,
    })
}

/// Regenerates `runs.csv` and `summary.csv` from the run logs.
pub fn report(ctx: &mut Context) -> Result<Vec<SummaryRow>, CliError> {
    let (_, rows) = report::write_reports(&ctx.runs_dir(), &ctx.out)?;
    for r in &rows {
        ctx.say(&format!(
            "{:<16} {} {:<24} n={}  {:.4} ± {:.4}",
            r.corruption, r.severity, r.mode, r.seeds, r.accuracy_mean, r.accuracy_std
        ));
    }
    Ok(rows)
}

fn domain_name(d: Option<CorruptionFamily>) -> &'static str {
    d.map_or("clean", CorruptionFamily::name)
}

/// One container per domain holding `pi` `[L, n, d]`, `tokens` `[L, d]` and labels.
pub fn dump_features(ctx: &mut Context) -> Result<Vec<PathBuf>, CliError> {
    let backbone = ctx.load_backbone()?;
    let acfg = ctx.config.adapt(&backbone.cfg)?;
    let mode: AdaptMode = ctx
        .config
        .string("dump.mode")
        .unwrap_or_default()
        .parse()
        .map_err(|e: dpal_core::Error| CliError::Config(e.to_string()))?;
    let severity = ctx.config.usize("dump.severity")?;
    let severity = u8::try_from(severity).ok().filter(|s| *s <= 5).ok_or_else(|| bad_severity(severity))?;
    let seed = ctx.config.list::<u64>("adapt.seeds")?[0];
    let test = ctx.test_set()?;
    let dir = ctx.out.join("features");
    mkdir(&dir)?;
    let (depth, d) = (backbone.cfg.depth, backbone.cfg.dim);
    let mut written = Vec::new();
    for domain in ctx.config.domains("dump.domains")? {
        let c = match domain {
            Some(f) => Corruption::new(f, severity, seed)?,
            None => Corruption::identity(),
        };
        let s = make_stream(ctx, &test, c, seed)?;
        let mut adapter = Adapter::new(backbone.clone(), mode, acfg, seed)?;
        if mode != AdaptMode::Frozen {
            adapt_online(&mut adapter, &s)?;
        }
        let n = test.len();
        let mut pi = vec![0.0; depth * n * d];
        let mut labels = vec![0i64; n];
        let mut row = 0;
        let mut indices = Vec::with_capacity(n);
        for b in &s.batches {
            let inf = adapter.model.infer(&b.images)?;
            let rows = b.labels.len();
            for (l, p) in inf.pis.iter().enumerate() {
                let dst = &mut pi[(l * n + row) * d..(l * n + row + rows) * d];
                dst.copy_from_slice(p.data());
            }
            for (i, &lab) in b.labels.iter().enumerate() {
                labels[row + i] = lab as i64;
            }
            indices.extend(b.indices.iter().map(|&i| i as i64));
            row += rows;
        }
        let mut tokens = Vec::with_capacity(depth * d);
        for l in 0..depth {
            let id = ParamId {
                layer: l,
                field: LiftingField::Token,
            };
            tokens.extend_from_slice(adapter.model.lifting.get(id)?.data());
        }
        let entries = vec![
            Entry::f64("pi", &Tensor::new(&[depth, n, d], pi)?),
            Entry::f64("tokens", &Tensor::new(&[depth, d], tokens)?),
            Entry::i64("labels", &[n], labels),
            Entry::i64("indices", &[n], indices),
        ];
        let path = dir.join(format!("{}.dplc", domain_name(domain)));
        container::save(&path, &entries)?;
        ctx.say(&format!("{}", path.display()));
        written.push(path);
    }
    Ok(written)
}

/// Class-token attention rows of the last layer, `[n, heads, T]`, for the
/// frozen model and after adapting on the corrupted split.
pub fn dump_attention(ctx: &mut Context) -> Result<PathBuf, CliError> {
    let backbone = ctx.load_backbone()?;
    let acfg = ctx.config.adapt(&backbone.cfg)?;
    let test = ctx.test_set()?;
    let samples = ctx.config.list::<usize>("dump.samples")?;
    if let Some(&bad) = samples.iter().find(|&&i| i >= test.len()) {
        return Err(CliError::Usage(format!(
            "sample index {bad} out of range for {} test samples",
            test.len()
        )));
    }
    let family = ctx.config.list::<CorruptionFamily>("dump.corruption")?[0];
    let severity = ctx.config.usize("dump.severity")?;
    let severity = u8::try_from(severity).ok().filter(|s| *s <= 5).ok_or_else(|| bad_severity(severity))?;
    let seed = ctx.config.list::<u64>("adapt.seeds")?[0];
    let c = Corruption::new(family, severity, seed)?;
    let s = make_stream(ctx, &test, c, seed)?;
    let mut adapter = Adapter::new(backbone.clone(), AdaptMode::DpalFull, acfg, seed)?;
    adapt_online(&mut adapter, &s)?;
    let images = corrupt(&test.gather(&samples)?, &c)?;
    let last = backbone.cfg.depth - 1;
    let class_rows = |a: Tensor| -> Result<Tensor, CliError> {
        let (n, h, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut out = Vec::with_capacity(n * h * t);
        for chunk in a.data().chunks(t * t) {
            out.extend_from_slice(&chunk[t..2 * t]);
        }
        Ok(Tensor::new(&[n, h, t], out)?)
    };
    let frozen = class_rows(backbone.extract_attention(&images, last)?)?;
    let adapted = class_rows(adapter.model.extract_attention(&images, last)?)?;
    let entries = vec![
        Entry::i64("indices", &[samples.len()], samples.iter().map(|&i| i as i64).collect()),
        Entry::i64(
            "labels",
            &[samples.len()],
            samples.iter().map(|&i| test.labels[i] as i64).collect(),
        ),
        Entry::f64("frozen", &frozen),
        Entry::f64("adapted", &adapted),
    ];
    mkdir(&ctx.out)?;
    let path = ctx.out.join("attention.dplc");
    container::save(&path, &entries)?;
    ctx.say(&format!("{}", path.display()));
    Ok(path)
}

#[derive(Serialize)]
struct GapRow {
    trial: usize,
    measured: f64,
    predicted: f64,
    beta: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct LSmoothRow {
    seed: u64,
    functions: usize,
    points: usize,
    smoothness_scale: f64,
    violations: usize,
}

#[derive(Serialize)]
struct BoundRow {
    trial: usize,
    lhs: f64,
    rhs: f64,
    slack: f64,
    beta: f64,
    excluded: bool,
    holds: bool,
}

/// Runs the three theory batteries, writes one CSV each, and fails with
/// the first violating trial.
pub fn verify_theory(ctx: &mut Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let seed = c.u64("theory.seed")?;
    let tolerance = c.f64("theory.gap_tolerance")?;
    let gap = gradient_gap_battery(c.usize("theory.gap_trials")?, c.f64("theory.gap_eta")?, seed)?;
    let scale = c.f64("theory.lsmooth_scale")?;
    let (functions, points) = (c.usize("theory.lsmooth_functions")?, c.usize("theory.lsmooth_points")?);
    let ls = lsmooth_battery_scaled(functions, points, seed, scale)?;
    let sub = suboptimality_battery(
        c.usize("theory.subopt_trials")?,
        c.f64("theory.subopt_eta")?,
        c.f64("theory.subopt_rho")?,
        seed,
    )?;
    let dir = ctx.out.join("theory");
    mkdir(&dir)?;
    let gap_rows: Vec<GapRow> = gap
        .results
        .iter()
        .enumerate()
        .map(|(trial, r)| GapRow {
            trial,
            measured: r.measured,
            predicted: r.predicted,
            beta: r.beta,
            relative_error: r.relative_error(),
        })
        .collect();
    report::write_csv(
        &dir.join("gradient_gap.csv"),
        &gap_rows,
        &["trial", "measured", "predicted", "beta", "relative_error"],
    )?;
    let ls_row = LSmoothRow {
        seed,
        functions,
        points: ls.points,
        smoothness_scale: scale,
        violations: ls.violations,
    };
    report::write_csv(&dir.join("lsmooth.csv"), &[ls_row], &[])?;
    let bound_rows: Vec<BoundRow> = sub
        .trials
        .iter()
        .enumerate()
        .map(|(trial, t)| BoundRow {
            trial,
            lhs: t.lhs,
            rhs: t.rhs,
            slack: t.slack,
            beta: t.beta,
            excluded: t.excluded,
            holds: t.holds(),
        })
        .collect();
    report::write_csv(
        &dir.join("suboptimality.csv"),
        &bound_rows,
        &["trial", "lhs", "rhs", "slack", "beta", "excluded", "holds"],
    )?;

    let mut failures = Vec::new();
    if let Some(r) = gap_rows.iter().find(|r| !(r.relative_error < tolerance)) {
        failures.push(format!(
            "gradient_gap seed {seed} trial {}: measured {:e}, predicted {:e}, relative error {:e}",
            r.trial, r.measured, r.predicted, r.relative_error
        ));
    }
    if ls.violations > 0 {
        failures.push(format!(
            "lsmooth seed {seed}: {} of {} points violate the bound (smoothness scale {scale})",
            ls.violations, ls.points
        ));
    }
    if let Some(r) = bound_rows.iter().find(|r| !r.holds) {
        failures.push(format!(
            "suboptimality seed {seed} trial {}: lhs {:e} > rhs {:e} + slack {:e}",
            r.trial, r.lhs, r.rhs, r.slack
        ));
    }
    ctx.say(&format!(
        "gradient_gap max relative error {:.3e}; lsmooth violations {}; suboptimality violations {} ({} excluded)",
        gap.max_rel_error, ls.violations, sub.violations, sub.excluded
    ));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}
