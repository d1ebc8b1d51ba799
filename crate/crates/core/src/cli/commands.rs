use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{DataLayout, EvalScope, RunConfig};
use super::plot::line_chart_svg;
use crate::data::{
    baseline_interpolate, build_random_mask, denormalize, fit_normalization, apply_normalization, ingest_csv,
    link_loads, make_windows, od_pairs, read_dense_csv, read_link_loads_csv, read_mask_csv, read_routing_csv,
    shortest_path_routing, toy_topology, train_test_split, write_dense_csv, write_mask_csv, write_trace_csv,
    CsvLayout, NetworkGraph, NormalizationParams, ObservationMask, RoutingMatrix, RoutingOptions, SyntheticTraffic,
    TrafficTensor,
};
use crate::denoiser::{
    impute_dataset, train_preprocessor, Checkpoint, Denoiser, DenoiserTrainer, LossTrace, TrainingSet,
};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate_tre, export_flat_samples, flatten_windows, mmd2, nmae, nrmse, tre, KernelConfig, MetricReport, Scope,
};
use crate::sampling::{
    assemble_series, covering_origins, sample_completion, sample_tomography, sample_unconditional, FlowObservations,
    GuidanceConfig, LinkObservations, RhoMode, SampleOutput,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.tmd";
pub const LOSS_FILE: &str = "loss.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require<'a>(cfg_value: &'a str, key: &str) -> Result<&'a str> {
    if cfg_value.is_empty() {
        Err(Error::Validation(format!("`{key}` is not set")))
    } else {
        Ok(cfg_value)
    }
}

/// Writes `manifest.json` (command, resolved configuration, `details`) and a
/// `resolved.conf` that can be passed back through `--config`.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, details: Value) -> Result<()> {
    let config: serde_json::Map<String, Value> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    let mut doc = json!({ "command": command, "config": config });
    if let (Some(obj), Value::Object(extra)) = (doc.as_object_mut(), details) {
        obj.extend(extra);
    }
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))?;
    write_text(&dir.join(MANIFEST_FILE), &(text + "\n"))?;
    write_text(&dir.join("resolved.conf"), &cfg.to_config_text())
}

fn read_trace(path: &Path) -> Result<TrafficTensor> {
    TrafficTensor::new(read_dense_csv(path)?.reversed_axes().as_standard_layout().to_owned())
}

fn read_layout(path: &Path, layout: DataLayout) -> Result<(TrafficTensor, ObservationMask)> {
    let layout = match layout {
        DataLayout::Time => CsvLayout::RowsAreTime,
        DataLayout::Flows => CsvLayout::RowsAreFlows,
    };
    ingest_csv(path, layout)
}

fn mask_or(a: &ObservationMask, b: &ObservationMask) -> Result<ObservationMask> {
    Ok(a.complement().and(&b.complement())?.complement())
}

/// The normalized dataset written by `ingest`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: TrafficTensor,
    pub train_mask: ObservationMask,
    pub test: TrafficTensor,
    /// Test entries that carry a measurement in the source trace.
    pub test_valid: ObservationMask,
    pub normalization: NormalizationParams,
}

impl Dataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_trace_csv(dir.join("train.csv"), self.train.values())?;
        write_mask_csv(dir.join("train_mask.csv"), &self.train_mask)?;
        write_trace_csv(dir.join("test.csv"), self.test.values())?;
        write_mask_csv(dir.join("test_valid.csv"), &self.test_valid)?;
        let params = serde_json::to_string_pretty(&self.normalization).map_err(|e| Error::Validation(e.to_string()))?;
        write_text(&dir.join("normalization.json"), &(params + "\n"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let norm_path = dir.join("normalization.json");
        let text = std::fs::read_to_string(&norm_path).map_err(|e| Error::io(&norm_path, e))?;
        let normalization: NormalizationParams = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: norm_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let normalization = NormalizationParams::new(normalization.clip_value, normalization.scale)?;
        let ds = Self {
            train: read_trace(&dir.join("train.csv"))?,
            train_mask: read_mask_csv(dir.join("train_mask.csv"))?,
            test: read_trace(&dir.join("test.csv"))?,
            test_valid: read_mask_csv(dir.join("test_valid.csv"))?,
            normalization,
        };
        if ds.train.shape() != ds.train_mask.shape() || ds.test.shape() != ds.test_valid.shape() {
            return Err(Error::Shape(format!("{}: tensors and masks disagree in shape", dir.display())));
        }
        if ds.train.flow_count() != ds.test.flow_count() {
            return Err(Error::Shape(format!(
                "{}: train has {} flows, test has {}",
                dir.display(),
                ds.train.flow_count(),
                ds.test.flow_count()
            )));
        }
        Ok(ds)
    }

    /// The first `slots` test slots (all of them for 0).
    fn test_prefix(&self, slots: usize) -> Result<(TrafficTensor, ObservationMask)> {
        let total = self.test.time_count();
        let len = if slots == 0 { total } else { slots.min(total) };
        Ok((self.test.time_slice(0, len)?, self.test_valid.time_slice(0, len)?))
    }
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone)]
pub struct GenOutcome {
    pub dir: PathBuf,
    pub flows: usize,
    pub links: usize,
}

fn ring_topology(nodes: usize) -> Result<NetworkGraph> {
    let mut edges: Vec<(usize, usize)> = (0..nodes).map(|i| (i, (i + 1) % nodes)).collect();
    edges.retain(|&(u, v)| u < v || (v == 0 && u + 1 == nodes && nodes > 2));
    NetworkGraph::unit(nodes, &edges)
}

/// Synthetic diurnal traffic plus a matching topology and routing matrix.
pub fn cmd_gen(cfg: &RunConfig) -> Result<GenOutcome> {
    let traffic = SyntheticTraffic {
        nodes: cfg.gen_nodes,
        slots: cfg.gen_slots,
        period: cfg.gen_period,
        amplitude: cfg.gen_amplitude,
        noise: cfg.gen_noise,
        base: cfg.gen_base,
        seed: cfg.gen_seed,
    };
    let x = traffic.generate()?;
    let graph = if cfg.gen_nodes == 6 { toy_topology() } else { ring_topology(cfg.gen_nodes)? };
    let a = shortest_path_routing(
        &graph,
        &od_pairs(cfg.gen_nodes, true),
        RoutingOptions {
            access_links: cfg.access_links,
        },
    )?;
    let dir = cfg.path(&cfg.gen_dir);
    create_dir(&dir)?;
    write_trace_csv(dir.join("traffic.csv"), x.values())?;
    write_dense_csv(dir.join("routing.csv"), a.entries())?;
    let edges: String = graph.edges().iter().map(|(u, v, w)| format!("{u},{v},{w}\n")).collect();
    write_text(&dir.join("topology.csv"), &format!("# u,v,weight\n{edges}"))?;
    write_manifest(
        &dir,
        "gen",
        cfg,
        json!({ "flows": x.flow_count(), "slots": x.time_count(), "links": a.link_count() }),
    )?;
    Ok(GenOutcome {
        dir,
        flows: x.flow_count(),
        links: a.link_count(),
    })
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub dir: PathBuf,
    pub dataset: Dataset,
}

/// Reads a trace, splits it in time, fits normalization on the training part
/// and draws the training observation mask.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestOutcome> {
    let input = cfg.path(require(&cfg.input, "input")?);
    let (x, valid) = read_layout(&input, cfg.layout)?;
    let total = x.time_count();
    if cfg.train_len >= total {
        return Err(Error::Validation(format!(
            "train_len = {} leaves no test slots in a trace of {total}",
            cfg.train_len
        )));
    }
    let test_len = if cfg.test_len == 0 { total - cfg.train_len } else { cfg.test_len };
    let (train_raw, test_raw) = train_test_split(&x, cfg.train_len, test_len)?;
    let train_valid = valid.time_slice(0, cfg.train_len)?;
    let test_valid = valid.time_slice(cfg.train_len, test_len)?;

    let normalization = fit_normalization(&train_raw)?;
    let sampled = build_random_mask(train_raw.shape(), cfg.train_mask_rate, cfg.mask_seed)?;
    let dataset = Dataset {
        train: apply_normalization(&train_raw, &normalization)?,
        train_mask: train_valid.and(&sampled)?,
        test: apply_normalization(&test_raw, &normalization)?,
        test_valid,
        normalization,
    };
    let dir = cfg.path(&cfg.dataset);
    dataset.save(&dir)?;
    write_manifest(
        &dir,
        "ingest",
        cfg,
        json!({
            "flows": x.flow_count(),
            "train_slots": cfg.train_len,
            "test_slots": test_len,
            "train_observed": dataset.train_mask.observed_count(),
            "clip_value": normalization.clip_value,
            "scale": normalization.scale,
        }),
    )?;
    Ok(IngestOutcome { dir, dataset })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    /// Mean loss of the last completed denoiser epoch.
    pub final_loss: Option<f64>,
    pub resumed_from_epoch: Option<usize>,
}

fn loss_rows(stage: &str, trace: &LossTrace) -> String {
    let mut out = String::new();
    let mut iter = 0;
    for (k, (&loss, &epoch)) in trace.losses.iter().zip(&trace.epochs).enumerate() {
        if k > 0 && trace.epochs[k - 1] != epoch {
            iter = 0;
        }
        out.push_str(&format!("{stage},{epoch},{iter},{loss}\n"));
        iter += 1;
    }
    out
}

/// Keeps the header, the autoencoder rows and denoiser rows before `epoch`.
fn truncate_loss_file(path: &Path, epoch: usize) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: String = text
        .lines()
        .filter(|line| {
            let mut parts = line.split(',');
            match (parts.next(), parts.next().and_then(|e| e.parse::<usize>().ok())) {
                (Some("diff"), Some(e)) => e < epoch,
                _ => true,
            }
        })
        .map(|l| format!("{l}\n"))
        .collect();
    write_text(path, &kept)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Autoencoder imputation followed by denoiser training, checkpointing after
/// every epoch. A numeric failure leaves the last good checkpoint in place.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = Dataset::load(&cfg.path(&cfg.dataset))?;
    let tc = cfg.train_config();
    let model_cfg = cfg.denoiser_config(ds.train.flow_count());
    let schedule = NoiseSchedule::cosine(cfg.diffusion_steps)?;
    let dir = cfg.path(&cfg.model_dir);
    create_dir(&dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let loss_path = dir.join(LOSS_FILE);
    let metadata: std::collections::BTreeMap<String, String> =
        cfg.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)).collect();

    let resume = cfg.resume && ck_path.exists();
    let (pre, mut trainer, resumed_from_epoch) = if resume {
        let ck = Checkpoint::load_expecting(&ck_path, &model_cfg)?;
        if ck.train_config.as_ref() != Some(&tc) {
            return Err(Error::Checkpoint(format!(
                "{}: stored training settings differ from the current ones",
                ck_path.display()
            )));
        }
        let (Some(pre), Some(state)) = (ck.preprocessor, ck.optim) else {
            return Err(Error::Checkpoint(format!("{}: no optimizer state to resume from", ck_path.display())));
        };
        truncate_loss_file(&loss_path, state.epoch)?;
        let epoch = state.epoch;
        eprintln!("resuming at epoch {epoch}");
        (pre, DenoiserTrainer::from_parts(ck.denoiser, state), Some(epoch))
    } else {
        let pre_set = TrainingSet::from_series(&ds.train, &ds.train_mask, cfg.window_len, cfg.train_stride)?;
        let (pre, trace) = train_preprocessor(&pre_set, &tc)?;
        write_text(&loss_path, &format!("stage,epoch,iter,loss\n{}", loss_rows("pre", &trace)))?;
        let trainer = DenoiserTrainer::new(Denoiser::new(model_cfg.clone(), tc.seed)?, &tc);
        (pre, trainer, None)
    };

    let imputed = impute_dataset(&pre, &ds.train, &ds.train_mask)?;
    let set = TrainingSet::from_series(&imputed, &ds.train_mask, cfg.window_len, cfg.train_stride)?;
    let snapshot = |t: &DenoiserTrainer| -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(t.model.clone(), schedule.clone())?;
        ck.normalization = Some(ds.normalization);
        ck.train_config = Some(tc.clone());
        ck.optim = Some(t.state.clone());
        ck.preprocessor = Some(pre.clone());
        ck.metadata = metadata.clone();
        Ok(ck)
    };
    if !resume {
        snapshot(&trainer)?.save(&ck_path)?;
    }

    let mut final_loss = None;
    let until = match cfg.epoch_budget {
        0 => tc.epochs_diff,
        b => trainer.state.epoch + b,
    };
    let result = trainer.train_until(&set, &tc, &schedule, until, &mut |t, epoch, losses| {
        let trace = LossTrace {
            losses: losses.to_vec(),
            epochs: vec![epoch; losses.len()],
        };
        append(&loss_path, &loss_rows("diff", &trace))?;
        snapshot(t)?.save(&ck_path)?;
        if !losses.is_empty() {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            final_loss = Some(mean);
            eprintln!("epoch {}/{} loss {mean:.6}", epoch + 1, tc.epochs_diff);
        }
        Ok(())
    });
    if let Err(e) = result {
        return Err(match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg}; last good checkpoint kept at {}", ck_path.display())),
            other => other,
        });
    }
    write_manifest(
        &dir,
        "train",
        cfg,
        json!({
            "checkpoint": CHECKPOINT_FILE,
            "loss_curve": LOSS_FILE,
            "epochs": trainer.state.epoch,
            "iterations": trainer.state.iter,
            "training_windows": set.len(),
            "final_loss": final_loss,
            "resumed_from_epoch": resumed_from_epoch,
        }),
    )?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        epochs: trainer.state.epoch,
        final_loss,
        resumed_from_epoch,
    })
}

// ---------------------------------------------------------------- sampling commands

struct Loaded {
    ck: Checkpoint,
    norm: NormalizationParams,
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let path = cfg.path(&cfg.model_dir).join(CHECKPOINT_FILE);
    let ck = Checkpoint::load(&path)?;
    let Some(norm) = ck.normalization else {
        return Err(Error::Checkpoint(format!("{}: no normalization parameters", path.display())));
    };
    if ck.denoiser.config().window_len != cfg.window_len {
        return Err(Error::Validation(format!(
            "window_len = {} but the checkpoint model uses {}",
            cfg.window_len,
            ck.denoiser.config().window_len
        )));
    }
    Ok(Loaded { ck, norm })
}

fn out_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.path(&cfg.out_dir).join(command);
    create_dir(&dir)?;
    Ok(dir)
}

fn windows_of(x: &Array2<f64>, origins: &[usize], w: usize) -> Vec<Array2<f64>> {
    origins.iter().map(|&o| x.slice(s![.., o..o + w]).to_owned()).collect()
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Validation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Errors of `est` against `truth`, skipping entries set in `excluded`.
fn error_report(
    truth: &TrafficTensor,
    est: &TrafficTensor,
    excluded: Option<&ObservationMask>,
    observed_entries: usize,
    tre_group: usize,
) -> Result<(MetricReport, Vec<Option<f64>>)> {
    let scope = match excluded {
        Some(m) => Scope::Unobserved(m),
        None => Scope::All,
    };
    let total = truth.flow_count() * truth.time_count();
    let evaluated = total - excluded.map_or(0, |m| m.observed_count());
    let (e, t) = (est.values(), truth.values());
    let report = MetricReport {
        nmae: optional(nmae(t, e, scope))?,
        nrmse: optional(nrmse(t, e, scope))?,
        tre: tre(t, e)?,
        mmd2: None,
        observed_entries,
        evaluated_entries: evaluated,
    };
    let grouped = aggregate_tre(&report.tre, tre_group)?;
    Ok((report, grouped))
}

fn write_reports(dir: &Path, report: &MetricReport, tre_grouped: &[Option<f64>], group: usize) -> Result<()> {
    write_text(&dir.join("report.txt"), &report.to_key_values())?;
    write_text(&dir.join("report.csv"), &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()))?;
    let rows: String = tre_grouped
        .iter()
        .enumerate()
        .map(|(k, v)| format!("{},{}\n", k * group, v.map_or("NA".to_string(), |v| v.to_string())))
        .collect();
    write_text(&dir.join("tre.csv"), &format!("slot,tre\n{rows}"))?;
    write_text(&dir.join("tre.svg"), &line_chart_svg(tre_grouped, "Temporal relative error", "TRE"))
}

fn report_json(r: &MetricReport) -> Value {
    json!({
        "nmae": r.nmae,
        "nrmse": r.nrmse,
        "tre_mean": r.tre_mean(),
        "observed_entries": r.observed_entries,
        "evaluated_entries": r.evaluated_entries,
    })
}

fn trace_json(out: &SampleOutput) -> Value {
    Value::Array(
        out.trace
            .iter()
            .map(|r| json!({ "t": r.t, "link": r.link, "flow": r.flow }))
            .collect(),
    )
}

fn resolve_routing(cfg: &RunConfig, flow_count: usize) -> Result<RoutingMatrix> {
    let a = if !cfg.routing.is_empty() {
        read_routing_csv(cfg.path(&cfg.routing))?
    } else if !cfg.topology.is_empty() {
        let graph = NetworkGraph::read_edge_list(cfg.path(&cfg.topology))?;
        let k = graph.node_count();
        let flows = if k * k == flow_count {
            od_pairs(k, true)
        } else if k * (k - 1) == flow_count {
            od_pairs(k, false)
        } else {
            return Err(Error::Shape(format!(
                "topology with {k} nodes cannot carry {flow_count} flows (expected {} or {})",
                k * k,
                k * (k - 1)
            )));
        };
        shortest_path_routing(
            &graph,
            &flows,
            RoutingOptions {
                access_links: cfg.access_links,
            },
        )?
    } else {
        return Err(Error::Validation("link loads need `routing` or `topology`".into()));
    };
    if a.flow_count() != flow_count {
        return Err(Error::Shape(format!(
            "routing matrix covers {} flows but the model has {flow_count}",
            a.flow_count()
        )));
    }
    Ok(a)
}

/// Normalized link loads over `slots` time slots: simulated from `truth`, or
/// read from `link_loads` and divided by the traffic scale.
fn resolve_loads(
    cfg: &RunConfig,
    a: &RoutingMatrix,
    truth: Option<&TrafficTensor>,
    slots: usize,
    norm: &NormalizationParams,
) -> Result<Array2<f64>> {
    if cfg.simulate {
        let Some(x) = truth else {
            return Err(Error::Validation("simulated link loads need the test split as ground truth".into()));
        };
        return Ok(link_loads(a, x, cfg.link_noise, cfg.seed)?.values);
    }
    let path = cfg.path(require(&cfg.link_loads, "link_loads")?);
    let y = read_link_loads_csv(&path)?;
    if y.link_count() != a.link_count() {
        return Err(Error::Shape(format!(
            "{}: {} links, routing matrix has {}",
            path.display(),
            y.link_count(),
            a.link_count()
        )));
    }
    if y.time_count() < slots {
        return Err(Error::Shape(format!(
            "{}: {} time slots, {slots} needed",
            path.display(),
            y.time_count()
        )));
    }
    Ok(y.values.slice(s![.., ..slots]).mapv(|v| v / norm.scale))
}

fn write_estimate(dir: &Path, est: &TrafficTensor, norm: &NormalizationParams) -> Result<()> {
    write_trace_csv(dir.join("estimate.csv"), denormalize(est, norm).values())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub dir: PathBuf,
    /// Normalized windows.
    pub windows: Vec<Array2<f64>>,
    pub mmd2: Option<f64>,
    /// MMD between the held-out windows and uniform noise of the same size.
    pub mmd2_uniform: Option<f64>,
}

/// Unconditional samples, denormalized, with an MMD check against held-out windows.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutcome> {
    if cfg.synth_count == 0 {
        return Err(Error::Validation("synth_count must be positive".into()));
    }
    let Loaded { ck, norm } = load_model(cfg)?;
    let gcfg = cfg.guidance_config()?;
    let out = sample_unconditional(&ck.denoiser, &ck.schedule, cfg.synth_count, &gcfg)?;
    let raw: Vec<Array2<f64>> = out.windows.iter().map(|x| x * norm.scale).collect();
    if let Some(bad) = raw.iter().flatten().find(|v| !(**v >= 0.0 && **v <= norm.scale)) {
        return Err(Error::Numeric(format!("sample value {bad} outside [0, {}]", norm.scale)));
    }
    let dir = out_dir(cfg, "synth")?;
    let views: Vec<_> = raw.iter().map(|x| x.view()).collect();
    write_trace_csv(dir.join("synth.csv"), &concatenate(Axis(1), &views).expect("equal window shapes"))?;

    let ds_dir = cfg.path(&cfg.dataset);
    let real = if ds_dir.join("test.csv").exists() {
        let ds = Dataset::load(&ds_dir)?;
        make_windows(&ds.test, cfg.window_len, cfg.window_len)?.windows
    } else {
        Vec::new()
    };
    export_flat_samples(&real, &out.windows, dir.join("flat_samples.csv"))?;
    let (mut score, mut uniform) = (None, None);
    if real.len() >= 2 && out.windows.len() >= 2 {
        let xs = flatten_windows(&real)?;
        let ys = flatten_windows(&out.windows)?;
        score = Some(mmd2(&xs, &ys, KernelConfig::Median)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let noise = Array2::from_shape_simple_fn(ys.dim(), || rng.random::<f64>());
        uniform = Some(mmd2(&xs, &noise, KernelConfig::Median)?);
    }
    write_manifest(
        &dir,
        "synth",
        cfg,
        json!({
            "windows": out.windows.len(),
            "denoiser_calls": out.denoiser_calls,
            "real_windows": real.len(),
            "mmd2": score,
            "mmd2_uniform": uniform,
        }),
    )?;
    Ok(SynthOutcome {
        dir,
        windows: out.windows,
        mmd2: score,
        mmd2_uniform: uniform,
    })
}

// ---------------------------------------------------------------- tomo

#[derive(Debug, Clone)]
pub struct TomoOutcome {
    pub dir: PathBuf,
    /// Normalized estimate.
    pub estimate: TrafficTensor,
    /// `‖Y − A·X̂‖ / ‖Y‖` in normalized units.
    pub link_residual: f64,
    pub report: Option<MetricReport>,
}

/// Guidance for tomography; `rho = 0` turns every correction off.
fn tomo_guidance(cfg: &RunConfig) -> Result<GuidanceConfig> {
    let mut g = cfg.guidance_config()?;
    if g.rho_mode == RhoMode::Fixed && g.rho_fixed == 0.0 {
        g.em_iters = 0;
        g.replacement = false;
    }
    Ok(g)
}

fn relative_residual(a: &RoutingMatrix, y: &Array2<f64>, x: &Array2<f64>) -> f64 {
    let r = y - &a.entries().dot(x);
    let den = y.mapv(|v| v * v).sum().sqrt();
    let num = r.mapv(|v| v * v).sum().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Flow estimates from link loads.
pub fn cmd_tomo(cfg: &RunConfig) -> Result<TomoOutcome> {
    let Loaded { ck, norm } = load_model(cfg)?;
    let n = ck.denoiser.config().flow_count;
    let w = cfg.window_len;
    let ds_dir = cfg.path(&cfg.dataset);
    let truth = if ds_dir.join("test.csv").exists() {
        Some(Dataset::load(&ds_dir)?.test_prefix(cfg.eval_slots)?)
    } else {
        None
    };
    if let Some((t, _)) = &truth {
        if t.flow_count() != n {
            return Err(Error::Shape(format!("test data has {} flows, model {n}", t.flow_count())));
        }
    }
    let a = resolve_routing(cfg, n)?;
    let slots = match (&truth, cfg.eval_slots) {
        (Some((t, _)), _) => t.time_count(),
        (None, 0) => read_link_loads_csv(cfg.path(require(&cfg.link_loads, "link_loads")?))?.time_count(),
        (None, s) => s,
    };
    let y = resolve_loads(cfg, &a, truth.as_ref().map(|(t, _)| t), slots, &norm)?;
    let origins = covering_origins(slots, w)?;
    let links = LinkObservations {
        routing: a.clone(),
        loads: windows_of(&y, &origins, w),
    };
    let out = sample_tomography(&ck.denoiser, &ck.schedule, links, &tomo_guidance(cfg)?)?;
    let estimate = assemble_series(&out.windows, &origins)?;
    let link_residual = relative_residual(&a, &y, estimate.values());

    let dir = out_dir(cfg, "tomo")?;
    write_estimate(&dir, &estimate, &norm)?;
    let report = match &truth {
        Some((t, valid)) => {
            let invalid = valid.complement();
            let excluded = (invalid.observed_count() > 0).then_some(&invalid);
            let (report, grouped) = error_report(t, &estimate, excluded, 0, cfg.tre_group)?;
            write_reports(&dir, &report, &grouped, cfg.tre_group)?;
            Some(report)
        }
        None => None,
    };
    write_manifest(
        &dir,
        "tomo",
        cfg,
        json!({
            "windows": origins.len(),
            "links": a.link_count(),
            "denoiser_calls": out.denoiser_calls,
            "link_residual": link_residual,
            "metrics": report.as_ref().map(report_json),
            "residual_trace": trace_json(&out),
        }),
    )?;
    Ok(TomoOutcome {
        dir,
        estimate,
        link_residual,
        report,
    })
}

// ---------------------------------------------------------------- complete

#[derive(Debug, Clone)]
pub struct CompleteOutcome {
    pub dir: PathBuf,
    /// Normalized estimate.
    pub estimate: TrafficTensor,
    pub observed: ObservationMask,
    pub report: MetricReport,
    /// Interpolation baseline on the same entries.
    pub baseline: MetricReport,
}

/// Missing test entries from the observed ones (and optionally link loads).
pub fn cmd_complete(cfg: &RunConfig) -> Result<CompleteOutcome> {
    let Loaded { ck, norm } = load_model(cfg)?;
    let n = ck.denoiser.config().flow_count;
    let w = cfg.window_len;
    let ds = Dataset::load(&cfg.path(&cfg.dataset))?;
    let (truth, valid) = ds.test_prefix(cfg.eval_slots)?;
    if truth.flow_count() != n {
        return Err(Error::Shape(format!("test data has {} flows, model {n}", truth.flow_count())));
    }
    let sampled = if cfg.mask.is_empty() {
        build_random_mask(truth.shape(), cfg.test_mask_rate, cfg.mask_seed)?
    } else {
        let m = read_mask_csv(cfg.path(&cfg.mask))?;
        let (rows, cols) = m.shape();
        if rows != n || cols < truth.time_count() {
            return Err(Error::Shape(format!(
                "mask is {rows}×{cols}, test data is {}×{}",
                n,
                truth.time_count()
            )));
        }
        m.time_slice(0, truth.time_count())?
    };
    let observed = sampled.and(&valid)?;
    if observed.observed_count() == 0 {
        return Err(Error::Validation("the observation mask is empty: nothing to complete from".into()));
    }
    let known = TrafficTensor::new(truth.values() * observed.bits())?;
    let slots = truth.time_count();
    let origins = covering_origins(slots, w)?;
    let flows = FlowObservations {
        known: windows_of(known.values(), &origins, w),
        masks: windows_of(observed.bits(), &origins, w),
    };
    let links = if cfg.use_links {
        let a = resolve_routing(cfg, n)?;
        let y = resolve_loads(cfg, &a, Some(&truth), slots, &norm)?;
        Some(LinkObservations {
            loads: windows_of(&y, &origins, w),
            routing: a,
        })
    } else {
        None
    };
    let out = sample_completion(&ck.denoiser, &ck.schedule, flows, links, &cfg.guidance_config()?)?;
    let assembled = assemble_series(&out.windows, &origins)?;
    let estimate = TrafficTensor::new(ndarray::Zip::from(assembled.values()).and(known.values()).and(observed.bits()).map_collect(
        |&e, &k, &b| if b == 1.0 { k } else { e },
    ))?;

    let excluded = mask_or(&observed, &valid.complement())?;
    let (report, grouped) = error_report(&truth, &estimate, Some(&excluded), observed.observed_count(), cfg.tre_group)?;
    let base_est = baseline_interpolate(&known, &observed)?;
    let (baseline, _) = error_report(&truth, &base_est, Some(&excluded), observed.observed_count(), cfg.tre_group)?;

    let dir = out_dir(cfg, "complete")?;
    write_estimate(&dir, &estimate, &norm)?;
    write_mask_csv(dir.join("observed_mask.csv"), &observed)?;
    write_reports(&dir, &report, &grouped, cfg.tre_group)?;
    write_text(&dir.join("baseline_report.txt"), &baseline.to_key_values())?;
    write_manifest(
        &dir,
        "complete",
        cfg,
        json!({
            "windows": origins.len(),
            "denoiser_calls": out.denoiser_calls,
            "metrics": report_json(&report),
            "baseline": report_json(&baseline),
            "residual_trace": trace_json(&out),
        }),
    )?;
    Ok(CompleteOutcome {
        dir,
        estimate,
        observed,
        report,
        baseline,
    })
}

// ---------------------------------------------------------------- eval

/// Metrics for an arbitrary estimate against a ground-truth trace.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let (truth, valid) = read_layout(&cfg.path(require(&cfg.truth, "truth")?), cfg.layout)?;
    let (est, _) = read_layout(&cfg.path(require(&cfg.estimate, "estimate")?), cfg.layout)?;
    if truth.shape() != est.shape() {
        return Err(Error::Shape(format!("truth is {:?}, estimate is {:?}", truth.shape(), est.shape())));
    }
    let mask = match (cfg.scope, cfg.mask.is_empty()) {
        (EvalScope::All, _) | (EvalScope::Auto, true) => None,
        (EvalScope::Unobserved, true) => {
            return Err(Error::Validation("scope = unobserved needs a `mask`".into()));
        }
        (_, false) => {
            let m = read_mask_csv(cfg.path(&cfg.mask))?;
            if m.shape() != truth.shape() {
                return Err(Error::Shape(format!("mask is {:?}, data is {:?}", m.shape(), truth.shape())));
            }
            Some(m)
        }
    };
    let invalid = valid.complement();
    let excluded = match &mask {
        Some(m) => Some(mask_or(m, &invalid)?),
        None => (invalid.observed_count() > 0).then_some(invalid),
    };
    let observed = mask.as_ref().map_or(0, |m| m.observed_count());
    let (report, grouped) = error_report(&truth, &est, excluded.as_ref(), observed, cfg.tre_group)?;
    let dir = out_dir(cfg, "eval")?;
    write_reports(&dir, &report, &grouped, cfg.tre_group)?;
    write_manifest(&dir, "eval", cfg, json!({ "metrics": report_json(&report) }))?;
    Ok(report)
}
