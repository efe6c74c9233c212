use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use scaar_core::assess::{class_vs_rest, tvla};
use scaar_core::attribution::{default_layer, grad_cam, peak_window, AttributionError};
use scaar_core::leaksim::simulate_llm;
use scaar_core::nnet::{argmax, load_checkpoint, save_checkpoint, Checkpoint, Model, NnetError};
use scaar_core::pipeline::{
    self, attack, run_repeated, score, split_raw, sweep_csv, sweep_shift, sweep_traces, AttackInput, AttackReport,
    AttributeMode, ExperimentConfig, PreprocessConfig, Sweep,
};
use scaar_core::rng;
use scaar_core::trace::{read_scar, write_scar, Label, Trace, TraceSet};

use crate::failure::{from_pipeline, Classify, CliResult, Failure, Kind};
use crate::manifest::{sha256_hex, Recorder};
use crate::{Axis, Cli, Command, Global};

/// Settings a trained model needs at attack time, stored in its
/// checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelNotes {
    preprocess: PreprocessConfig,
    mode: AttributeMode,
    raw_len: usize,
    n_profiling: usize,
    seed: u64,
    config_digest: String,
}

struct Loaded {
    cfg: ExperimentConfig,
    path: Option<PathBuf>,
    /// Digest of the file bytes, or of the default config.
    file_digest: String,
}

pub fn run(cli: Cli) -> CliResult<()> {
    setup_threads(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Simulate { config, out, session } => simulate(g, config, &out, session),
        Command::Profile {
            config,
            data,
            model_out,
            attack_out,
        } => {
            let attack_out = attack_out.unwrap_or_else(|| with_suffix(&model_out, ".attack.scar"));
            profile(g, config, &data, &model_out, &attack_out)
        }
        Command::Attack { model, data, out } => cmd_attack(g, &model, &data, &out),
        Command::Run { config, out } => cmd_run(g, config, &out),
        Command::Tvla {
            data,
            group,
            threshold,
            truncate,
            out,
        } => cmd_tvla(g, &data, &group, threshold, truncate, &out),
        Command::Gradcam {
            model,
            data,
            out,
            index,
            class,
            layer,
            fraction,
        } => cmd_gradcam(&model, &data, &out, index, class, layer, fraction),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => cmd_sweep(g, config, axis, values, &out),
        Command::Llm {
            config,
            tokens,
            repeats,
            out,
        } => cmd_llm(g, config, &tokens, repeats, &out),
    }
}

fn setup_threads(g: &Global) -> CliResult<()> {
    let n = if g.deterministic { Some(1) } else { g.threads };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::msg(Kind::Usage, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .kind(Kind::Runtime)?;
    }
    Ok(())
}

/// Seed precedence: flag, then `SCAAR_SEED`, then the config.
fn resolve_seed(flag: Option<u64>, config_seed: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("SCAAR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .kind_with(Kind::Config, || format!("SCAAR_SEED={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(config_seed),
        Err(e) => Err(Failure::new(Kind::Config, e)),
    }
}

fn load_config(path: Option<PathBuf>, g: &Global) -> CliResult<Loaded> {
    let (mut cfg, file_digest) = match &path {
        Some(p) => {
            let bytes = fs::read(p).kind_with(Kind::Config, || format!("reading config {}", p.display()))?;
            let cfg: ExperimentConfig =
                serde_json::from_slice(&bytes).kind_with(Kind::Config, || format!("parsing config {}", p.display()))?;
            (cfg, sha256_hex(&bytes))
        }
        None => {
            let cfg = ExperimentConfig::default();
            let d = sha256_hex(&serde_json::to_vec(&cfg).expect("config serializes"));
            (cfg, d)
        }
    };
    cfg.seed = resolve_seed(g.seed, cfg.seed)?;
    cfg.check().map_err(from_pipeline)?;
    Ok(Loaded { cfg, path, file_digest })
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut name = p.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    p.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, s + "\n").kind_with(Kind::Runtime, || format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).kind_with(Kind::Runtime, || format!("writing {}", path.display()))
}

fn read_data(path: &Path) -> CliResult<TraceSet> {
    read_scar(path).kind_with(Kind::Data, || format!("reading traces {}", path.display()))
}

fn save_data(set: &TraceSet, path: &Path) -> CliResult<u64> {
    write_scar(set, path).kind_with(Kind::Runtime, || format!("writing traces {}", path.display()))
}

fn simulate(g: &Global, config: Option<PathBuf>, out: &Path, session: u64) -> CliResult<()> {
    let l = load_config(config, g)?;
    let rec = Recorder::start("simulate", l.path.as_deref(), l.file_digest.clone(), l.cfg.seed);
    let set = pipeline::generate(&l.cfg, session)
        .map_err(from_pipeline)?
        .with_meta("config_digest", l.cfg.digest());
    let bytes = save_data(&set, out)?;
    println!(
        "wrote {} traces of {} samples ({bytes} bytes) to {}",
        set.len(),
        set.fixed_len().unwrap_or(0),
        out.display()
    );
    rec.finish(&[out])?;
    Ok(())
}

fn profile(g: &Global, config: Option<PathBuf>, data: &Path, model_out: &Path, attack_out: &Path) -> CliResult<()> {
    let mut l = load_config(config, g)?;
    let rec = Recorder::start("profile", l.path.as_deref(), l.file_digest.clone(), l.cfg.seed);
    let set = read_data(data)?;
    let raw_len = set
        .fixed_len()
        .ok_or_else(|| Failure::msg(Kind::Data, "profiling needs fixed-length traces"))?;
    l.cfg.victim.n_classes = set.n_classes();
    let (prof, att) = split_raw(&l.cfg, &set).map_err(from_pipeline)?;
    let prepared = l.cfg.preprocess.apply(&prof).kind(Kind::Data)?;
    let (model, report) = pipeline::profile(&l.cfg, &prepared).map_err(from_pipeline)?;
    let notes = ModelNotes {
        preprocess: l.cfg.preprocess,
        mode: l.cfg.mode,
        raw_len,
        n_profiling: prof.len(),
        seed: l.cfg.seed,
        config_digest: l.cfg.digest(),
    };
    let ck = Checkpoint {
        model,
        epoch: report.epochs,
        extra: serde_json::to_value(&notes).expect("notes serialize"),
    };
    save_checkpoint(&ck, model_out).kind_with(Kind::Runtime, || format!("writing model {}", model_out.display()))?;
    save_data(&att, attack_out)?;
    println!(
        "trained on {} traces for {} epochs, final loss {:.4}; model {}, attack split ({} traces) {}",
        prof.len(),
        report.epochs,
        report.loss_history.last().copied().unwrap_or(f64::NAN),
        model_out.display(),
        att.len(),
        attack_out.display()
    );
    rec.finish(&[model_out, attack_out])?;
    Ok(())
}

/// Loads a model and a trace set and preprocesses the traces the way the
/// model was trained.
fn load_model_and_data(model: &Path, data: &Path) -> CliResult<(Model<f32>, ModelNotes, TraceSet)> {
    let ck = load_checkpoint(model).kind_with(Kind::Data, || format!("reading model {}", model.display()))?;
    let notes: ModelNotes = serde_json::from_value(ck.extra).kind_with(Kind::Data, || {
        format!("model {} lacks preprocessing notes", model.display())
    })?;
    let set = read_data(data)?;
    let len = set
        .fixed_len()
        .ok_or_else(|| Failure::msg(Kind::Data, "attack traces must be fixed-length"))?;
    if len != notes.raw_len {
        return Err(Failure::msg(
            Kind::Data,
            format!(
                "trace length mismatch: data traces have {len} samples, model expects {}",
                notes.raw_len
            ),
        ));
    }
    if let Some(t) = set.traces().iter().find(|t| t.label as usize >= ck.model.n_classes()) {
        return Err(Failure::msg(
            Kind::Data,
            format!(
                "label {} out of range for a {}-class model",
                t.label,
                ck.model.n_classes()
            ),
        ));
    }
    let set = notes.preprocess.apply(&set).kind(Kind::Data)?;
    let got = set.fixed_len().unwrap_or(0);
    if got != ck.model.input_len() {
        return Err(Failure::msg(
            Kind::Data,
            format!(
                "preprocessed trace length {got} does not match model input length {}",
                ck.model.input_len()
            ),
        ));
    }
    Ok((ck.model, notes, set))
}

fn cmd_attack(g: &Global, model_path: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let (model, notes, set) = load_model_and_data(model_path, data)?;
    let rec = Recorder::start(
        "attack",
        None,
        notes.config_digest.clone(),
        g.seed.unwrap_or(notes.seed),
    );
    let pred = attack(&model, &AttackInput::unlabeled(&set)).map_err(from_pipeline)?;
    let (accuracy, confusion) = score(&pred, &set.labels(), model.n_classes());
    let report = AttackReport {
        mode: notes.mode,
        accuracy,
        confusion,
        n_profiling: notes.n_profiling,
        n_attack: set.len(),
        seed: notes.seed,
        config_digest: notes.config_digest,
    };
    write_json(out, &report)?;
    println!("accuracy {:.4} on {} traces", accuracy, set.len());
    rec.finish(&[out])?;
    Ok(())
}

fn cmd_run(g: &Global, config: Option<PathBuf>, out: &Path) -> CliResult<()> {
    let l = load_config(config, g)?;
    let rec = Recorder::start("run", l.path.as_deref(), l.file_digest.clone(), l.cfg.seed);
    let summary = run_repeated(&l.cfg).map_err(from_pipeline)?;
    write_json(out, &summary)?;
    println!(
        "accuracy {:.4} +- {:.4} over {} seeds",
        summary.mean_accuracy,
        summary.std_accuracy,
        summary.reports.len()
    );
    rec.finish(&[out])?;
    Ok(())
}

enum Grouping {
    ClassVsRest(Label),
    ClassVsClass(Label, Label),
    Halves,
}

fn parse_group(s: &str) -> CliResult<Grouping> {
    let class = |t: &str| -> Option<Label> { t.strip_prefix("class")?.parse().ok() };
    let bad = || {
        Failure::msg(
            Kind::Usage,
            format!("unknown grouping {s:?}; expected class<K>-vs-rest, class<K>-vs-class<J> or halves"),
        )
    };
    if s == "halves" {
        return Ok(Grouping::Halves);
    }
    let (a, b) = s.split_once("-vs-").ok_or_else(bad)?;
    let a = class(a).ok_or_else(bad)?;
    match b {
        "rest" => Ok(Grouping::ClassVsRest(a)),
        _ => Ok(Grouping::ClassVsClass(a, class(b).ok_or_else(bad)?)),
    }
}

fn cmd_tvla(g: &Global, data: &Path, group: &str, threshold: f64, truncate: bool, out: &Path) -> CliResult<()> {
    let grouping = parse_group(group)?;
    let seed = resolve_seed(g.seed, 0)?;
    let rec = Recorder::start("tvla", None, sha256_hex(group.as_bytes()), seed);
    let mut set = read_data(data)?;
    if truncate {
        let min = set.traces().iter().map(Trace::len).min().unwrap_or(0);
        let traces = set
            .traces()
            .iter()
            .map(|t| t.with_samples(t.samples[..min].to_vec()))
            .collect();
        set = TraceSet::new(traces, set.n_classes());
    } else if set.fixed_len().is_none() {
        return Err(Failure::msg(Kind::Data, "variable-length traces; pass --truncate"));
    }
    let pick = |c: Label| -> Vec<usize> { (0..set.len()).filter(|&i| set.traces()[i].label == c).collect() };
    let (a, b) = match grouping {
        Grouping::ClassVsRest(c) => class_vs_rest(&set, c, seed).kind(Kind::Data)?,
        Grouping::ClassVsClass(x, y) => (set.subset(&pick(x)), set.subset(&pick(y))),
        Grouping::Halves => {
            let even: Vec<usize> = (0..set.len()).step_by(2).collect();
            let odd: Vec<usize> = (1..set.len()).step_by(2).collect();
            (set.subset(&even), set.subset(&odd))
        }
    };
    let report = tvla(&a, &b, threshold).kind(Kind::Data)?;
    let csv = out.with_extension("csv");
    write_json(out, &report)?;
    write_text(&csv, &report.to_csv())?;
    println!(
        "max |t| {:.2} at {}; {} window(s) above {threshold}",
        report.max_abs_t(),
        report.argmax_abs_t(),
        report.windows.len()
    );
    rec.finish(&[out, &csv])?;
    Ok(())
}

fn cmd_gradcam(
    model_path: &Path,
    data: &Path,
    out: &Path,
    index: usize,
    class: Option<usize>,
    layer: Option<usize>,
    fraction: f64,
) -> CliResult<()> {
    let (model, notes, set) = load_model_and_data(model_path, data)?;
    let rec = Recorder::start("gradcam", None, notes.config_digest.clone(), notes.seed);
    let trace = set.get(index).ok_or_else(|| {
        Failure::msg(
            Kind::Usage,
            format!("trace index {index} out of range ({} traces)", set.len()),
        )
    })?;
    let predicted = argmax(&model.forward(&trace.samples).kind(Kind::Data)?);
    let class = class.unwrap_or(predicted);
    let layer = layer.unwrap_or_else(|| default_layer(&model));
    let map = grad_cam(&model, &trace.samples, class, layer).map_err(|e| match e {
        AttributionError::Model(NnetError::NoSuchLayer(_) | NnetError::LabelOutOfRange { .. }) => {
            Failure::new(Kind::Usage, e)
        }
        e => Failure::new(Kind::Runtime, e),
    })?;
    let window = if map.all_zero {
        None
    } else {
        Some(peak_window(&map, fraction).kind(Kind::Usage)?)
    };
    let raw_window = window.map(|(s, e)| {
        let r = notes.preprocess.conditioning.to_raw_range(s..e);
        (r.start, r.end)
    });
    let summary_path = out.with_extension("json");
    write_text(out, &map.to_csv())?;
    write_json(
        &summary_path,
        &json!({
            "index": index,
            "label": trace.label,
            "predicted": predicted,
            "class": class,
            "layer": layer,
            "all_zero": map.all_zero,
            "fraction": fraction,
            "peak_window": window,
            "peak_window_raw": raw_window,
        }),
    )?;
    match window {
        Some((s, e)) => println!("class {class}: {:.0}% of relevance in [{s}, {e})", fraction * 100.0),
        None => println!("class {class}: relevance map is all zero"),
    }
    rec.finish(&[out, &summary_path])?;
    Ok(())
}

fn cmd_sweep(g: &Global, config: Option<PathBuf>, axis: Axis, values: Option<Vec<f64>>, out: &Path) -> CliResult<()> {
    let l = load_config(config, g)?;
    let rec = Recorder::start("sweep", l.path.as_deref(), l.file_digest.clone(), l.cfg.seed);
    let values = match (values, &l.cfg.sweep, axis) {
        (Some(v), _, _) => v,
        (None, Some(Sweep::NTraces(n)), Axis::NTraces) => n.iter().map(|&n| n as f64).collect(),
        (None, Some(Sweep::ShiftRatio(r)), Axis::ShiftRatio) => r.clone(),
        _ => {
            return Err(Failure::msg(
                Kind::Config,
                "no sweep values for this axis; pass --values",
            ))
        }
    };
    let (name, points) = match axis {
        Axis::NTraces => {
            if let Some(v) = values.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
                return Err(Failure::msg(
                    Kind::Usage,
                    format!("trace count {v} is not a whole number"),
                ));
            }
            let n: Vec<usize> = values.iter().map(|&v| v as usize).collect();
            ("n_traces", sweep_traces(&l.cfg, &n).map_err(from_pipeline)?)
        }
        Axis::ShiftRatio => ("shift_ratio", sweep_shift(&l.cfg, &values).map_err(from_pipeline)?),
    };
    let csv = out.with_extension("csv");
    write_json(out, &json!({ "axis": name, "points": points }))?;
    write_text(&csv, &sweep_csv(name, &points))?;
    for p in &points {
        println!("{name} {} accuracy {:.4}", p.value, p.report.accuracy);
    }
    rec.finish(&[out, &csv])?;
    Ok(())
}

fn cmd_llm(g: &Global, config: Option<PathBuf>, sequences: &[Vec<u32>], repeats: usize, out: &Path) -> CliResult<()> {
    let l = load_config(config, g)?;
    let rec = Recorder::start("llm", l.path.as_deref(), l.file_digest.clone(), l.cfg.seed);
    let spec = l.cfg.llm.build(l.cfg.leakage).kind(Kind::Config)?;
    let seed = l.cfg.seed;
    let traces = (0..sequences.len() * repeats)
        .into_par_iter()
        .map(|k| {
            let i = k / repeats;
            simulate_llm(&sequences[i], &spec, rng::derive(seed, k as u64)).map(|t| Trace { label: i as Label, ..t })
        })
        .collect::<Result<Vec<_>, _>>()
        .kind(Kind::Usage)?;
    let set =
        TraceSet::variable(traces, sequences.len()).with_generator(format!("scaar llm {}", env!("CARGO_PKG_VERSION")));
    save_data(&set, out)?;
    let lens: Vec<usize> = sequences.iter().map(|s| s.len() * spec.segment_len()).collect();
    println!(
        "wrote {} traces to {}; lengths per sequence {:?}",
        set.len(),
        out.display(),
        lens
    );
    rec.finish(&[out])?;
    Ok(())
}
