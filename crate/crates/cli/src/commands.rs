use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use symn_core::ablation::{self, AblationConfig, AblationRow, NoiseSetting};
use symn_core::checkpoint;
use symn_core::data::{self, InstructionRecord, Template, TokenizedExample, VOCAB_SIZE};
use symn_core::model::{self, Decoding, ModelConfig, ModelParams};
use symn_core::noise::{NoiseKind, NoiseSpec};
use symn_core::probe::{self, DirectionKind, ProbeConfig, ProbeReport};
use symn_core::textmetrics::{self, ResponseRecord};
use symn_core::trainer::{self, JsonlLog, TrainConfig};

use crate::config::FileLayer;
use crate::manifest::{digest_inputs, sidecar_for, unix_now, RunManifest};
use crate::{AblateArgs, CliError, DataFlags, GenerateArgs, MetricsArgs, ModelFlags, OptFlags, ProbeArgs, TrainArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub eval_holdout: usize,
    pub template: Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: DataConfig,
    pub init: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRun {
    pub checkpoint: PathBuf,
    pub prompts: PathBuf,
    pub template: Template,
    pub max_new: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub holdout: usize,
    pub template: Template,
    pub max_seq_len: usize,
    pub deltas: Vec<f64>,
    pub probe: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRun {
    pub responses: PathBuf,
    pub k_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub data: DataConfig,
    pub settings: Vec<String>,
    pub ablation: AblationConfig,
    pub parallel: bool,
}

fn required(path: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn resolve_data(flags: DataFlags, layer: &mut FileLayer) -> Result<DataConfig, CliError> {
    let data = required(layer.resolve_opt("data", flags.data)?, "data")?;
    Ok(DataConfig {
        data,
        eval_data: layer.resolve_opt("eval_data", flags.eval_data)?,
        eval_holdout: layer.resolve("eval_holdout", flags.eval_holdout, 0)?,
        template: layer.resolve("template", flags.template, Template::Plain)?,
    })
}

fn resolve_model(flags: ModelFlags, seed: u64, layer: &mut FileLayer) -> Result<ModelConfig, CliError> {
    let config = ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: layer.resolve("d_model", flags.d_model, 32)?,
        n_layers: layer.resolve("n_layers", flags.n_layers, 2)?,
        n_heads: layer.resolve("n_heads", flags.n_heads, 4)?,
        context_len: layer.resolve("context_len", flags.context_len, 64)?,
        seed: layer.resolve("model_seed", flags.model_seed, seed)?,
    };
    config.validate()?;
    Ok(config)
}

fn resolve_train_config(
    flags: OptFlags,
    noise: NoiseSpec,
    compute_matched: bool,
    context_len: usize,
    layer: &mut FileLayer,
) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let seed = layer.resolve("seed", flags.seed, d.seed)?;
    let config = TrainConfig {
        noise: NoiseSpec {
            seed: layer.resolve("noise_seed", flags.noise_seed, seed)?,
            ..noise
        },
        batch_size: layer.resolve("batch_size", flags.batch_size, d.batch_size)?,
        max_steps: layer.resolve("max_steps", flags.max_steps, d.max_steps)?,
        learning_rate: layer.resolve("learning_rate", flags.learning_rate, d.learning_rate)?,
        weight_decay: layer.resolve("weight_decay", flags.weight_decay, d.weight_decay)?,
        grad_clip_norm: layer.resolve("grad_clip_norm", flags.grad_clip_norm, d.grad_clip_norm)?,
        seed,
        eval_every: layer.resolve("eval_every", flags.eval_every, d.eval_every)?,
        max_seq_len: layer.resolve("max_seq_len", flags.max_seq_len, context_len)?,
        compute_matched,
    };
    config.validate()?;
    if config.max_seq_len > context_len {
        return Err(CliError::Usage(format!(
            "max_seq_len {} exceeds the model context {context_len}",
            config.max_seq_len
        )));
    }
    Ok(config)
}

/// The seed flag is needed before the model section; peek at it without
/// consuming the key.
fn peek_seed(flags: &OptFlags, layer: &FileLayer) -> Result<u64, CliError> {
    let mut probe = layer.clone();
    probe.resolve("seed", flags.seed, 0)
}

fn resolve_train(args: TrainArgs) -> Result<TrainRun, CliError> {
    let mut layer = FileLayer::load(args.config.as_deref())?;
    let data = resolve_data(args.data, &mut layer)?;
    let init = layer.resolve_opt("init", args.init)?;
    let seed = peek_seed(&args.opt, &layer)?;
    let model = match &init {
        Some(path) => checkpoint::read_config(path)?,
        None => resolve_model(args.model, seed, &mut layer)?,
    };
    let kind = layer.resolve("noise", args.noise, NoiseKind::None)?;
    let alpha = layer.resolve("alpha", args.alpha, 5.0)?;
    let compute_matched = layer.resolve_switch("compute_matched", args.compute_matched)?;
    let noise = NoiseSpec::new(kind, alpha, 0)?;
    let train = resolve_train_config(args.opt, noise, compute_matched, model.context_len, &mut layer)?;
    layer.finish()?;
    Ok(TrainRun {
        data,
        init,
        model,
        train,
    })
}

fn load_records(path: &Path) -> Result<Vec<InstructionRecord>, CliError> {
    Ok(data::load_jsonl(path)?)
}

fn tokenize_all(records: &[InstructionRecord], template: Template, max_seq_len: usize, origin: &Path) -> Result<Vec<TokenizedExample>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            data::tokenize_record(r, template, max_seq_len)
                .map_err(|e| CliError::Data(format!("{} record {}: {e}", origin.display(), i + 1)))
        })
        .collect()
}

/// Training and evaluation examples.
fn load_examples(cfg: &DataConfig, max_seq_len: usize) -> Result<(Vec<TokenizedExample>, Vec<TokenizedExample>), CliError> {
    let mut train = tokenize_all(&load_records(&cfg.data)?, cfg.template, max_seq_len, &cfg.data)?;
    let eval = match &cfg.eval_data {
        Some(path) => tokenize_all(&load_records(path)?, cfg.template, max_seq_len, path)?,
        None if cfg.eval_holdout > 0 => {
            if cfg.eval_holdout >= train.len() {
                return Err(CliError::Usage(format!(
                    "eval_holdout {} leaves no training data ({} records)",
                    cfg.eval_holdout,
                    train.len()
                )));
            }
            train.split_off(train.len() - cfg.eval_holdout)
        }
        None => Vec::new(),
    };
    Ok((train, eval))
}

fn data_inputs(cfg: &DataConfig) -> Vec<&Path> {
    std::iter::once(cfg.data.as_path()).chain(cfg.eval_data.as_deref()).collect()
}

fn warn_about_noise(kind: NoiseKind, alpha: f64, compute_matched: bool) {
    if kind != NoiseKind::None && alpha == 0.0 {
        eprintln!("warning: --alpha 0 makes `{kind}` noise a no-op; training as plain fine-tuning");
    }
    if compute_matched && kind != NoiseKind::SymmetricBernoulli {
        eprintln!("warning: --compute-matched only changes symnoise runs");
    }
}

fn replay<C: for<'de> Deserialize<'de>>(path: &Path, command: &str) -> Result<C, CliError> {
    let manifest = RunManifest::read(path)?;
    manifest.verify_inputs()?;
    manifest.config_for(command)
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let out_root = args.out.clone();
    let run: TrainRun = match &args.manifest {
        Some(path) => replay(path, "train")?,
        None => resolve_train(args)?,
    };
    let spec = &run.train.noise;
    warn_about_noise(spec.kind, spec.alpha, run.train.compute_matched);

    let mut inputs = data_inputs(&run.data);
    inputs.extend(run.init.as_deref());
    let (train_set, eval_set) = load_examples(&run.data, run.train.max_seq_len)?;
    let init = match &run.init {
        Some(path) => checkpoint::load_model(path)?,
        None => ModelParams::init(&run.model)?,
    };

    let mut manifest = RunManifest::new("train", &run, digest_inputs(&inputs)?);
    let dir = manifest.create_run_dir(&out_root)?;
    manifest.write(&dir.join("manifest.json"))?;
    let log_path = dir.join("steps.jsonl");
    let mut log = JsonlLog::append(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let ckpt = dir.join("model.symn");
    let state = trainer::train_loop(&run.train, &train_set, &eval_set, init, &mut log, Some(&ckpt))?;
    manifest.finished_at = Some(unix_now());
    manifest.write(&dir.join("manifest.json"))?;

    let eval_for_report = if eval_set.is_empty() { &train_set } else { &eval_set };
    let clean = trainer::evaluate(&state.params, eval_for_report, run.train.batch_size)?;
    println!("run directory: {}", dir.display());
    println!(
        "steps {}  final loss {:.4}  clean eval loss {:.4}  noise {} alpha {}",
        state.step,
        state.loss_history.last().copied().unwrap_or(f64::NAN),
        clean,
        spec.kind,
        spec.alpha
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptLine {
    Raw {
        prompt: String,
    },
    Instruction {
        instruction: String,
        #[serde(default)]
        input: Option<String>,
    },
}

fn read_prompts(path: &Path, template: Template) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PromptLine = serde_json::from_str(line).map_err(|e| {
            CliError::Data(format!(
                "{} line {}: expected {{\"prompt\"}} or {{\"instruction\"}}: {e}",
                path.display(),
                i + 1
            ))
        })?;
        out.push(match parsed {
            PromptLine::Raw { prompt } => prompt,
            PromptLine::Instruction { instruction, input } => data::render_prompt(
                &InstructionRecord {
                    instruction,
                    input,
                    output: String::new(),
                },
                template,
            ),
        });
    }
    Ok(out)
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let out = required(args.out.clone(), "out")?;
    let run: GenerateRun = match &args.manifest {
        Some(path) => replay(path, "generate")?,
        None => {
            let mut layer = FileLayer::load(args.config.as_deref())?;
            let run = GenerateRun {
                checkpoint: required(layer.resolve_opt("checkpoint", args.checkpoint)?, "checkpoint")?,
                prompts: required(layer.resolve_opt("prompts", args.prompts)?, "prompts")?,
                template: layer.resolve("template", args.template, Template::Plain)?,
                max_new: layer.resolve("max_new", args.max_new, 64)?,
                temperature: layer.resolve("temperature", args.temperature, 0.0)?,
                seed: layer.resolve("seed", args.seed, 0)?,
            };
            layer.finish()?;
            run
        }
    };
    if !(run.temperature >= 0.0 && run.temperature.is_finite()) {
        return Err(CliError::Usage(format!("temperature must be >= 0, got {}", run.temperature)));
    }
    let mut manifest = RunManifest::new("generate", &run, digest_inputs(&[&run.checkpoint, &run.prompts])?);
    let params = checkpoint::load_model(&run.checkpoint)?;
    let prompts = read_prompts(&run.prompts, run.template)?;
    let decoding = if run.temperature == 0.0 {
        Decoding::Greedy
    } else {
        Decoding::Temperature(run.temperature)
    };
    let mut records = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.into_iter().enumerate() {
        let tokens = data::encode(&prompt);
        let full = model::generate(&params, &tokens, run.max_new, decoding, run.seed.wrapping_add(i as u64))?;
        records.push(ResponseRecord {
            response: data::decode(&full[tokens.len()..]),
            prompt,
        });
    }
    fs::write(&out, textmetrics::write_corpus(&records)).map_err(|e| CliError::io(&out, e))?;
    manifest.finished_at = Some(unix_now());
    manifest.write(&sidecar_for(&out))?;
    println!("wrote {} responses to {}", records.len(), out.display());
    Ok(())
}

pub fn probe(args: ProbeArgs) -> Result<(), CliError> {
    let out = args.out.clone();
    let run: ProbeRun = match &args.manifest {
        Some(path) => replay(path, "probe")?,
        None => {
            let mut layer = FileLayer::load(args.config.as_deref())?;
            let checkpoint = required(layer.resolve_opt("checkpoint", args.checkpoint)?, "checkpoint")?;
            let context = checkpoint::read_config(&checkpoint)?.context_len;
            let d = ProbeConfig::default();
            let deltas = if args.delta.is_empty() {
                match layer.resolve_opt::<String>("delta", None)? {
                    Some(list) => list
                        .split(',')
                        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::Usage(format!("bad delta `{s}`: {e}"))))
                        .collect::<Result<Vec<_>, _>>()?,
                    None => vec![d.delta],
                }
            } else {
                layer.resolve_opt::<String>("delta", None)?;
                args.delta
            };
            let run = ProbeRun {
                data: required(layer.resolve_opt("data", args.data)?, "data")?,
                holdout: layer.resolve("holdout", args.holdout, 0)?,
                template: layer.resolve("template", args.template, Template::Plain)?,
                max_seq_len: layer.resolve("max_seq_len", args.max_seq_len, context)?,
                probe: ProbeConfig {
                    n_directions: layer.resolve("directions", args.directions, d.n_directions)?,
                    delta: deltas[0],
                    direction_kind: layer.resolve("direction_kind", args.direction_kind, DirectionKind::Bernoulli)?,
                    seed: layer.resolve("seed", args.seed, d.seed)?,
                },
                deltas,
                checkpoint,
            };
            layer.finish()?;
            run
        }
    };
    let mut manifest = RunManifest::new("probe", &run, digest_inputs(&[&run.checkpoint, &run.data])?);
    let params = checkpoint::load_model(&run.checkpoint)?;
    let mut examples = tokenize_all(&load_records(&run.data)?, run.template, run.max_seq_len, &run.data)?;
    if run.holdout > 0 {
        let keep = run.holdout.min(examples.len());
        examples = examples.split_off(examples.len() - keep);
    }
    let mut reports: Vec<ProbeReport> = Vec::new();
    for &delta in &run.deltas {
        let config = ProbeConfig { delta, ..run.probe };
        config.validate()?;
        let mut report = probe::probe_model(&params, &examples, &config)?;
        report.metadata.checkpoint = Some(run.checkpoint.display().to_string());
        report.metadata.dataset = Some(run.data.display().to_string());
        println!("{}", report.summary_table());
        reports.push(report);
    }
    if let Some(out) = out {
        let json = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])
        } else {
            serde_json::to_string_pretty(&reports)
        }
        .expect("reports serialize");
        fs::write(&out, json + "\n").map_err(|e| CliError::io(&out, e))?;
        manifest.finished_at = Some(unix_now());
        manifest.write(&sidecar_for(&out))?;
    }
    Ok(())
}

pub fn metrics(args: MetricsArgs) -> Result<(), CliError> {
    let out = args.out.clone();
    let run: MetricsRun = match &args.manifest {
        Some(path) => replay(path, "metrics")?,
        None => {
            let mut layer = FileLayer::load(args.config.as_deref())?;
            let run = MetricsRun {
                responses: required(layer.resolve_opt("responses", args.responses)?, "responses")?,
                k_words: layer.resolve("k_words", args.k_words, 50)?,
            };
            layer.finish()?;
            run
        }
    };
    let mut manifest = RunManifest::new("metrics", &run, digest_inputs(&[&run.responses])?);
    let corpus = textmetrics::read_corpus(&run.responses)?;
    let responses: Vec<&str> = corpus.iter().map(|r| r.response.as_str()).collect();
    let report = textmetrics::corpus_report(&responses, run.k_words)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(prefix) = out {
        let with = |ext: &str| {
            let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(ext);
            prefix.with_file_name(name)
        };
        let json_path = with(".json");
        let json = serde_json::to_string_pretty(&report).expect("reports serialize") + "\n";
        fs::write(&json_path, json).map_err(|e| CliError::io(&json_path, e))?;
        let table_path = with(".txt");
        fs::write(&table_path, &table).map_err(|e| CliError::io(&table_path, e))?;
        manifest.finished_at = Some(unix_now());
        manifest.write(&with(".manifest.json"))?;
    }
    Ok(())
}

fn resolve_ablate(args: AblateArgs) -> Result<AblateRun, CliError> {
    let mut layer = FileLayer::load(args.config.as_deref())?;
    let data = resolve_data(args.data, &mut layer)?;
    let seed = peek_seed(&args.opt, &layer)?;
    let model = resolve_model(args.model, seed, &mut layer)?;
    let settings_text = layer.resolve_opt::<String>("settings", args.settings)?;
    let settings = match settings_text {
        Some(text) => ablation::parse_settings(&text).map_err(CliError::Usage)?,
        None => ablation::standard_settings(),
    };
    if settings.is_empty() {
        return Err(CliError::Usage("no noise settings given".into()));
    }
    let compute_matched = layer.resolve_switch("compute_matched", args.compute_matched)?;
    let train = resolve_train_config(args.opt, NoiseSpec::none(), compute_matched, model.context_len, &mut layer)?;
    let d = ProbeConfig::default();
    let probe = ProbeConfig {
        n_directions: layer.resolve("probe_directions", args.probe_directions, d.n_directions)?,
        delta: layer.resolve("probe_delta", args.probe_delta, d.delta)?,
        direction_kind: DirectionKind::Bernoulli,
        seed,
    };
    probe.validate()?;
    let ablation = AblationConfig {
        model,
        train,
        probe,
        max_new_tokens: layer.resolve("max_new", args.max_new, 32)?,
        k_words: layer.resolve("k_words", args.k_words, 4)?,
    };
    let parallel = layer.resolve_switch("parallel", args.parallel)?;
    layer.finish()?;
    Ok(AblateRun {
        data,
        settings: settings.iter().map(ToString::to_string).collect(),
        ablation,
        parallel,
    })
}

fn append_row(path: &Path, row: &AblationRow) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let line = serde_json::to_string(row).expect("rows serialize") + "\n";
    f.write_all(line.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let out_root = args.out.clone();
    let run: AblateRun = match &args.manifest {
        Some(path) => replay(path, "ablate")?,
        None => resolve_ablate(args)?,
    };
    let settings: Vec<NoiseSetting> = run
        .settings
        .iter()
        .map(|s| s.parse().map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;
    for s in &settings {
        warn_about_noise(s.kind, s.alpha, false);
    }
    let (train_set, eval_set) = load_examples(&run.data, run.ablation.train.max_seq_len)?;
    let mut manifest = RunManifest::new("ablate", &run, digest_inputs(&data_inputs(&run.data))?);
    let dir = manifest.create_run_dir(&out_root)?;
    manifest.write(&dir.join("manifest.json"))?;
    let rows_path = dir.join("rows.jsonl");

    let outcome: Result<Vec<AblationRow>, (Vec<AblationRow>, String, symn_core::Error)> = if run.parallel {
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = settings
                .iter()
                .map(|s| {
                    let (cfg, tr, ev) = (&run.ablation, &train_set, &eval_set);
                    scope.spawn(move || ablation::run_setting(cfg, s, tr, ev, &mut trainer::NoLog))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("setting thread panicked")).collect()
        });
        let mut rows = Vec::new();
        let mut failure = None;
        for (s, r) in settings.iter().zip(results) {
            match r {
                Ok(row) => rows.push(row),
                Err(e) if failure.is_none() => failure = Some((s.to_string(), e)),
                Err(_) => {}
            }
        }
        for row in &rows {
            append_row(&rows_path, row)?;
        }
        match failure {
            None => Ok(rows),
            Some((s, e)) => Err((rows, s, e)),
        }
    } else {
        let mut write_err = None;
        let result = ablation::run_ablation(&run.ablation, &settings, &train_set, &eval_set, &mut |row| {
            if let Err(e) = append_row(&rows_path, row) {
                write_err.get_or_insert(e);
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        result.map_err(|e| (e.completed, e.setting, e.source))
    };

    match outcome {
        Ok(rows) => {
            let table = ablation::render_table(&rows);
            let table_path = dir.join("table.txt");
            fs::write(&table_path, &table).map_err(|e| CliError::io(&table_path, e))?;
            manifest.finished_at = Some(unix_now());
            manifest.write(&dir.join("manifest.json"))?;
            println!("run directory: {}", dir.display());
            print!("{table}");
            Ok(())
        }
        Err((rows, setting, source)) => {
            let partial = dir.join("table.partial.txt");
            fs::write(&partial, ablation::render_table(&rows)).map_err(|e| CliError::io(&partial, e))?;
            eprintln!(
                "setting `{setting}` failed; {} completed rows kept in {}",
                rows.len(),
                rows_path.display()
            );
            Err(source.into())
        }
    }
}
