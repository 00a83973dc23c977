use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use insertion_core::config::RunConfig;
use insertion_core::decoding::{
    beta_grid, decode_batch, parse_traces, render_trace, trace_vocab, write_traces, DecodeConfig, DecodeMode,
    TraceRecord,
};
use insertion_core::model::checkpoint::Checkpoint;
use insertion_core::model::InsertionTransformer;
use insertion_core::tasks::{evaluate, load_corpus, EvalReport, Example, Task};
use insertion_core::tokens::{TokenId, Vocab};
use insertion_core::training::Trainer;

use crate::{ConfigArgs, UsageError};

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::load_with_overrides(args.config.as_deref(), &args.overrides)?)
}

/// Training and dev data for a run: corpus files when configured, the
/// synthetic task otherwise.
fn run_data(config: &RunConfig) -> Result<(Vocab, Vec<Example>, Vec<Example>)> {
    match &config.data.train_file {
        Some(train) => {
            let (vocab, train_set) = load_corpus(train, None)?;
            let dev = match &config.data.dev_file {
                Some(dev) => load_corpus(dev, Some(&vocab))?.1,
                None => Vec::new(),
            };
            Ok((vocab, train_set, dev))
        }
        None => {
            let task = Task::new(config.task.clone())?;
            Ok((task.vocab().clone(), task.train_set(), task.dev_set()))
        }
    }
}

fn check_lengths(config: &RunConfig, data: &[Example]) -> Result<()> {
    let longest = data.iter().map(|e| e.x.len().max(e.y.len())).max().unwrap_or(0);
    let limit = config.model.max_canvas_len();
    if longest > limit {
        return Err(UsageError(format!(
            "longest sequence has {longest} tokens but model.max_positions = {} allows {limit}",
            config.model.max_positions
        ))
        .into());
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, run_dir: &Path, resume: Option<&Path>) -> Result<()> {
    let mut config = load_config(args)?;
    let (vocab, train_set, _) = run_data(&config)?;
    if config.model.vocab_size != vocab.len() {
        log::info!(
            "setting model.vocab_size = {} to match the data vocabulary",
            vocab.len()
        );
        config.model.vocab_size = vocab.len();
    }
    check_lengths(&config, &train_set)?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.effective"), config.to_toml()?)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.header.vocab != vocab.names() || ck.header.model != config.model {
                return Err(UsageError(format!(
                    "{} was trained with a different model or vocabulary",
                    path.display()
                ))
                .into());
            }
            Trainer::<f32>::resume(&ck, config.train.clone())?
        }
        None => Trainer::new(
            InsertionTransformer::<f32>::new(config.model.clone())?,
            config.loss.clone(),
            config.train.clone(),
        )?,
    };
    log::info!(
        "training {} parameters on {} pairs for {} steps",
        trainer.model.num_parameters(),
        train_set.len(),
        config.train.steps
    );
    let history = trainer.run(&train_set, Some(run_dir), vocab.names(), |m| {
        if m.step % 100 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e} ({:.0}s)", m.step, m.loss, m.lr, m.elapsed_s);
        }
    })?;
    let final_ck = insertion_core::training::checkpoint_path(run_dir, trainer.step_count());
    match history.last() {
        Some(m) => println!("step {} loss {:.4} -> {}", m.step, m.loss, final_ck.display()),
        None => println!("no steps to run -> {}", final_ck.display()),
    }
    Ok(())
}

struct Loaded {
    model: InsertionTransformer<f32>,
    vocab: Vocab,
    checkpoint: Checkpoint,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let vocab = Vocab::from_names(checkpoint.header.vocab.clone())?;
    if vocab.len() != checkpoint.header.model.vocab_size {
        bail!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            checkpoint.header.model.vocab_size
        );
    }
    let model = checkpoint.to_model::<f32>()?;
    Ok(Loaded {
        model,
        vocab,
        checkpoint,
    })
}

/// Decode settings from the config, then flags, then the checkpoint's training regime.
fn decode_config(
    args: &ConfigArgs,
    loaded: &Loaded,
    mode: Option<DecodeMode>,
    beta: Option<f64>,
) -> Result<(RunConfig, DecodeConfig)> {
    let run = load_config(args)?;
    let mut decode = run.decode.clone();
    if let Some(m) = mode {
        decode.mode = m;
    }
    if let Some(b) = beta {
        decode.eos_penalty = b;
    }
    if decode.termination.is_none() {
        decode.termination = loaded.checkpoint.header.loss.as_ref().map(|l| l.termination);
    }
    decode.max_output_length = decode.max_output_length.min(loaded.model.config().max_canvas_len());
    decode.validate()?;
    Ok((run, decode))
}

pub struct DecodeArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    pub input: Option<PathBuf>,
    pub tokens: Option<String>,
    pub mode: Option<DecodeMode>,
    pub beta: Option<f64>,
    pub trace: Option<PathBuf>,
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let (_, config) = decode_config(&args.config, &loaded, args.mode, args.beta)?;
    let lines: Vec<String> = match (&args.input, &args.tokens) {
        (Some(path), _) => fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(|l| l.split('\t').next().unwrap_or("").to_string())
            .collect(),
        (None, Some(t)) => vec![t.clone()],
        (None, None) => bail!(UsageError("one of --input or --tokens is required".into())),
    };
    let mut sources: Vec<Vec<TokenId>> = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let mut ids = Vec::new();
        for w in line.split_whitespace() {
            let id = loaded.vocab.id(w).ok_or_else(|| {
                UsageError(format!("input line {}: token {w:?} is not in the checkpoint vocabulary", i + 1))
            })?;
            ids.push(id);
        }
        if ids.is_empty() {
            bail!(UsageError(format!("input line {} is empty", i + 1)));
        }
        sources.push(ids);
    }
    let refs: Vec<&[TokenId]> = sources.iter().map(Vec::as_slice).collect();
    let traces = decode_batch(&loaded.model, &refs, &config)?;
    let mut stdout = std::io::stdout().lock();
    for t in &traces {
        writeln!(stdout, "{}", loaded.vocab.decode(t.output.tokens()).join(" "))?;
        if t.truncated {
            log::warn!("a decode hit the iteration or length cap and was truncated");
        }
    }
    if let Some(path) = &args.trace {
        let records: Vec<TraceRecord> = sources
            .into_iter()
            .zip(traces)
            .map(|(source, trace)| TraceRecord { source, trace })
            .collect();
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        write_traces(&mut out, &records, &loaded.vocab)?;
        out.flush()?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub config: ConfigArgs,
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub mode: Option<DecodeMode>,
    pub beta: Option<f64>,
    pub sweep_beta: Option<String>,
    pub out_dir: Option<PathBuf>,
}

fn parse_sweep(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| UsageError(format!("--sweep-beta {spec:?} is not START:END:STEP")))?;
    if nums.len() != 3 {
        bail!(UsageError(format!("--sweep-beta {spec:?} is not START:END:STEP")));
    }
    Ok(beta_grid(nums[0], nums[1], nums[2])?)
}

fn eval_data(args: &EvalArgs, run: &RunConfig, vocab: &Vocab) -> Result<Vec<Example>> {
    if let Some(path) = args.data.as_ref().or(run.data.dev_file.as_ref()) {
        return Ok(load_corpus(path, Some(vocab))?.1);
    }
    let task = Task::new(run.task.clone())?;
    if task.vocab() != vocab {
        bail!(UsageError(
            "the configured task's vocabulary does not match the checkpoint; pass --data or the run's config.effective"
                .into()
        ));
    }
    Ok(task.dev_set())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("iterations.tsv"), report.iterations_tsv())?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let loaded = load_checkpoint(&args.checkpoint)?;
    let (run, mut config) = decode_config(&args.config, &loaded, args.mode, args.beta)?;
    let data = eval_data(args, &run, &loaded.vocab)?;
    if data.is_empty() {
        bail!(UsageError("evaluation set is empty".into()));
    }
    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval"),
    };
    let Some(spec) = &args.sweep_beta else {
        let (report, _) = evaluate(&loaded.model, &data, &config)?;
        print!("{}", report.to_text());
        write_report(&out_dir, &report)?;
        return Ok(());
    };
    let grid = parse_sweep(spec)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &beta in &grid {
        config.eos_penalty = beta;
        let (report, traces) = evaluate(&loaded.model, &data, &config)?;
        let mean_len = traces.iter().map(|t| t.output.len()).sum::<usize>() as f64 / traces.len() as f64;
        rows.push((beta, report, mean_len));
    }
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.1.bleu > rows[best].1.bleu { i } else { best });
    let mut table = String::from("beta\taccuracy\tbleu\tmean_length\tmean_iterations\ttruncated\tbest\n");
    for (i, (beta, r, mean_len)) in rows.iter().enumerate() {
        table.push_str(&format!(
            "{beta:.2}\t{:.4}\t{:.2}\t{mean_len:.3}\t{:.3}\t{}\t{}\n",
            r.accuracy,
            r.bleu,
            r.mean_iterations,
            r.truncated,
            if i == best { "*" } else { "" }
        ));
    }
    print!("{table}");
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("sweep.tsv"), &table)?;
    write_report(&out_dir, &rows[best].1)?;
    Ok(())
}

pub fn trace_render(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let vocab = trace_vocab(&text)?;
    let records = parse_traces(&text, &vocab).with_context(|| format!("parsing {}", path.display()))?;
    let mut stdout = std::io::stdout().lock();
    for r in &records {
        write!(stdout, "{}", render_trace(r, &vocab))?;
    }
    Ok(())
}
