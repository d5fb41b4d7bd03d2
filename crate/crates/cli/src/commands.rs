use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autodial::bench::benchmark;
use autodial::checkpoint::{load_checkpoint, load_decoders_into, save_checkpoint, save_decoders, write_atomic};
use autodial::data::{
    build_context, build_label_spaces, corpus_fingerprint, load_corpus, save_corpus, synth_corpus, user_turn_indices,
    Dialogue, DialogueTask, SynthConfig, Vocab,
};
use autodial::infer::{evaluate, InferOptions};
use autodial::model::{params_hash, AutodialModel, DecoderSpec, ParameterReport};
use autodial::train::{train, train_classification_decoders_parallel, CorpusStyle, TrainConfig, TrainMode, TrainReport};
use autodial::transformer::ModelConfig;
use log::info;
use serde::Serialize;

use crate::args::{Attach, Bench, Command, Eval, GenData, Inspect, Kind, Preset, Train};
use crate::manifest::{sha256_hex, RunManifest};

pub fn execute(command: &Command, m: &mut RunManifest) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, m),
        Command::Train(a) => train_cmd(a, m),
        Command::Attach(a) => attach(a, m),
        Command::Eval(a) => eval(a, m),
        Command::Bench(a) => bench(a, m),
        Command::Inspect(a) => inspect(a, m),
        Command::Replay(_) => bail!("a manifest cannot replay another replay"),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn read_corpus(path: &Path, label: &str, m: &mut RunManifest) -> Result<Vec<Dialogue>> {
    let corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    m.input(path)?;
    m.corpus_fingerprints.insert(label.into(), corpus_fingerprint(&corpus));
    Ok(corpus)
}

fn read_checkpoint(path: &Path, m: &mut RunManifest) -> Result<AutodialModel> {
    let model = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    m.input(path)?;
    Ok(model)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn record_model(model: &AutodialModel, m: &mut RunManifest) {
    m.checkpoint_fingerprints.insert("encoder".into(), params_hash(model.encoder()));
    for d in model.decoders() {
        m.checkpoint_fingerprints.insert(format!("decoder.{}", d.spec.task), params_hash(&d.params));
    }
}

/// The three classification decoders plus a generative DST decoder.
fn standard_specs(cfg: &ModelConfig, corpus: &[Dialogue]) -> Vec<DecoderSpec> {
    let spaces = build_label_spaces(corpus);
    let mut specs: Vec<DecoderSpec> = DialogueTask::CLASSIFICATION
        .iter()
        .filter_map(|&t| spaces.get(t).filter(|s| !s.is_empty()).map(|s| DecoderSpec::classification(t, s.clone())))
        .collect();
    specs.push(DecoderSpec::generative("dst", vec![DialogueTask::Dst], cfg.gen_dec_layers));
    specs
}

fn model_config(preset: Preset, vocab: &Vocab, max_seq_len: Option<u64>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(preset.name(), vocab.len()).expect("every preset is known");
    if cfg.vocab_size < vocab.len() {
        bail!("--preset {}: vocabulary of {} exceeds the preset's {}", preset.name(), vocab.len(), cfg.vocab_size);
    }
    if let Some(n) = max_seq_len {
        cfg.max_seq_len = n as usize;
    }
    cfg.validate().context("--preset")?;
    Ok(cfg)
}

fn fresh_model(preset: Preset, corpus: &[Dialogue], max_seq_len: Option<u64>, seed: u64) -> Result<AutodialModel> {
    let vocab = Vocab::from_corpus(corpus);
    let cfg = model_config(preset, &vocab, max_seq_len)?;
    let specs = standard_specs(&cfg, corpus);
    Ok(AutodialModel::build(cfg, specs, seed)?.with_vocab(vocab))
}

fn gen_data(a: &GenData, m: &mut RunManifest) -> Result<()> {
    let (all, report) = synth_corpus(&SynthConfig {
        seed: a.seed,
        n_dialogues: (a.n_dialogues + a.n_test) as usize,
        ..SynthConfig::default()
    });
    let (train_set, test_set) = all.split_at(a.n_dialogues as usize);
    save_corpus(&a.out, train_set).with_context(|| format!("writing {}", a.out.display()))?;
    m.corpus_fingerprints.insert("corpus".into(), corpus_fingerprint(train_set));
    m.output(&a.out, false)?;
    if let Some(p) = &a.test_out {
        save_corpus(p, test_set).with_context(|| format!("writing {}", p.display()))?;
        m.corpus_fingerprints.insert("test".into(), corpus_fingerprint(test_set));
        m.output(p, false)?;
    }
    println!(
        "wrote {} dialogues ({} test): {} domains, {} acts, {} intents, {} user turns",
        train_set.len(),
        test_set.len(),
        report.n_domains,
        report.n_acts,
        report.n_intents,
        report.user_turns
    );
    Ok(())
}

fn train_config(a: &Train) -> TrainConfig {
    let mut c = match a.preset {
        Preset::Tiny => TrainConfig::tiny(a.mode),
        _ => TrainConfig::published(a.mode, CorpusStyle::Multiwoz),
    };
    c.seed = a.seed;
    c.cache_encoder = a.cache_encoder;
    if let Some(v) = a.epochs {
        c.epochs = v as usize;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v as usize;
    }
    if let Some(v) = a.max_seq_len {
        c.max_seq_len = v as usize;
    }
    if let Some(v) = a.warmup_updates {
        c.warmup_updates = v;
    }
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    c
}

fn train_cmd(a: &Train, m: &mut RunManifest) -> Result<()> {
    let corpus = read_corpus(&a.corpus, "corpus", m)?;
    let mut model = match &a.init {
        Some(p) => read_checkpoint(p, m)?,
        None => fresh_model(a.preset, &corpus, a.max_seq_len, a.seed)?,
    };
    let tasks: Vec<&str> = a.task.iter().map(String::as_str).collect();
    for &t in &tasks {
        if model.decoder(t).is_err() {
            if a.init.is_some() {
                bail!("--task {t}: checkpoint has no such decoder");
            }
            // Unknown names on a fresh model get one generative decoder over every task.
            let layers = model.config().gen_dec_layers;
            model.attach_decoder(DecoderSpec::generative(t, DialogueTask::ALL.to_vec(), layers), a.seed)?;
        }
    }
    let cfg = train_config(a);
    cfg.validate()?;
    let all_cls = tasks.iter().all(|t| model.decoder(t).is_ok_and(|d| d.spec.is_classification()));
    let reports: Vec<TrainReport> = if a.parallel_decoders && a.mode == TrainMode::Autodial && all_cls {
        train_classification_decoders_parallel(&mut model, &tasks, &corpus, &cfg)?
    } else {
        let mut out = Vec::new();
        for &t in &tasks {
            info!("training {t} ({})", cfg.mode);
            out.push(train(&mut model, t, &corpus, &cfg).with_context(|| format!("training {t}"))?);
        }
        out
    };
    for r in &reports {
        print!("{}", r.to_text());
    }
    let mut updated: Vec<String> = reports.iter().flat_map(|r| r.updated_params.iter().cloned()).collect();
    updated.sort();
    updated.dedup();
    m.updated_params = updated;

    save_checkpoint(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out, false)?;
    record_model(&model, m);
    if let Some(p) = &a.decoders_out {
        save_decoders(&model, &tasks, p).with_context(|| format!("writing {}", p.display()))?;
        m.output(p, false)?;
    }
    let report_path = with_suffix(&a.out, ".report.json");
    write_json(&report_path, &reports)?;
    m.output(&report_path, true)?;
    let stripped: Vec<TrainReport> = reports.iter().map(TrainReport::without_timing).collect();
    m.report_digest = Some(sha256_hex(&serde_json::to_vec(&stripped)?));
    Ok(())
}

fn attach(a: &Attach, m: &mut RunManifest) -> Result<()> {
    let mut model = read_checkpoint(&a.init, m)?;
    let added = if let Some(from) = &a.from {
        m.input(from)?;
        load_decoders_into(&mut model, from).with_context(|| format!("attaching {}", from.display()))?
    } else {
        let name = a.task.as_deref().expect("clap requires --task without --from");
        let source = a.source.as_deref().unwrap_or(name);
        let parsed = DialogueTask::parse(source);
        let kind = a.kind.unwrap_or(match parsed {
            Some(t) if t != DialogueTask::Dst => Kind::Classification,
            _ => Kind::Generative,
        });
        let spec = match kind {
            Kind::Classification => {
                let task = parsed
                    .filter(|t| *t != DialogueTask::Dst)
                    .with_context(|| format!("--source {source}: not a classification task (act, intent, domain)"))?;
                let path = a.corpus.as_ref().context("--corpus is required for a classification decoder")?;
                let corpus = read_corpus(path, "corpus", m)?;
                let labels = build_label_spaces(&corpus).get(task).cloned().expect("classification task");
                let mut spec = DecoderSpec::classification(task, labels);
                spec.task = name.into();
                if let Some(l) = a.layers {
                    spec = spec.with_layers(l as usize);
                }
                spec
            }
            Kind::Generative => {
                let tasks = parsed.map_or_else(|| DialogueTask::ALL.to_vec(), |t| vec![t]);
                let layers = a.layers.map_or(model.config().gen_dec_layers, |l| l as usize);
                DecoderSpec::generative(name, tasks, layers)
            }
        };
        model.attach_decoder(spec, a.seed)?;
        vec![name.to_string()]
    };
    save_checkpoint(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out, false)?;
    record_model(&model, m);
    println!("attached: {}", added.join(", "));
    print!("{}", model.parameter_report().to_table());
    Ok(())
}

fn eval(a: &Eval, m: &mut RunManifest) -> Result<()> {
    let model = read_checkpoint(&a.init, m)?;
    let test = read_corpus(&a.corpus, "test", m)?;
    let train_set = match &a.train_corpus {
        Some(p) => read_corpus(p, "train", m)?,
        None => test.clone(),
    };
    let tasks: Vec<String> = if a.task.is_empty() {
        model.tasks().map(String::from).collect()
    } else {
        a.task.clone()
    };
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let opts = InferOptions {
        threshold: a.threshold,
        gen_max_len: a.gen_max_len as usize,
        ignore_eos: false,
    };
    let report = evaluate(&model, &train_set, &test, &names, &opts)?;
    print!("{}", report.to_table());
    write_json(&a.out, &report)?;
    m.output(&a.out, false)?;
    m.report_digest = Some(crate::manifest::file_sha256(&a.out)?);
    Ok(())
}

/// Up to `n` gold-history contexts, in corpus order.
fn contexts(model: &AutodialModel, corpus: &[Dialogue], n: usize) -> Result<Vec<Vec<usize>>> {
    let vocab = model.vocab.as_ref().context("checkpoint has no vocabulary")?;
    let mut out = Vec::new();
    'outer: for d in corpus {
        for t in 0..user_turn_indices(d).len() {
            if out.len() == n {
                break 'outer;
            }
            out.push(build_context(d, t, vocab, model.config().max_seq_len)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct BenchShape<'a> {
    task: &'a str,
    kind: &'a str,
    params: usize,
    repetitions: usize,
    gen_max_len: usize,
}

fn bench(a: &Bench, m: &mut RunManifest) -> Result<()> {
    let corpus = read_corpus(&a.corpus, "corpus", m)?;
    let model = match &a.init {
        Some(p) => read_checkpoint(p, m)?,
        None => fresh_model(a.preset, &corpus, None, a.seed)?,
    };
    let ctxs = contexts(&model, &corpus, a.contexts as usize)?;
    let tasks: Vec<String> = if a.task.is_empty() {
        model.tasks().map(String::from).collect()
    } else {
        a.task.clone()
    };
    let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let opts = InferOptions {
        threshold: a.threshold,
        gen_max_len: a.gen_max_len as usize,
        ignore_eos: a.ignore_eos,
    };
    let report = benchmark(&model, &ctxs, &names, a.repetitions as usize, &opts)?;
    print!("{}", report.to_table());
    if let (Some(c), Some(g)) = (report.mean_for_kind("classification"), report.mean_for_kind("generative")) {
        println!("classification speedup over generative: {:.2}x", g / c);
    }
    let mut buf = Vec::new();
    report.write_jsonl(&mut buf)?;
    write_atomic(&a.out, &buf).with_context(|| format!("writing {}", a.out.display()))?;
    m.output(&a.out, true)?;
    record_model(&model, m);
    let shape: Vec<BenchShape> = report
        .rows
        .iter()
        .map(|r| BenchShape {
            task: &r.task,
            kind: &r.kind,
            params: r.params,
            repetitions: r.repetitions,
            gen_max_len: r.gen_max_len,
        })
        .collect();
    m.report_digest = Some(sha256_hex(&serde_json::to_vec(&shape)?));
    Ok(())
}

fn inspect(a: &Inspect, m: &mut RunManifest) -> Result<()> {
    let report = match &a.init {
        Some(p) => read_checkpoint(p, m)?.parameter_report(),
        None => {
            let corpus = match &a.corpus {
                Some(p) => read_corpus(p, "corpus", m)?,
                None => synth_corpus(&SynthConfig::default()).0,
            };
            let vocab = Vocab::from_corpus(&corpus);
            let cfg = model_config(a.preset, &vocab, None)?;
            ParameterReport::from_layout(&cfg, &standard_specs(&cfg, &corpus))
        }
    };
    print!("{}", report.to_table());
    let full = report.count("encoder") + report.row("decoder.dst").map_or(0, |r| r.count);
    for row in report.rows.iter().filter(|r| r.kind == "classification") {
        println!("encoder + dst decoder / {}: {:.2}x", row.component, full as f64 / row.count as f64);
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        m.output(out, false)?;
        m.report_digest = Some(crate::manifest::file_sha256(out)?);
    }
    Ok(())
}
