//! Command-line front end: dataset generation, training, evaluation, and
//! the standard experiment protocols, driven by one flat configuration.

use madapt_core::checkpoint::{
    apply_checkpoint, load_checkpoint, model_config_from_checkpoint, save_checkpoint,
};
use madapt_core::config::{parse_config, print_config, ExperimentConfig, Mode};
use madapt_core::data::{
    generate_domain_pair, shared_class_pairs, split_fraction, AnswerVocab, Dataset, DomainPair,
};
use madapt_core::error::{CoreError, Result};
use madapt_core::eval::{
    evaluate, joint_embeddings, probe_domain_gap, write_eval_csv, EvalReport,
};
use madapt_core::experiments::{
    ablation_csv, fraction_csv, run_ablation, run_fraction_study, prepare, PreparedData, Protocol,
};
use madapt_core::feature_file::{load_dataset, save_dataset};
use madapt_core::model::{DualDomainModel, Head};
use madapt_core::train::{
    adapt, finetune, pretrain_source, train_target_only, write_run_csv, IterRow,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

const USAGE: &str = "\
usage: madapt <command> [--config FILE] [--out DIR] [--KEY VALUE | --KEY=VALUE]...

commands:
  gen-data        write the two-domain dataset as four .mmda files
  train-source    pretrain on labeled source data, warm-start the target head
  adapt           aligned training on source and target together
  finetune        target cross-entropy training, usually from a checkpoint
  target-only     target cross-entropy training from a fresh initialization
  eval            score a checkpoint on the evaluation splits
  probe           measure the embedding domain gap of a checkpoint
  ablate          build the method ladder and its accuracy deltas
  fraction-study  rerun the methods at 1/8, 1/4, 1/2, and all target labels
  print-config    print the effective configuration and exit

Keys are the configuration file keys; command-line values override the file.
Results land in --out (default 'out'), always including config.echo.

exit codes: 0 ok, 2 bad configuration or usage, 3 unreadable or mismatched
data, 4 training diverged";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config { .. } | CoreError::InvalidArgument(_) | CoreError::ShapeMismatch { .. } => 2,
        CoreError::Data { .. } | CoreError::Io(_) | CoreError::ArchitectureMismatch { .. } => 3,
        CoreError::Divergence { .. } | CoreError::NonFinite { .. } => 4,
    }
}

fn run(args: &[String]) -> Result<()> {
    let command = &args[0];
    if matches!(command.as_str(), "help" | "-h" | "--help") {
        println!("{USAGE}");
        return Ok(());
    }

    let pairs = kv_pairs(&args[1..])?;
    let mut cfg = ExperimentConfig::default();
    for (key, value) in &pairs {
        if key == "config" {
            let text = std::fs::read_to_string(value)
                .map_err(|e| file_error("configuration file", value, e))?;
            cfg = parse_config(&text)?;
        }
    }
    for (key, value) in &pairs {
        match key.as_str() {
            "config" => {}
            "out" => cfg.out_dir = value.clone(),
            _ => cfg.apply_kv(key, value)?,
        }
    }

    if command == "print-config" {
        cfg.validate()?;
        print!("{}", print_config(&cfg));
        return Ok(());
    }

    cfg.mode = Mode::parse(command)?;
    if !cfg.deterministic {
        let clock = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("clock before 1970");
        cfg.seed = clock.as_nanos() as u64;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::write(out.join("config.echo"), print_config(&cfg))?;

    match cfg.mode {
        Mode::GenData => gen_data(&cfg, &out),
        Mode::TrainSource => train_source(&cfg, &out),
        Mode::Adapt | Mode::Finetune | Mode::TargetOnly => train_on_target(&cfg, &out),
        Mode::Eval => eval_checkpoint(&cfg, &out),
        Mode::Probe => probe_checkpoint(&cfg, &out),
        Mode::Ablate => ablate(&cfg, &out),
        Mode::FractionStudy => fraction_study(&cfg, &out),
    }
}

fn file_error(what: &str, path: &str, e: std::io::Error) -> CoreError {
    CoreError::Io(std::io::Error::new(
        e.kind(),
        format!("{what} '{path}': {e}"),
    ))
}

/// Splits raw arguments into key/value pairs, accepting both `--key value`
/// and `--key=value`.
fn kv_pairs(rest: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let arg = &rest[i];
        let Some(stripped) = arg.strip_prefix("--").filter(|s| !s.is_empty()) else {
            return Err(CoreError::InvalidArgument(format!(
                "unexpected argument '{arg}'\n\n{USAGE}"
            )));
        };
        if let Some((k, v)) = stripped.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let Some(value) = rest.get(i + 1) else {
                return Err(CoreError::InvalidArgument(format!(
                    "--{stripped} needs a value"
                )));
            };
            out.push((stripped.to_string(), value.clone()));
            i += 2;
        }
    }
    Ok(out)
}

// ── dataset plumbing ──

/// Loads the four datasets named in the configuration, or generates them in
/// memory when no paths are set. Mixing the two is rejected.
fn load_pair(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let paths = [
        ("source_train", &cfg.source_train),
        ("target_train", &cfg.target_train),
        ("source_eval", &cfg.source_eval),
        ("target_eval", &cfg.target_eval),
    ];
    let set = paths.iter().filter(|(_, p)| !p.is_empty()).count();
    if set == 0 {
        return prepare(&cfg.data);
    }
    if set < paths.len() {
        let missing: Vec<&str> = paths
            .iter()
            .filter(|(_, p)| p.is_empty())
            .map(|(n, _)| *n)
            .collect();
        return Err(CoreError::InvalidArgument(format!(
            "set all four dataset paths or none (missing {})",
            missing.join(", ")
        )));
    }

    let source_train = load_named(&cfg.source_train, "source_train")?;
    let target_train = load_named(&cfg.target_train, "target_train")?;
    let source_eval = load_named(&cfg.source_eval, "source_eval")?;
    let target_eval = load_named(&cfg.target_eval, "target_eval")?;
    for (name, ds) in [
        ("target_train", &target_train),
        ("source_eval", &source_eval),
        ("target_eval", &target_eval),
    ] {
        check_geometry(&source_train, ds, name)?;
    }

    let source_vocab = AnswerVocab::build(&source_train.samples, cfg.data.answer_vocab);
    let target_vocab = AnswerVocab::build(&target_train.samples, cfg.data.answer_vocab);
    let shared_pairs = shared_class_pairs(&source_vocab, &target_vocab);
    Ok(PreparedData {
        pair: DomainPair {
            source_train,
            target_train,
            source_eval,
            target_eval,
        },
        source_vocab,
        target_vocab,
        shared_pairs,
    })
}

fn load_named(path: &str, what: &str) -> Result<Dataset> {
    load_dataset(Path::new(path)).map_err(|e| match e {
        CoreError::Io(io) => file_error(what, path, io),
        other => other,
    })
}

fn check_geometry(reference: &Dataset, ds: &Dataset, name: &str) -> Result<()> {
    if ds.k != reference.k
        || ds.g != reference.g
        || ds.d_v != reference.d_v
        || ds.token_vocab != reference.token_vocab
    {
        return Err(CoreError::ArchitectureMismatch {
            msg: format!("dataset {name} disagrees with source_train on feature geometry"),
        });
    }
    Ok(())
}

fn fresh_model(cfg: &ExperimentConfig, prep: &PreparedData) -> Result<DualDomainModel> {
    let ds = &prep.pair.source_train;
    let mc = cfg.model_config(
        ds.k,
        ds.g,
        ds.d_v,
        ds.token_vocab as usize,
        prep.source_vocab.len(),
        prep.target_vocab.len(),
    );
    DualDomainModel::seeded(mc, cfg.seed)
}

/// Rebuilds the architecture stored in the checkpoint and loads its weights.
/// The checkpoint must agree with the data geometry and answer vocabularies.
fn restore_model(cfg: &ExperimentConfig, prep: &PreparedData) -> Result<DualDomainModel> {
    if cfg.checkpoint.is_empty() {
        return Err(CoreError::InvalidArgument(
            "this command needs checkpoint= pointing at a model file".into(),
        ));
    }
    let ds = &prep.pair.source_train;
    let ckpt = load_checkpoint(Path::new(&cfg.checkpoint)).map_err(|e| match e {
        CoreError::Io(io) => file_error("checkpoint", &cfg.checkpoint, io),
        other => other,
    })?;
    let mc = model_config_from_checkpoint(&ckpt, ds.k, ds.g, cfg.max_question_len)?;
    let stored = [
        ("d_v", mc.d_v, ds.d_v),
        ("token_vocab", mc.token_vocab, ds.token_vocab as usize),
        ("source classes", mc.source_classes, prep.source_vocab.len()),
        ("target classes", mc.target_classes, prep.target_vocab.len()),
    ];
    for (what, from_ckpt, from_data) in stored {
        if from_ckpt != from_data {
            return Err(CoreError::ArchitectureMismatch {
                msg: format!(
                    "checkpoint was trained with {what} {from_ckpt}, data has {from_data}"
                ),
            });
        }
    }
    let mut model = DualDomainModel::seeded(mc, cfg.seed)?;
    apply_checkpoint(&mut model, &ckpt)?;
    Ok(model)
}

// ── commands ──

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let pair = generate_domain_pair(&cfg.data)?;
    let files = [
        ("source_train.mmda", &pair.source_train),
        ("target_train.mmda", &pair.target_train),
        ("source_eval.mmda", &pair.source_eval),
        ("target_eval.mmda", &pair.target_eval),
    ];
    let mut manifest = String::new();
    for (name, ds) in files {
        save_dataset(&out.join(name), ds)?;
        manifest.push_str(&format!("{}={}\n", name.trim_end_matches(".mmda"), name));
        println!("wrote {} ({} samples)", out.join(name).display(), ds.len());
    }
    manifest.push_str(&format!(
        "k={}\ng={}\nd_v={}\ntoken_vocab={}\nanswer_vocab={}\ndata_seed={}\nreverse_direction={}\n",
        pair.source_train.k,
        pair.source_train.g,
        pair.source_train.d_v,
        pair.source_train.token_vocab,
        cfg.data.answer_vocab,
        cfg.data.seed,
        cfg.data.reverse_direction,
    ));
    std::fs::write(out.join("manifest.txt"), manifest)?;
    println!("wrote {}", out.join("manifest.txt").display());
    Ok(())
}

fn print_rows(rows: &[IterRow]) {
    for r in rows {
        println!(
            "iter {:>6}  lr {:.6}  cls {:.4}  total {:.4}",
            r.iter, r.lr, r.loss_cls, r.total
        );
    }
}

fn report_line(split: &str, r: &EvalReport) -> String {
    format!(
        "{split}: overall {:.4}  yes/no {:.4}  number {:.4}  other {:.4}  answerable {:.4}  ({} samples)",
        r.overall, r.yes_no, r.number, r.other, r.answerable, r.sample_count
    )
}

fn save_model(cfg: &ExperimentConfig, out: &Path, model: &DualDomainModel) -> Result<()> {
    let path = out.join("model.ckpt");
    save_checkpoint(&path, model, &print_config(cfg))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_source(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    let mut model = if cfg.checkpoint.is_empty() {
        fresh_model(cfg, &prep)?
    } else {
        restore_model(cfg, &prep)?
    };
    let mut settings = cfg.train_settings();
    settings.iterations = cfg.pretrain_iterations;
    let rows = pretrain_source(&mut model, &prep.pair.source_train, &prep.source_vocab, &settings)?;
    print_rows(&rows);
    model.warm_start_target_head(&prep.shared_pairs)?;
    println!(
        "warm-started target head on {} shared answers",
        prep.shared_pairs.len()
    );
    write_run_csv(&out.join("run.csv"), &rows)?;
    println!("wrote {}", out.join("run.csv").display());
    save_model(cfg, out, &model)
}

fn train_on_target(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    let target_train = split_fraction(&prep.pair.target_train, cfg.target_fraction, cfg.seed);
    println!(
        "training on {} of {} target samples",
        target_train.len(),
        prep.pair.target_train.len()
    );

    let mut model = match cfg.mode {
        Mode::TargetOnly => {
            if !cfg.checkpoint.is_empty() {
                return Err(CoreError::InvalidArgument(
                    "target-only trains from a fresh initialization; drop checkpoint=".into(),
                ));
            }
            fresh_model(cfg, &prep)?
        }
        _ if cfg.checkpoint.is_empty() => fresh_model(cfg, &prep)?,
        _ => restore_model(cfg, &prep)?,
    };

    let settings = cfg.train_settings();
    let rows = match cfg.mode {
        Mode::Adapt => adapt(
            &mut model,
            &prep.pair.source_train,
            &prep.source_vocab,
            &target_train,
            &prep.target_vocab,
            &settings,
        )?,
        Mode::Finetune => finetune(&mut model, &target_train, &prep.target_vocab, &settings)?,
        _ => train_target_only(&mut model, &target_train, &prep.target_vocab, &settings)?,
    };
    print_rows(&rows);
    write_run_csv(&out.join("run.csv"), &rows)?;
    println!("wrote {}", out.join("run.csv").display());

    if !prep.pair.target_eval.is_empty() {
        let report = evaluate(&model, &prep.pair.target_eval, &prep.target_vocab, Head::Target)?;
        write_eval_csv(&out.join("eval.csv"), &[("target", report)])?;
        println!("{}", report_line("target", &report));
    }
    save_model(cfg, out, &model)
}

fn eval_checkpoint(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    let model = restore_model(cfg, &prep)?;
    let mut rows: Vec<(&str, EvalReport)> = Vec::new();
    if !prep.pair.target_eval.is_empty() {
        let r = evaluate(&model, &prep.pair.target_eval, &prep.target_vocab, Head::Target)?;
        rows.push(("target", r));
    }
    if !prep.pair.source_eval.is_empty() {
        let r = evaluate(&model, &prep.pair.source_eval, &prep.source_vocab, Head::Source)?;
        rows.push(("source", r));
    }
    if rows.is_empty() {
        return Err(CoreError::InvalidArgument(
            "both evaluation splits are empty".into(),
        ));
    }
    for (split, r) in &rows {
        println!("{}", report_line(split, r));
    }
    write_eval_csv(&out.join("eval.csv"), &rows)?;
    println!("wrote {}", out.join("eval.csv").display());
    Ok(())
}

fn probe_checkpoint(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    if prep.pair.source_eval.is_empty() || prep.pair.target_eval.is_empty() {
        return Err(CoreError::InvalidArgument(
            "probing needs non-empty source_eval and target_eval splits".into(),
        ));
    }
    let model = restore_model(cfg, &prep)?;
    let source = joint_embeddings(&model, &prep.pair.source_eval)?;
    let target = joint_embeddings(&model, &prep.pair.target_eval)?;
    let probe = probe_domain_gap(&source, &target, &cfg.kernel, cfg.seed)?;
    std::fs::write(
        out.join("probe.csv"),
        format!("mmd_sq,probe_accuracy\n{},{}\n", probe.mmd_sq, probe.accuracy),
    )?;
    println!(
        "probe: mmd_sq {:.6}  accuracy {:.4}",
        probe.mmd_sq, probe.accuracy
    );
    println!("wrote {}", out.join("probe.csv").display());
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    let protocol = Protocol::from_config(cfg);
    let rows = run_ablation(&protocol, &prep, cfg.seed, cfg.ensemble_size)?;
    let text = ablation_csv(&rows);
    std::fs::write(out.join("ablation.csv"), &text)?;
    print!("{text}");
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn fraction_study(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let prep = load_pair(cfg)?;
    let protocol = Protocol::from_config(cfg);
    let rows = run_fraction_study(&protocol, &prep, cfg.seed)?;
    let text = fraction_csv(&rows);
    std::fs::write(out.join("fractions.csv"), &text)?;
    print!("{text}");
    println!("wrote {}", out.join("fractions.csv").display());
    Ok(())
}
