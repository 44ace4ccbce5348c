use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use evident_core::annotation::sessions_from_export;
use evident_core::corpus::synthetic::generate_synthetic;
use evident_core::corpus::{
    assign_splits, load_corpus, subsample_by, Corpus, SplitAssignment, SplitFractions, SplitName, SyntheticSpec,
};
use evident_core::embedder::Embedder;
use evident_core::eval::{
    annotation_stats, evidence_count_ablation, histograms, metric_report, multi_seed_eval, write_ablation_csv,
    write_histograms_csv, write_metrics_csv, write_usefulness_csv, MetricReport,
};
use evident_core::evidence::{default_queries, load_queries, read_evidence, write_evidence, PatientEvidence};
use evident_core::labeler::{label_sets, read_labels, write_labels, ConditionSet, Normalizer};
use evident_core::llm::MockFixtures;
use evident_core::nam::{train, Example, ModelCheckpoint, RiskModel, TrainConfig};
use evident_core::pipeline::{
    build_examples, encode, gather_evidence, label_timelines, run_seed, split_corpus, EvidenceSource, PipelineConfig,
};
use evident_core::ranker::{mark_duplicates, rank, RankError, Strategy};
use evident_service::{AppState, Catalog, CatalogPaths, STORE_DIR_ENV};
use serde::Serialize;

use crate::backends::BackendArgs;
use crate::{Command, CorpusArgs, Failure, ScoredArgs};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Ingest {
            corpus,
            splits,
            out_splits,
            fractions,
            seed,
        } => ingest(&corpus, splits.as_deref(), out_splits.as_deref(), &fractions, seed),
        Command::Synth {
            spec,
            patients,
            prevalence,
            seed,
            out,
            fixtures,
            truth,
        } => {
            let spec = match spec {
                Some(path) => read_json::<SyntheticSpec>(&path)?,
                None => SyntheticSpec::three_conditions(patients, prevalence),
            };
            let synthetic = generate_synthetic(&spec, seed)?;
            synthetic.corpus.write(&out)?;
            if let Some(path) = fixtures {
                write_json(&path, &MockFixtures::Rules(synthetic.fixture_rules))?;
            }
            if let Some(path) = truth {
                write_json(&path, &synthetic.truth)?;
            }
            print_json(&serde_json::json!({
                "patients": synthetic.corpus.patients.len(),
                "reports": synthetic.corpus.report_count(),
            }))
        }
        Command::Retrieve {
            corpus,
            queries,
            all_ehr,
            backend,
            seed,
            out,
        } => {
            let timelines = select(&corpus, seed)?;
            let queries = match queries {
                Some(path) => load_queries(&path)?,
                None => default_queries(),
            };
            let source = match all_ehr {
                Some(limit) => EvidenceSource::AllEhr { limit },
                None => EvidenceSource::Llm,
            };
            let gateway = backend.gateway()?;
            let evidence = gather_evidence(&timelines.patients, &queries, source, &*gateway)?;
            write_evidence(&out, &evidence)?;
            print_json(&serde_json::json!({
                "patients": evidence.len(),
                "snippets": evidence.iter().map(|e| e.snippets.len()).sum::<usize>(),
            }))
        }
        Command::Label {
            corpus,
            backend,
            threshold,
            seed,
            out,
        } => {
            let timelines = select(&corpus, seed)?;
            let normalizer = Normalizer::new(ConditionSet::default(), backend.similarity()?)?.with_threshold(threshold);
            let gateway = backend.gateway()?;
            let labels = label_timelines(&timelines.patients, &normalizer, &*gateway);
            write_labels(&out, &labels)?;
            let mut per_condition: BTreeMap<&str, usize> = BTreeMap::new();
            for l in &labels {
                *per_condition.entry(l.condition.as_str()).or_default() += 1;
            }
            print_json(&serde_json::json!({
                "patients": timelines.patients.len(),
                "labels": per_condition,
            }))
        }
        Command::Train {
            labels,
            evidence,
            validation_evidence,
            epochs,
            lr,
            batch_size,
            negative_rate,
            conditions,
            backend,
            seed,
            out,
        } => {
            let conditions = match conditions {
                Some(list) => ConditionSet::new(list.split(',').map(|c| c.trim().to_string()).collect())
                    .map_err(|e| Failure::usage(e.to_string()))?,
                None => ConditionSet::default(),
            };
            let embedder = backend.features()?;
            let sets = label_sets(&read_labels(&labels)?);
            let train_evidence = subsample_by(
                read_evidence(&evidence)?,
                |pe| pe.patient_id.as_str(),
                |pe| sets.get(&pe.patient_id).is_some_and(|s| !s.is_empty()),
                negative_rate,
                seed,
            )?;
            let train_set = build_examples(&train_evidence, &sets, &conditions, &*embedder)?;
            let validation = build_examples(&read_evidence(&validation_evidence)?, &sets, &conditions, &*embedder)?;
            let config = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size,
                seed,
                ..TrainConfig::default()
            };
            let outcome = train(
                &train_set,
                &validation,
                &conditions,
                embedder.dimension(),
                embedder.id(),
                &config,
            )?;
            let best = outcome.history[outcome.best].clone();
            ModelCheckpoint::from_model(&outcome.model, Some(config), outcome.history.clone()).save(&out)?;
            print_json(&serde_json::json!({
                "train_examples": train_set.len(),
                "validation_examples": validation.len(),
                "checkpoints": outcome.history.len(),
                "best_checkpoint": best.index,
                "best_validation_macro_auroc": best.validation_macro_auroc,
            }))
        }
        Command::Predict {
            model,
            evidence,
            patient,
            backend,
        } => {
            let embedder = backend.features()?;
            let model = load_model(&model, &*embedder)?;
            let evidence = read_evidence(&evidence)?;
            let pe = find_patient(&evidence, &patient)?;
            let prediction = model.predict(&encode(&pe.snippets, &*embedder)?)?;
            print_json(&prediction)
        }
        Command::Rank {
            evidence,
            patient,
            strategy,
            model,
            backend,
            seed,
            out,
        } => {
            let strategy: Strategy = strategy.parse().map_err(|e: RankError| Failure::usage(e.to_string()))?;
            let evidence = read_evidence(&evidence)?;
            let pe = find_patient(&evidence, &patient)?;
            let (model, features) = match (strategy, model) {
                (Strategy::LogOdds, None) => return Err(Failure::usage("--strategy log_odds needs --model")),
                (Strategy::LogOdds, Some(path)) => {
                    let embedder = backend.features()?;
                    let model = load_model(&path, &*embedder)?;
                    let features = encode(&pe.snippets, &*embedder)?;
                    (Some(model), Some(features))
                }
                _ => (None, None),
            };
            let mut ranked = rank(&pe.snippets, features.as_deref(), model.as_ref(), strategy, Some(seed))?;
            mark_duplicates(&mut ranked);
            let mut body = String::new();
            for r in &ranked {
                body.push_str(&serde_json::to_string(&r.record())?);
                body.push('\n');
            }
            match out {
                Some(path) => write_file(&path, &body),
                None => emit(&body),
            }
        }
        Command::Eval {
            model,
            evidence,
            labels,
            seeds,
            corpus,
            fractions,
            split,
            all_ehr,
            epochs,
            lr,
            backend,
            threshold,
            seed,
            out,
        } => match (model, seeds) {
            (Some(model), None) => {
                let scored = ScoredArgs {
                    model,
                    evidence: evidence.expect("clap enforces --evidence"),
                    labels: labels.expect("clap enforces --labels"),
                };
                let (model, examples) = scored_examples(&scored, &backend)?;
                let report = metric_report(&model, &examples, threshold, seed)?;
                write_metrics_csv(&out, std::slice::from_ref(&report), None)?;
                print_json(&report)
            }
            (None, Some(seeds)) => {
                let seeds = parse_seeds(&seeds)?;
                let split: SplitName = split.parse().map_err(|e: String| Failure::usage(e))?;
                if !matches!(split, SplitName::Validation | SplitName::Test) {
                    return Err(Failure::usage("--split must be validation or test"));
                }
                let corpus = load_corpus(&corpus.expect("clap enforces --corpus"))?;
                let config = PipelineConfig {
                    fractions: parse_fractions(&fractions)?,
                    threshold,
                    evidence: match all_ehr {
                        Some(limit) => EvidenceSource::AllEhr { limit },
                        None => EvidenceSource::Llm,
                    },
                    train: TrainConfig {
                        epochs,
                        learning_rate: lr,
                        ..TrainConfig::default()
                    },
                    ..PipelineConfig::default()
                };
                let gateway = backend.gateway()?;
                let embedder = backend.features()?;
                let normalizer = Normalizer::new(config.conditions.clone(), backend.similarity()?)?;
                let mut reports: BTreeMap<u64, MetricReport> = BTreeMap::new();
                for &s in &seeds {
                    let run = run_seed(&corpus, &*gateway, &*embedder, &normalizer, &config, s)?;
                    let report = match split {
                        SplitName::Validation => run.validation_report,
                        _ => run
                            .test_report
                            .with_context(|| format!("seed {s}: the test split is empty"))?,
                    };
                    reports.insert(s, report);
                }
                let summary = multi_seed_eval(&seeds, |s| Ok(reports[&s].clone()))?;
                write_metrics_csv(&out, &summary.reports, Some(&summary))?;
                print_json(&summary.mean)
            }
            _ => Err(Failure::usage("eval needs either --model or --seeds")),
        },
        Command::AblateEvidence {
            scored,
            k,
            backend,
            threshold,
            seed,
            out,
        } => {
            let ks = parse_list::<usize>(&k, "--k")?;
            let (model, examples) = scored_examples(&scored, &backend)?;
            let ablation = evidence_count_ablation(&model, &examples, &ks, threshold, seed)?;
            write_ablation_csv(&out, &ablation)?;
            let macro_auroc: BTreeMap<usize, Option<f64>> =
                ablation.iter().map(|(k, r)| (*k, r.macro_avg.auroc)).collect();
            print_json(&macro_auroc)
        }
        Command::Histograms {
            scored,
            bins,
            backend,
            out,
        } => {
            if bins == 0 {
                return Err(Failure::usage("--bins must be positive"));
            }
            let (model, examples) = scored_examples(&scored, &backend)?;
            write_histograms_csv(&out, &histograms(&model, &examples, bins)?)?;
            Ok(())
        }
        Command::Stats {
            annotations,
            exclude_duplicates,
            out,
        } => {
            let text = read_file(&annotations)?;
            let sessions = sessions_from_export(&text).with_context(|| format!("parsing {}", annotations.display()))?;
            let stats = annotation_stats(&sessions, exclude_duplicates);
            write_usefulness_csv(&out, &stats)?;
            print_json(&stats)
        }
        Command::Queries { out } => write_json(&out, &default_queries()),
        Command::Serve {
            corpus,
            splits,
            evidence,
            labels,
            model,
            allehr_model,
            store_dir,
            host,
            port,
            backend,
            seed,
        } => {
            let paths = CatalogPaths {
                corpus,
                splits,
                evidence,
                labels,
                llm_model: model,
                allehr_model,
            }
            .with_env_model();
            let store_dir = store_dir
                .or_else(|| std::env::var_os(STORE_DIR_ENV).map(PathBuf::from))
                .ok_or_else(|| Failure::usage(format!("--store-dir or {STORE_DIR_ENV} is required")))?;
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Failure::usage(format!("invalid address {host}:{port}: {e}")))?;
            let embedder = backend.features()?;
            let catalog = Catalog::load(&paths, &*embedder, seed)?;
            log::info!(
                "serving {} patients with {} model variant(s) on {addr}",
                catalog.patients.len(),
                catalog.variants.len()
            );
            let state = Arc::new(AppState::open(catalog, &store_dir, seed)?);
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            runtime.block_on(evident_service::serve(state, addr))?;
            Ok(())
        }
    }
}

fn ingest(
    corpus_path: &Path,
    splits: Option<&Path>,
    out_splits: Option<&Path>,
    fractions: &str,
    seed: u64,
) -> Result<(), Failure> {
    let corpus = load_corpus(corpus_path)?;
    let assignment = match splits {
        Some(path) => {
            let a = SplitAssignment::load(path)?;
            a.validate(&corpus)?;
            a
        }
        None => assign_splits(&corpus, parse_fractions(fractions)?, seed)?,
    };
    if let Some(path) = out_splits {
        assignment.save(path)?;
    }
    let sizes: BTreeMap<SplitName, usize> = assignment.0.iter().map(|(k, v)| (*k, v.len())).collect();
    print_json(&serde_json::json!({
        "patients": corpus.patients.len(),
        "reports": corpus.report_count(),
        "splits": sizes,
    }))
}

/// Loads the corpus and splits, splits each timeline with `seed` and keeps
/// the requested patient splits.
fn select(args: &CorpusArgs, seed: u64) -> Result<Corpus, Failure> {
    let corpus = load_corpus(&args.corpus)?;
    let assignment = SplitAssignment::load(&args.splits)?;
    assignment.validate(&corpus)?;
    let names = parse_splits(&args.split)?;
    let split = split_corpus(&corpus, args.max_reports, seed);
    let ids: Vec<String> = names.iter().flat_map(|n| assignment.ids(*n).to_vec()).collect();
    Ok(Corpus {
        patients: split.subset(&ids),
    })
}

fn parse_splits(spec: &str) -> Result<Vec<SplitName>, Failure> {
    if spec == "all" {
        return Ok(vec![
            SplitName::Train,
            SplitName::Validation,
            SplitName::Test,
            SplitName::Annotation,
        ]);
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|e: String| Failure::usage(e)))
        .collect()
}

fn parse_list<T: std::str::FromStr>(spec: &str, flag: &str) -> Result<Vec<T>, Failure> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::usage(format!("{flag}: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_fractions(spec: &str) -> Result<SplitFractions, Failure> {
    match parse_list::<f64>(spec, "--fractions")?.as_slice() {
        &[train, validation, test, annotation] => Ok(SplitFractions {
            train,
            validation,
            test,
            annotation,
        }),
        _ => Err(Failure::usage("--fractions takes four comma-separated values")),
    }
}

/// `a..b` (inclusive) or a comma list.
fn parse_seeds(spec: &str) -> Result<Vec<u64>, Failure> {
    if let Some((a, b)) = spec.split_once("..") {
        let parse = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Failure::usage(format!("--seeds: cannot parse `{s}`")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a > b {
            return Err(Failure::usage(format!("--seeds: empty range {spec}")));
        }
        return Ok((a..=b).collect());
    }
    parse_list(spec, "--seeds")
}

fn load_model(path: &Path, embedder: &dyn Embedder) -> Result<RiskModel, Failure> {
    let model = ModelCheckpoint::load(path)?.model()?;
    if model.embedder_id != embedder.id() {
        return Err(anyhow::anyhow!(
            "model {} was trained with embedder `{}` but `{}` is selected",
            path.display(),
            model.embedder_id,
            embedder.id()
        )
        .into());
    }
    Ok(model)
}

fn scored_examples(args: &ScoredArgs, backend: &BackendArgs) -> Result<(RiskModel, Vec<Example>), Failure> {
    let embedder = backend.features()?;
    let model = load_model(&args.model, &*embedder)?;
    let sets = label_sets(&read_labels(&args.labels)?);
    let examples = build_examples(&read_evidence(&args.evidence)?, &sets, &model.conditions, &*embedder)?;
    Ok((model, examples))
}

fn find_patient<'a>(evidence: &'a [PatientEvidence], patient: &str) -> Result<&'a PatientEvidence, Failure> {
    evidence
        .iter()
        .find(|e| e.patient_id == patient)
        .ok_or_else(|| anyhow::anyhow!("no evidence for patient `{patient}`").into())
}

fn read_file(path: &Path) -> Result<String, Failure> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    Ok(fs::write(path, body).with_context(|| format!("writing {}", path.display()))?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = read_file(path)?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).context("writing to stdout").into()),
        _ => Ok(()),
    }
}
