//! One function per subcommand. Each reads its inputs through a
//! [`Manifest`], writes its outputs through it, and finishes it.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};
use noniid::count_models::{fit_dirichlet_moment_match, transfer_curve, transfer_curve_csv, CountVector, MultinomialModel, PolyaModel};
use noniid::descriptors::{encode_descriptor_set, fit_pca, DatasetIndex, IndexEntry};
use noniid::encoder::{encode_fisher_vector, fit_whitening, stack, Pipeline, ScoreModel, SpmGrid};
use noniid::eval::{bootstrap_compare, evaluate, train_linear_svm, SvmOptions};
use noniid::gmm::{encode_stats, image_stats, train_gmm, GmmOptions};
use noniid::latent_mog::{init_latent_mog, train_latent_mog, TrainOptions};
use noniid::model_io::ModelFile;
use noniid::study::{generate_synthetic, loglik_vs_performance_sweep, sweep_csv, LabelledImage, SweepOptions, SynthSpec};
use noniid::topic_models::{count_matrix, fit_lda_from_plsa, fold_in, train_plsa, LdaOptions, PlsaOptions};
use rayon::prelude::*;

use crate::data::{entries, fv_path, labels, load_fvs, load_index, load_sets, load_stats, parse_split, sample_rows, stats_path};
use crate::manifest::{manifest_path, Manifest};
use crate::{Cli, Command, ModelKind, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PcaFit(a) => pca_fit(a),
        Command::GmmTrain(a) => gmm_train(a, seed(cli)?),
        Command::Stats(a) => stats(a),
        Command::FitPolya(a) => fit_polya(a),
        Command::PlsaTrain(a) => plsa_train(a, seed(cli)?),
        Command::LdaFit(a) => lda_fit(a),
        Command::LatmogInit(a) => latmog_init(a),
        Command::LatmogTrain(a) => latmog_train(a),
        Command::Encode(a) => encode(a),
        Command::SvmTrain(a) => svm_train(a, seed(cli)?),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a, seed(cli)?),
        Command::Sweep(a) => sweep(a, seed(cli)?),
        Command::Synth(a) => synth(a, seed(cli)?),
        Command::Curve(a) => curve(a),
    }
}

fn seed(cli: &Cli) -> Result<u64> {
    cli.seed
        .ok_or_else(|| UsageError("this command is stochastic and needs --seed".into()).into())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn start<T: serde::Serialize>(command: &str, args: &T, seed: Option<u64>) -> Manifest {
    let mut m = Manifest::new(command);
    m.args(args);
    if let Some(s) = seed {
        m.set("seed", s);
    }
    m
}

fn write_model(m: &mut Manifest, path: &Path, model: &ModelFile) -> Result<()> {
    m.write(path, model.to_json().as_bytes())
}

fn read_model(m: &mut Manifest, path: &Path) -> Result<ModelFile> {
    let text = m.read_string(path)?;
    ModelFile::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn finish_file(m: Manifest, out: &Path) -> Result<()> {
    m.finish(&manifest_path(out, false))
}

fn finish_dir(m: Manifest, out: &Path) -> Result<()> {
    m.finish(&manifest_path(out, true))
}

fn pca_fit(a: &crate::PcaFitArgs) -> Result<()> {
    let mut m = start("pca-fit", a, None);
    let index = load_index(&mut m, &a.index)?;
    let sets = load_sets(&mut m, &entries(&index, Some(parse_split(&a.split)?)), None)?;
    let sample = sample_rows(&sets, a.sample_cap)?;
    let pca = fit_pca(sample.view(), a.keep)?;
    write_model(&mut m, &a.out, &ModelFile::from(&pca))?;
    finish_file(m, &a.out)
}

fn load_pca(m: &mut Manifest, path: Option<&Path>) -> Result<Option<noniid::descriptors::PcaModel>> {
    match path {
        Some(p) => Ok(Some(read_model(m, p)?.pca()?)),
        None => Ok(None),
    }
}

fn gmm_train(a: &crate::GmmTrainArgs, seed: u64) -> Result<()> {
    let mut m = start("gmm-train", a, Some(seed));
    let index = load_index(&mut m, &a.index)?;
    let pca = load_pca(&mut m, a.pca.as_deref())?;
    let sets = load_sets(&mut m, &entries(&index, Some(parse_split(&a.split)?)), pca.as_ref())?;
    let sample = sample_rows(&sets, a.sample_cap)?;
    let opts = GmmOptions {
        n_components: a.k,
        seed,
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let fit = train_gmm(sample.view(), &opts)?;
    if !fit.converged {
        log::warn!("EM stopped after {} iterations without converging", a.max_iter);
    }
    m.set("result.mean_log_likelihood", fit.trace.last().copied().unwrap_or(f64::NAN));
    write_model(&mut m, &a.out, &ModelFile::from(&fit.model))?;
    finish_file(m, &a.out)
}

fn stats(a: &crate::StatsArgs) -> Result<()> {
    let mut m = start("stats", a, None);
    let index = load_index(&mut m, &a.index)?;
    let gmm = read_model(&mut m, &a.gmm)?.gmm()?;
    let pca = load_pca(&mut m, a.pca.as_deref())?;
    let all = entries(&index, None);
    let sets = load_sets(&mut m, &all, pca.as_ref())?;
    let encoded: Vec<Vec<u8>> = sets
        .par_iter()
        .map(|s| Ok(encode_stats(&image_stats(&gmm, s, a.clip)?)))
        .collect::<Result<_>>()?;
    for (e, bytes) in all.iter().zip(&encoded) {
        m.write(&stats_path(&a.out, &e.image_id), bytes)?;
    }
    finish_dir(m, &a.out)
}

/// Soft word counts (`s⁰`) of the images in `split`.
fn split_counts(m: &mut Manifest, index_path: &Path, stats_dir: &Path, split: &str) -> Result<(Vec<IndexEntry>, Vec<CountVector>, Vec<noniid::gmm::SufficientStats>)> {
    let index = load_index(m, index_path)?;
    let chosen = entries(&index, Some(parse_split(split)?));
    if chosen.is_empty() {
        bail!("no images in split '{split}'");
    }
    let stats = load_stats(m, stats_dir, &chosen)?;
    let counts = stats.iter().map(|s| CountVector::new(s.s0.clone())).collect::<noniid::Result<_>>()?;
    Ok((chosen, counts, stats))
}

fn fit_polya(a: &crate::FitPolyaArgs) -> Result<()> {
    let mut m = start("fit-polya", a, None);
    let (_, counts, _) = split_counts(&mut m, &a.index, &a.stats, &a.split)?;
    let nonempty: Vec<&CountVector> = counts.iter().filter(|c| c.total() > 0.0).collect();
    if nonempty.is_empty() {
        bail!("every training image is empty");
    }
    let k = nonempty[0].len();
    let mut rows = Array2::zeros((nonempty.len(), k));
    for (i, c) in nonempty.iter().enumerate() {
        rows.row_mut(i).assign(&(&c.counts() / c.total()));
    }
    let fit = fit_dirichlet_moment_match(rows.view(), Array1::ones(nonempty.len()).view())?;
    if fit.clamped {
        log::warn!("Dirichlet precision {} was clamped", fit.raw_precision);
    }
    m.set("result.precision", fit.model.precision());
    write_model(&mut m, &a.out, &ModelFile::from(&fit.model))?;
    finish_file(m, &a.out)
}

fn plsa_train(a: &crate::PlsaTrainArgs, seed: u64) -> Result<()> {
    let mut m = start("plsa-train", a, Some(seed));
    let (_, counts, _) = split_counts(&mut m, &a.index, &a.stats, &a.split)?;
    let x = count_matrix(&counts)?;
    let opts = PlsaOptions {
        topics: a.topics,
        seed,
        tol: a.tol,
        max_iter: a.max_iter,
    };
    let fit = train_plsa(x.view(), &opts)?;
    m.set("result.log_likelihood", fit.trace.last().copied().unwrap_or(f64::NAN));
    write_model(&mut m, &a.out, &ModelFile::from(&fit.model))?;
    finish_file(m, &a.out)
}

fn lda_fit(a: &crate::LdaFitArgs) -> Result<()> {
    let mut m = start("lda-fit", a, None);
    let (_, counts, _) = split_counts(&mut m, &a.index, &a.stats, &a.split)?;
    let plsa = read_model(&mut m, &a.plsa)?.plsa()?;
    let thetas: Vec<Array1<f64>> = counts
        .par_iter()
        .map(|c| Ok(fold_in(&plsa, c, 1e-8, 100_000)?.theta))
        .collect::<noniid::Result<_>>()?;
    let mut doc_topics = Array2::zeros((thetas.len(), plsa.n_topics()));
    for (i, t) in thetas.iter().enumerate() {
        doc_topics.row_mut(i).assign(t);
    }
    let fit = fit_lda_from_plsa(&plsa, doc_topics.view(), count_matrix(&counts)?.view())?;
    write_model(&mut m, &a.out, &ModelFile::from(&fit.model))?;
    finish_file(m, &a.out)
}

fn latmog_init(a: &crate::LatmogInitArgs) -> Result<()> {
    let mut m = start("latmog-init", a, None);
    let (_, _, stats) = split_counts(&mut m, &a.index, &a.stats, &a.split)?;
    let report = init_latent_mog(&stats, a.trunc)?;
    m.set("result.inactive_components", report.inactive.len());
    write_model(&mut m, &a.out, &ModelFile::from(&report.model))?;
    finish_file(m, &a.out)
}

fn latmog_train(a: &crate::LatmogTrainArgs, ) -> Result<()> {
    let mut m = start("latmog-train", a, None);
    let (_, _, stats) = split_counts(&mut m, &a.index, &a.stats, &a.split)?;
    let init = read_model(&mut m, &a.init)?.latmog()?;
    let opts = TrainOptions {
        outer_iters: a.iters,
        inner_steps: a.inner_steps,
        ..TrainOptions::default()
    };
    let report = train_latent_mog(&stats, &init, opts)?;
    m.set("result.summed_bound", report.trace.last().copied().unwrap_or(f64::NAN));
    m.set("result.line_search_failures", report.line_search_failures);
    write_model(&mut m, &a.out, &ModelFile::from(&report.model))?;
    finish_file(m, &a.out)
}

fn parse_levels(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let (c, r) = p
                .trim()
                .split_once('x')
                .ok_or_else(|| usage(format!("bad pyramid level '{p}', expected COLSxROWS")))?;
            Ok((c.parse().map_err(|_| usage(format!("bad level '{p}'")))?, r.parse().map_err(|_| usage(format!("bad level '{p}'")))?))
        })
        .collect()
}

fn encode(a: &crate::EncodeArgs) -> Result<()> {
    let mut m = start("encode", a, None);
    let index = load_index(&mut m, &a.index)?;
    let vocab = read_model(&mut m, &a.gmm)?.gmm()?;
    let pca = load_pca(&mut m, a.pca.as_deref())?;
    let model_file = |m: &mut Manifest| -> Result<ModelFile> {
        let path = a
            .model_file
            .as_deref()
            .ok_or_else(|| usage(format!("--model {:?} needs --model-file", a.model).to_lowercase()))?;
        read_model(m, path)
    };
    let model = match a.model {
        ModelKind::Bow => ScoreModel::Bow(MultinomialModel::from_probabilities(vocab.weights.view())?),
        ModelKind::Mog => ScoreModel::Mog,
        ModelKind::Polya => ScoreModel::Polya(model_file(&mut m)?.polya()?),
        ModelKind::Plsa => ScoreModel::Plsa(model_file(&mut m)?.plsa()?),
        ModelKind::Lda => ScoreModel::Lda(model_file(&mut m)?.lda()?, LdaOptions::default()),
        ModelKind::Latmog => ScoreModel::LatMog {
            model: model_file(&mut m)?.latmog()?,
            infer_assignments: a.infer_assignments,
        },
    };
    if !(0.0..=1.0).contains(&a.rho) {
        return Err(usage("--rho must lie in [0, 1]"));
    }
    let spm = match (&a.spm_levels, a.spm) {
        (Some(levels), _) => Some(SpmGrid::from_levels(&parse_levels(levels)?)?),
        (None, true) => Some(SpmGrid::default()),
        (None, false) => None,
    };
    let mut pipeline = Pipeline {
        vocab,
        model,
        clip: a.clip,
        spm,
        whitening: None,
        rho: a.rho,
    };
    let all = entries(&index, None);
    let sets = load_sets(&mut m, &all, pca.as_ref())?;
    let raw: Vec<_> = sets
        .par_iter()
        .map(|s| pipeline.raw_signature(s))
        .collect::<noniid::Result<_>>()?;
    if a.whiten {
        let train: Vec<_> = all
            .iter()
            .zip(&raw)
            .filter(|(e, _)| e.split == noniid::descriptors::Split::Train)
            .map(|(_, r)| r.clone())
            .collect();
        if train.len() < 2 {
            bail!("whitening needs at least two training images");
        }
        let w = fit_whitening(stack(&train)?.view())?;
        write_model(&mut m, &a.out.join("whitening.json"), &ModelFile::from(&w))?;
        pipeline.whitening = Some(w);
    }
    let encoded: Vec<Vec<u8>> = raw
        .into_par_iter()
        .map(|r| Ok(encode_fisher_vector(&pipeline.finalize(r)?)))
        .collect::<noniid::Result<_>>()?;
    for (e, bytes) in all.iter().zip(&encoded) {
        m.write(&fv_path(&a.out, &e.image_id), bytes)?;
    }
    finish_dir(m, &a.out)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("bad C value '{v}'"))))
        .collect::<Result<_>>()?;
    if grid.is_empty() || grid.iter().any(|c| !(*c > 0.0)) {
        return Err(usage("C values must be positive"));
    }
    Ok(grid)
}

fn svm_train(a: &crate::SvmTrainArgs, seed: u64) -> Result<()> {
    let mut m = start("svm-train", a, Some(seed));
    let index = load_index(&mut m, &a.index)?;
    let classes = index.classes();
    let chosen = entries(&index, Some(parse_split(&a.split)?));
    let x = stack(&load_fvs(&mut m, &a.fv, &chosen)?)?;
    let y = labels(&chosen, &classes)?;
    let opts = SvmOptions {
        c_grid: parse_grid(&a.c_grid)?,
        folds: a.folds,
        seed,
    };
    let model = train_linear_svm(x.view(), &y, a.metric.into(), &opts)?;
    m.set("result.c", model.c);
    write_model(&mut m, &a.out, &ModelFile::from_svm(&model, &classes))?;
    finish_file(m, &a.out)
}

fn eval(a: &crate::EvalArgs) -> Result<()> {
    let mut m = start("eval", a, None);
    let index = load_index(&mut m, &a.index)?;
    let (svm, classes) = read_model(&mut m, &a.svm)?.svm()?;
    let chosen = entries(&index, Some(parse_split(&a.split)?));
    let x = stack(&load_fvs(&mut m, &a.fv, &chosen)?)?;
    let y = labels(&chosen, &classes)?;
    let scores = svm.decision(x.view())?;
    let report = evaluate(scores.view(), &y, a.metric.into())?;
    let mut csv = String::from("class,metric\n");
    for (c, v) in classes.iter().zip(&report.per_class) {
        match v {
            Some(v) => writeln!(csv, "{c},{v}")?,
            None => writeln!(csv, "{c},")?,
        }
    }
    let metric = format!("{:?}", a.metric).to_lowercase();
    writeln!(csv, "mean,{}", report.mean)?;
    m.write(&a.out, csv.as_bytes())?;
    if let Some(p) = &a.predictions {
        let mut out = String::from("image_id,class,score\n");
        for (e, row) in chosen.iter().zip(scores.rows()) {
            for (c, s) in classes.iter().zip(row) {
                writeln!(out, "{},{c},{s}", e.image_id)?;
            }
        }
        m.write(p, out.as_bytes())?;
    }
    m.set("result.mean", report.mean);
    println!("{metric} mean={:.4} classes={} images={}", report.mean, classes.len(), chosen.len());
    finish_file(m, &a.out)
}

fn read_predictions(m: &mut Manifest, path: &Path, chosen: &[IndexEntry], classes: &[String]) -> Result<Array2<f64>> {
    let text = m.read_string(path)?;
    let mut map: HashMap<(&str, &str), f64> = HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            bail!("{} line {}: expected image_id,class,score", path.display(), i + 1);
        }
        let s: f64 = f[2].parse().with_context(|| format!("{} line {}", path.display(), i + 1))?;
        map.insert((f[0], f[1]), s);
    }
    let mut out = Array2::zeros((chosen.len(), classes.len()));
    for (i, e) in chosen.iter().enumerate() {
        for (k, c) in classes.iter().enumerate() {
            out[[i, k]] = *map
                .get(&(e.image_id.as_str(), c.as_str()))
                .ok_or_else(|| anyhow!("{} has no score for {} / {c}", path.display(), e.image_id))?;
        }
    }
    Ok(out)
}

fn compare(a: &crate::CompareArgs, seed: u64) -> Result<()> {
    let mut m = start("compare", a, Some(seed));
    let index = load_index(&mut m, &a.index)?;
    let classes = index.classes();
    let chosen = entries(&index, Some(parse_split(&a.split)?));
    let sa = read_predictions(&mut m, &a.a, &chosen, &classes)?;
    let sb = read_predictions(&mut m, &a.b, &chosen, &classes)?;
    let y = labels(&chosen, &classes)?;
    let metric = a.metric.into();
    let ra = evaluate(sa.view(), &y, metric)?;
    let rb = evaluate(sb.view(), &y, metric)?;
    if a.iters < 100 {
        return Err(usage("--iters must be at least 100"));
    }
    let res = bootstrap_compare(sa.view(), sb.view(), &y, metric, a.iters, seed)?;
    let mut csv = String::from("quantity,value\n");
    writeln!(csv, "a,{}", ra.mean)?;
    writeln!(csv, "b,{}", rb.mean)?;
    writeln!(csv, "delta,{}", res.delta)?;
    writeln!(csv, "ci_low,{}", res.ci.0)?;
    writeln!(csv, "ci_high,{}", res.ci.1)?;
    writeln!(csv, "equivalent,{}", res.equivalent)?;
    m.write(&a.out, csv.as_bytes())?;
    println!("{:<12}{:>10}", "system", "metric");
    println!("{:<12}{:>10.4}", "a", ra.mean);
    println!("{:<12}{:>10.4}", "b", rb.mean);
    println!(
        "delta {:+.4}  95% CI [{:+.4}, {:+.4}]  {}",
        res.delta,
        res.ci.0,
        res.ci.1,
        if res.equivalent { "equivalent" } else { "different" }
    );
    finish_file(m, &a.out)
}

fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let bad = || usage(format!("bad pair '{p}', expected DxK"));
            let (d, k) = p.trim().split_once('x').ok_or_else(bad)?;
            Ok((d.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?))
        })
        .collect()
}

fn sweep(a: &crate::SweepArgs, seed: u64) -> Result<()> {
    let mut m = start("sweep", a, Some(seed));
    let pairs = parse_pairs(&a.pairs)?;
    let index = load_index(&mut m, &a.index)?;
    let classes = index.classes();
    let labelled = |m: &mut Manifest, split| -> Result<Vec<LabelledImage>> {
        let chosen = entries(&index, Some(split));
        let sets = load_sets(m, &chosen, None)?;
        chosen
            .iter()
            .zip(sets)
            .map(|(e, set)| {
                let label = e.labels.first().ok_or_else(|| anyhow!("image {} has no label", e.image_id))?;
                let class = classes.iter().position(|c| c == label).expect("label from index");
                Ok(LabelledImage { set, class })
            })
            .collect()
    };
    let train = labelled(&mut m, noniid::descriptors::Split::Train)?;
    let heldout = labelled(&mut m, noniid::descriptors::Split::Test)?;
    let opts = SweepOptions {
        seed,
        loglik_sample_cap: a.loglik_cap,
        train_sample_cap: a.train_cap,
        svm: SvmOptions {
            seed,
            ..SvmOptions::default()
        },
    };
    let rows = loglik_vs_performance_sweep(&train, &heldout, &pairs, &opts)?;
    m.write(&a.out, sweep_csv(&rows).as_bytes())?;
    finish_file(m, &a.out)
}

fn synth(a: &crate::SynthArgs, seed: u64) -> Result<()> {
    let mut m = start("synth", a, Some(seed));
    let kind = a.kind.parse().map_err(|e: noniid::Error| usage(e.to_string()))?;
    let spec = SynthSpec {
        kind,
        n_classes: a.n_classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        descriptors_per_image: a.descriptors,
        vocab_size: a.vocab_size,
        dim: a.dim,
        topics: a.topics,
        precision: a.precision,
        class_shift: a.class_shift,
        base_concentration: a.base_concentration,
        codebook_scale: a.codebook_scale,
        word_noise: a.word_noise,
        beta: a.beta,
        gamma_shape: a.gamma_shape,
        gamma_rate: a.gamma_rate,
        seed,
    };
    let images = generate_synthetic(&spec)?;
    let mut entries = Vec::with_capacity(images.len());
    for img in &images {
        let rel = Path::new("desc").join(format!("{}.nifd", img.set.image_id));
        m.write(&a.out.join(&rel), &encode_descriptor_set(&img.set))?;
        entries.push(IndexEntry {
            image_id: img.set.image_id.clone(),
            path: rel,
            split: img.split,
            labels: vec![format!("c{}", img.class)],
        });
    }
    let index = DatasetIndex::new(entries)?;
    m.write(&a.out.join("index.tsv"), index.to_text().as_bytes())?;
    finish_dir(m, &a.out)
}

fn curve(a: &crate::CurveArgs) -> Result<()> {
    let mut m = start("curve", a, None);
    let (model, word) = match (a.alpha, &a.model_file) {
        (Some(alpha), None) => (PolyaModel::new(Array1::from_elem(1, alpha))?, 0),
        (None, Some(p)) => (read_model(&mut m, p)?.polya()?, a.word),
        _ => return Err(usage("curve needs exactly one of --alpha and --model-file")),
    };
    let points = transfer_curve(&model, word, a.n_max)?;
    m.write(&a.out, transfer_curve_csv(&points).as_bytes())?;
    finish_file(m, &a.out)
}
