//! The `dmoe` command line: one subcommand per pipeline stage.
//!
//! Every stage reads a [`RunConfig`] (file plus overrides), writes its
//! outputs into the output directory together with the resolved config, and
//! exits 0 on success, 1 on invalid configuration or runtime failure and 2
//! on usage errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adapt::{adapt, reorder_checkpoint, write_adapt_log, AdaptOutcome, ReorderedModel};
use crate::analysis::{analyze, dense_perplexity, expert_usage, perplexity, EvalMode};
use crate::checkpoint::{split_container, Checkpoint, LoadedModel};
use crate::config::{parse_override, RunConfig};
use crate::corpus::{calibration_batches, eval_batches, Corpus, TokenBatch, Vocab};
use crate::error::{Error, Result};
use crate::pretrain::{heldout_loss, pretrain, write_loss_csv};
use crate::tensor::{DType, Real};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DMOE_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "dmoe",
    version,
    about = "Difficulty-routed nested experts workbench"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $DMOE_OUT_DIR, else ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. --set adapt.lr=1e-4. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Training text file (overrides `corpus`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Input checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reorder a dense checkpoint first instead of rejecting it.
    #[arg(long)]
    pub auto_reorder: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense base model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sort MLP hidden units of a dense checkpoint by importance.
    Reorder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Adapt a reordered checkpoint at one θ.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adapt one model per θ from the same reordered base.
    Family {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Held-out perplexity of any checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Text to evaluate on (default: the corpus held-out split).
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Confusion matrix, expert usage and metrics of an adapted checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Label threshold (default: the checkpoint's training θ).
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Train with and without the router loss and compare expert usage.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        steps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Reorder { .. } => "reorder",
            Command::Adapt { .. } => "adapt",
            Command::Family { .. } => "family",
            Command::Eval { .. } => "eval",
            Command::Analyze { .. } => "analyze",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Pretrain { common, .. }
            | Command::Reorder { common, .. }
            | Command::Adapt { common, .. }
            | Command::Family { common, .. }
            | Command::Eval { common, .. }
            | Command::Analyze { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    /// Config overrides implied by the subcommand's own flags.
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let c = self.common();
        let mut out = Vec::new();
        for s in &c.set {
            out.push(parse_override(s)?);
        }
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(p) = &c.corpus {
            push("corpus", serde_json::to_string(p)?);
        }
        if let Some(s) = c.seed {
            push("seed", s.to_string());
        }
        if let Some(p) = &c.precision {
            push("precision", p.clone());
        }
        match self {
            Command::Pretrain { steps: Some(s), .. } => push("pretrain.steps", s.to_string()),
            Command::Adapt { theta, steps, .. } => {
                if let Some(t) = theta {
                    push("adapt.theta", t.to_string());
                }
                if let Some(s) = steps {
                    push("adapt.steps", s.to_string());
                }
            }
            Command::Family { thetas, steps, .. } => {
                if let Some(t) = thetas {
                    push("adapt.thetas", serde_json::to_string(t)?);
                }
                if let Some(s) = steps {
                    push("adapt.steps", s.to_string());
                }
            }
            Command::Ablate { steps: Some(s), .. } => push("adapt.steps", s.to_string()),
            _ => {}
        }
        Ok(out)
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one parsed command.
pub fn execute(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = RunConfig::resolve(common.config.as_deref(), &cmd.overrides()?)?;
    let out = output_dir(common.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(
        &out.join(format!("{}_config.json", cmd.name())),
        cfg.to_json()?.as_bytes(),
    )?;
    let dtype = match cmd {
        Command::Pretrain { .. } => cfg.precision,
        Command::Reorder { ckpt, .. }
        | Command::Eval { ckpt, .. }
        | Command::Analyze { ckpt, .. }
        | Command::Adapt {
            source: Source { ckpt, .. },
            ..
        }
        | Command::Family {
            source: Source { ckpt, .. },
            ..
        }
        | Command::Ablate {
            source: Source { ckpt, .. },
            ..
        } => checkpoint_dtype(ckpt)?,
    };
    let stage = Stage {
        cfg: &cfg,
        out: &out,
    };
    match dtype {
        DType::F32 => stage.run::<f32>(cmd),
        DType::F64 => stage.run::<f64>(cmd),
    }
}

fn output_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, _) = split_container(&bytes)?;
    Ok(manifest.tensors.first().map_or(DType::F32, |t| t.dtype))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write(path, &buf)
}

/// File-name tag for a θ value.
pub fn theta_tag(theta: f64) -> String {
    format!("theta{theta}")
}

struct Stage<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
}

impl Stage<'_> {
    fn run<T: Real>(&self, cmd: &Command) -> Result<()> {
        match cmd {
            Command::Pretrain { .. } => self.pretrain::<T>(),
            Command::Reorder { ckpt, .. } => {
                let (dense, vocab) = self.load_dense::<T>(ckpt)?;
                let corpus = self.cfg.load_corpus(Some(&vocab))?;
                let reordered = self.reorder(&dense, &corpus)?;
                self.save_reordered(reordered, vocab)
            }
            Command::Adapt { source, .. } => {
                let (base, vocab, corpus) = self.reordered_source::<T>(source)?;
                let theta = self.cfg.adapt.theta;
                let outcome = adapt(&base, &corpus.train, &self.cfg.adapt_config())?;
                self.save_adapted(&outcome, &base, &vocab, &theta_tag(theta))
            }
            Command::Family { source, .. } => {
                let (base, vocab, corpus) = self.reordered_source::<T>(source)?;
                for &theta in &self.cfg.adapt.thetas {
                    let mut cfg = self.cfg.adapt_config();
                    cfg.theta = theta;
                    let outcome = adapt(&base, &corpus.train, &cfg)?;
                    self.save_adapted(&outcome, &base, &vocab, &theta_tag(theta))?;
                }
                Ok(())
            }
            Command::Eval { ckpt, eval, .. } => self.eval::<T>(ckpt, eval.as_deref()),
            Command::Analyze {
                ckpt, eval, theta, ..
            } => self.analyze::<T>(ckpt, eval.as_deref(), *theta),
            Command::Ablate { source, .. } => self.ablate::<T>(source),
        }
    }

    fn pretrain<T: Real>(&self) -> Result<()> {
        let corpus = self.cfg.load_corpus(None)?;
        let mc = self.cfg.model_config(corpus.vocab.size());
        let outcome = pretrain::<T>(&corpus.train, mc, &self.cfg.pretrain_config())?;
        write_with(&self.out.join("pretrain_loss.csv"), |b| {
            write_loss_csv(&outcome.curve, b)
        })?;
        let heldout = if corpus.heldout.len() >= self.cfg.eval.seq_len {
            Some(heldout_loss(
                &outcome.model,
                &corpus.heldout,
                self.cfg.eval.seq_len,
                self.cfg.eval.max_windows,
            )?)
        } else {
            None
        };
        let metrics = serde_json::json!({
            "vocab_size": corpus.vocab.size(),
            "ln_vocab": (corpus.vocab.size() as f64).ln(),
            "params": outcome.model.param_count(),
            "final_train_loss": outcome.curve.last().map(|c| c.1),
            "heldout_loss": heldout,
        });
        write(
            &self.out.join("pretrain_metrics.json"),
            serde_json::to_string_pretty(&metrics)?.as_bytes(),
        )?;
        Checkpoint::new(LoadedModel::Dense(outcome.model), Some(corpus.vocab))
            .save(&self.out.join("dense.ckpt"))?;
        eprintln!(
            "pretrain: heldout loss {heldout:?}, wrote {}",
            self.out.join("dense.ckpt").display()
        );
        Ok(())
    }

    fn load<T: Real>(&self, path: &Path) -> Result<(LoadedModel<T>, Vocab)> {
        let ck = Checkpoint::<T>::load(path)?;
        let vocab = ck
            .vocab
            .ok_or_else(|| Error::config(format!("{} carries no vocabulary", path.display())))?;
        Ok((ck.model, vocab))
    }

    fn load_dense<T: Real>(&self, path: &Path) -> Result<(crate::model::DenseModel<T>, Vocab)> {
        let (model, vocab) = self.load::<T>(path)?;
        match model {
            LoadedModel::Dense(m) => Ok((m, vocab)),
            other => Err(Error::config(format!(
                "{} is a {:?} checkpoint; reorder expects a dense one",
                path.display(),
                other.kind()
            ))),
        }
    }

    fn reorder<T: Real>(
        &self,
        dense: &crate::model::DenseModel<T>,
        corpus: &Corpus,
    ) -> Result<ReorderedModel<T>> {
        let r = &self.cfg.reorder;
        let calib = calibration_batches(
            &corpus.train,
            r.calib_fraction,
            8,
            r.calib_seq_len,
            self.cfg.seed,
        )?;
        reorder_checkpoint(dense, &calib)
    }

    fn save_reordered<T: Real>(&self, reordered: ReorderedModel<T>, vocab: Vocab) -> Result<()> {
        write_with(&self.out.join("importance.csv"), |b| {
            use std::io::Write;
            writeln!(b, "layer,unit,score")?;
            for (layer, s) in reordered.scores.iter().enumerate() {
                for (unit, v) in s.scores.iter().enumerate() {
                    writeln!(b, "{layer},{unit},{v}")?;
                }
            }
            Ok(())
        })?;
        let path = self.out.join("reordered.ckpt");
        Checkpoint::new(LoadedModel::Reordered(reordered), Some(vocab)).save(&path)?;
        eprintln!("reorder: wrote {}", path.display());
        Ok(())
    }

    /// Loads a reordered checkpoint, or reorders a dense one when allowed.
    fn reordered_source<T: Real>(
        &self,
        source: &Source,
    ) -> Result<(ReorderedModel<T>, Vocab, Corpus)> {
        let (model, vocab) = self.load::<T>(&source.ckpt)?;
        let corpus = self.cfg.load_corpus(Some(&vocab))?;
        let base = match model {
            LoadedModel::Reordered(r) => r,
            LoadedModel::Dense(d) if source.auto_reorder => self.reorder(&d, &corpus)?,
            LoadedModel::Dense(_) => {
                return Err(Error::config(format!(
                    "{} is not reordered; run `reorder` first or pass --auto-reorder",
                    source.ckpt.display()
                )))
            }
            LoadedModel::Adapted(..) => {
                return Err(Error::config(format!(
                    "{} is already adapted",
                    source.ckpt.display()
                )))
            }
        };
        Ok((base, vocab, corpus))
    }

    fn save_adapted<T: Real>(
        &self,
        outcome: &AdaptOutcome<T>,
        base: &ReorderedModel<T>,
        vocab: &Vocab,
        tag: &str,
    ) -> Result<()> {
        write_with(&self.out.join(format!("adapt_log_{tag}.csv")), |b| {
            write_adapt_log(&outcome.log, b)
        })?;
        let path = self.out.join(format!("adapted_{tag}.ckpt"));
        Checkpoint::new(
            LoadedModel::Adapted(outcome.model.clone(), base.scores.clone()),
            Some(vocab.clone()),
        )
        .save(&path)?;
        let acc = outcome.log.last().map_or(0.0, |r| r.router_acc);
        eprintln!(
            "adapt {tag}: final router acc {acc:.3} (training majority baseline {:.3}), wrote {}",
            outcome.majority_baseline(),
            path.display()
        );
        Ok(())
    }

    fn eval_set(&self, vocab: &Vocab, text: Option<&Path>) -> Result<Vec<TokenBatch>> {
        let tokens = match text {
            Some(p) => {
                let t = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                vocab.encode(&t)
            }
            None => self.cfg.load_corpus(Some(vocab))?.heldout,
        };
        let e = &self.cfg.eval;
        let batches = eval_batches(&tokens, e.batch_size, e.seq_len, e.max_windows);
        if batches.is_empty() {
            return Err(Error::config(format!(
                "evaluation text has {} tokens, fewer than one window of {}",
                tokens.len(),
                e.seq_len
            )));
        }
        Ok(batches)
    }

    fn eval<T: Real>(&self, ckpt: &Path, text: Option<&Path>) -> Result<()> {
        let (model, vocab) = self.load::<T>(ckpt)?;
        let batches = self.eval_set(&vocab, text)?;
        let metrics = match &model {
            LoadedModel::Adapted(a, _) => serde_json::json!({
                "kind": "adapted",
                "perplexity_dense": perplexity(a, &batches, EvalMode::Dense)?,
                "perplexity_routed": perplexity(a, &batches, EvalMode::Routed)?,
            }),
            other => serde_json::json!({
                "kind": format!("{:?}", other.kind()).to_lowercase(),
                "perplexity_dense": dense_perplexity(other.dense(), &batches)?,
            }),
        };
        write(
            &self.out.join("eval.json"),
            serde_json::to_string_pretty(&metrics)?.as_bytes(),
        )?;
        eprintln!("eval: {metrics}");
        Ok(())
    }

    fn analyze<T: Real>(&self, ckpt: &Path, text: Option<&Path>, theta: Option<f64>) -> Result<()> {
        let (model, vocab) = self.load::<T>(ckpt)?;
        let LoadedModel::Adapted(adapted, _) = model else {
            return Err(Error::config(format!(
                "{} is not an adapted checkpoint",
                ckpt.display()
            )));
        };
        let theta = theta.unwrap_or(adapted.meta.theta);
        let batches = self.eval_set(&vocab, text)?;
        let report = analyze(&adapted, &batches, theta)?;
        write_with(&self.out.join("confusion.csv"), |b| {
            report.confusion.write_csv(b)
        })?;
        write_with(&self.out.join("usage.csv"), |b| report.usage.write_csv(b))?;
        write(
            &self.out.join("metrics.json"),
            serde_json::to_string_pretty(&report.metrics)?.as_bytes(),
        )?;
        eprintln!(
            "analyze: accuracy {:.3} (majority {:.3}), activated params {:.0} of {}",
            report.metrics.accuracy,
            report.metrics.majority_baseline,
            report.metrics.activated_params,
            report.metrics.full_params
        );
        Ok(())
    }

    fn ablate<T: Real>(&self, source: &Source) -> Result<()> {
        let (base, vocab, corpus) = self.reordered_source::<T>(source)?;
        let with_loss_cfg = self.cfg.adapt_config();
        let mut ablated_cfg = with_loss_cfg.clone();
        ablated_cfg.ablation_mode = true;
        ablated_cfg.lambda_router = 0.0;
        let with_loss = adapt(&base, &corpus.train, &with_loss_cfg)?;
        let ablated = adapt(&base, &corpus.train, &ablated_cfg)?;
        self.save_adapted(&with_loss, &base, &vocab, &theta_tag(with_loss_cfg.theta))?;
        self.save_adapted(&ablated, &base, &vocab, "ablation")?;
        let batches = self.eval_set(&vocab, None)?;
        let u_with = expert_usage(&with_loss.model, &batches)?;
        let u_abl = expert_usage(&ablated.model, &batches)?;
        write_with(&self.out.join("usage_router_loss.csv"), |b| {
            u_with.write_csv(b)
        })?;
        write_with(&self.out.join("usage_ablation.csv"), |b| u_abl.write_csv(b))?;
        let summary = serde_json::json!({
            "theta": with_loss_cfg.theta,
            "entropy_with_router_loss": u_with.mean_entropy(),
            "entropy_ablated": u_abl.mean_entropy(),
        });
        write(
            &self.out.join("ablation.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
        eprintln!("ablate: {summary}");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["dmoe", "frobnicate"]), 2);
        assert_eq!(run(["dmoe", "pretrain", "--bogus"]), 2);
        assert_eq!(run(["dmoe"]), 2);
    }

    #[test]
    fn invalid_config_exits_1() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(
            run(["dmoe", "pretrain", "--out", out, "--set", "adapt.theta=1.5"]),
            1
        );
        assert_eq!(
            run(["dmoe", "pretrain", "--out", out, "--set", "nonsense=1"]),
            1
        );
    }

    #[test]
    fn family_flag_sets_thetas() {
        let cli = Cli::try_parse_from(["dmoe", "family", "--ckpt", "x", "--thetas", "0.7,0.8,0.9"])
            .unwrap();
        let ov = cli.command.overrides().unwrap();
        assert!(ov.contains(&("adapt.thetas".to_string(), "[0.7,0.8,0.9]".to_string())));
    }

    #[test]
    fn theta_tags() {
        assert_eq!(theta_tag(0.8), "theta0.8");
    }
}
