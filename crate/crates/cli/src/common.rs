use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use relaxqp::engine::Fault;
use relaxqp::policy::{PolicyCheckpoint, Variant};
use relaxqp::{FixedRelaxation, RelaxationPolicy, SolverConfig};

use crate::{OnOff, PolicyKind, SolverArgs};

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_MAX_ITER: u8 = 2;
pub const EXIT_BENCH_FAILURES: u8 = 3;
pub const EXIT_THEORY_VIOLATION: u8 = 4;

impl SolverArgs {
    pub fn config(&self) -> Result<SolverConfig> {
        self.resolve(SolverConfig::default())
    }

    /// `--config` if given, else `base`, then the individual overrides.
    pub fn resolve(&self, base: SolverConfig) -> Result<SolverConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                SolverConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.max_iter {
            cfg.max_iter = k;
        }
        if let Some(mode) = self.adaptive_rho {
            cfg.adaptive_rho = mode == OnOff::On;
        }
        if self.inject_fault {
            cfg.fault = Some(Fault::FlipRelaxationSign);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Resolves `--policy` and `--checkpoint` into a policy. Without `--policy`
/// a checkpoint's own variant is used, otherwise the fixed baseline.
pub fn load_policy(
    kind: Option<PolicyKind>,
    checkpoint: Option<&Path>,
    cfg: &SolverConfig,
) -> Result<Arc<dyn RelaxationPolicy>> {
    let fixed = || Arc::new(FixedRelaxation(cfg.alpha0)) as Arc<dyn RelaxationPolicy>;
    match (kind, checkpoint) {
        (Some(PolicyKind::Fixed), _) | (None, None) => Ok(fixed()),
        (Some(k), None) => bail!("--policy {k:?} needs --checkpoint"),
        (k, Some(path)) => {
            let ckpt = PolicyCheckpoint::load(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let want = match k {
                Some(PolicyKind::Scalar) => Some(Variant::Scalar),
                Some(PolicyKind::Vector) => Some(Variant::Vector),
                _ => None,
            };
            if let Some(v) = want {
                if v != ckpt.variant {
                    bail!("{} holds a {} policy", path.display(), ckpt.variant.name());
                }
            }
            Ok(Arc::new(ckpt))
        }
    }
}

pub fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j.max(1));
    }
    Ok(b.build()?)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Machine-readable float: 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `text` to `out/name`, or to standard output without `--out`.
pub fn emit(out: Option<&PathBuf>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

/// Directory that relative manifest paths resolve against.
pub fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
