use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use relaxqp::suite::{generate, Family, FamilySpec, InstanceEntry, InstanceStore, Manifest, Split};

use crate::common::{ensure_dir, thread_pool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Family name or `all`; repeatable.
    #[arg(long, required = true)]
    family: Vec<String>,

    /// Problem size; defaults to each family's desk size.
    #[arg(long)]
    size: Option<usize>,

    /// Instances per family.
    #[arg(long, default_value_t = 1)]
    count: usize,

    /// First instance seed; later instances take consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,

    /// Store root; receives manifest.json and family/size/seed/ directories.
    #[arg(long)]
    out: PathBuf,

    /// Write problems only and skip the reference solves.
    #[arg(long)]
    no_reference: bool,

    #[arg(long)]
    jobs: Option<usize>,
}

fn families(names: &[String]) -> Result<Vec<Family>> {
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(Family::ALL);
        } else {
            out.push(n.parse::<Family>()?);
        }
    }
    out.dedup();
    Ok(out)
}

pub fn run(args: GenerateArgs) -> Result<ExitCode> {
    let fams = families(&args.family)?;
    let specs: Vec<FamilySpec> = fams
        .iter()
        .flat_map(|&f| {
            let size = args.size.unwrap_or(f.desk_size());
            (0..args.count as u64)
                .map(move |i| FamilySpec::new(f, size, args.seed + i, args.split.into()))
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }

    ensure_dir(&args.out)?;
    let store = InstanceStore::new(&args.out);
    let pool = thread_pool(args.jobs)?;
    let instances: Vec<InstanceEntry> = pool.install(|| {
        specs
            .par_iter()
            .map(|spec| -> Result<InstanceEntry> {
                if !args.no_reference {
                    return store
                        .materialize(spec)
                        .with_context(|| format!("materializing {}", spec.instance_name()));
                }
                let rel = InstanceStore::relative_dir(spec);
                ensure_dir(&args.out.join(&rel))?;
                let path = rel.join("problem.json");
                generate(spec)?.save(&args.out.join(&path))?;
                Ok(InstanceEntry {
                    problem: Some(path),
                    ..InstanceEntry::generated(*spec)
                })
            })
            .collect::<Result<_>>()
    })?;

    let manifest = Manifest {
        seed: args.seed,
        instances,
    };
    manifest.validate()?;
    manifest.save(&args.out.join("manifest.json"))?;
    log::info!(
        "wrote {} instances to {}",
        manifest.instances.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
