use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use tubekin::io::{self, Config, DatasetManifest, ThresholdMode};
use tubekin::parameterize::SurfaceLabel;
use tubekin::pipeline::{self, Summary, Table1Row};
use tubekin::Result;

#[derive(Parser)]
#[command(name = "tubekin", version, about = "Grid parameterization and motion analysis of deforming tube sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load every mesh and check tube topology.
    Validate(Common),
    /// Build the per-frame grids and write them as OBJ files.
    Parameterize(Common),
    /// Run the full analysis and write images, tables and summary.json.
    Analyze(Common),
    /// Write a synthetic dataset with its analytic oracle.
    Synth(Common),
    /// Print the expansion/contraction row from a summary.json.
    Report {
        /// A summary.json file or the directory holding it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// TOML configuration; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Grid resolution around × along.
    #[arg(long, value_name = "NxM")]
    grid: Option<String>,
    #[arg(long)]
    no_clip: bool,
    /// Comma-separated subset of outer,inner,lumen.
    #[arg(long, value_delimiter = ',')]
    surfaces: Vec<Surface>,
    #[arg(long)]
    threshold: Option<Threshold>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Surface {
    Outer,
    Inner,
    Lumen,
}

#[derive(Clone, Copy, ValueEnum)]
enum Threshold {
    Gauss,
    P75,
    Both,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(grid) = &self.grid {
            (config.grid_n, config.grid_m) = io::parse_grid(grid)?;
        }
        if self.no_clip {
            config.clip = false;
        }
        if !self.surfaces.is_empty() {
            config.surfaces = self
                .surfaces
                .iter()
                .map(|s| match s {
                    Surface::Outer => SurfaceLabel::Outer,
                    Surface::Inner => SurfaceLabel::Inner,
                    Surface::Lumen => SurfaceLabel::Lumen,
                })
                .collect();
            if !config.surfaces.contains(&SurfaceLabel::Outer) {
                // Every grid hangs off the outer seam and planes.
                config.surfaces.insert(0, SurfaceLabel::Outer);
            }
        }
        if let Some(t) = self.threshold {
            config.threshold = match t {
                Threshold::Gauss => ThresholdMode::Gauss,
                Threshold::P75 => ThresholdMode::P75,
                Threshold::Both => ThresholdMode::Both,
            };
        }
        Ok(config)
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| tubekin::Error::Invalid("--manifest is required for this command".into()))
    }
}

fn load(common: &Common, config: &Config) -> Result<(DatasetManifest, io::Dataset)> {
    let path = common.manifest()?;
    let manifest = DatasetManifest::load(path).map_err(|e| e.in_stage("ingest", path.display().to_string()))?;
    let mut data = io::ingest(&manifest, &config.surfaces).map_err(|e| e.in_stage("ingest", path.display().to_string()))?;
    let reports = pipeline::validate_dataset(&mut data)?;
    info!("{} frames passed validation", reports.len());
    Ok((manifest, data))
}

fn print_table(rows: &[(String, Table1Row)]) {
    let mut header = vec!["subject".to_string()];
    header.extend(Table1Row::HEADER.iter().map(|s| s.to_string()));
    let mut lines = vec![header];
    lines.extend(rows.iter().map(|(name, row)| {
        let mut cells = vec![name.clone()];
        cells.extend(row.cells());
        cells
    }));
    let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    for line in lines {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        println!("{}", cells.join("  "));
    }
}

fn read_summary(path: &Path) -> Result<Summary> {
    let file = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| tubekin::Error::io(&file, e))?;
    serde_json::from_str(&text).map_err(|e| tubekin::Error::parse(&file, e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(common) => {
            let config = common.config()?;
            let (manifest, data) = load(&common, &config)?;
            println!("{}: {} frames, {} surfaces, tube topology ok", manifest.subject, data.outer.len(), config.surfaces.len());
        }
        Command::Parameterize(common) => {
            let config = common.config()?;
            let (_, data) = load(&common, &config)?;
            let grids = pipeline::parameterize_dataset(&data, &config)?;
            for label in SurfaceLabel::ALL {
                let Some(frames) = grids.get(label) else { continue };
                for (k, g) in frames.iter().enumerate() {
                    io::write_mesh(&common.out.join(format!("grids/{}_{k:03}.obj", label.name())), &g.to_mesh())?;
                }
            }
            io::write_json(&common.out.join("quality.json"), &grids.quality)?;
            println!("wrote {} outer grids at {}x{}", grids.outer.len(), config.grid_n, config.grid_m);
        }
        Command::Analyze(common) => {
            let config = common.config()?;
            let start = Instant::now();
            let summary = pipeline::run_pipeline(common.manifest()?, &config, &common.out)?;
            info!("analysis took {:.1} s", start.elapsed().as_secs_f64());
            print_table(&[(summary.subject.clone(), summary.table1)]);
        }
        Command::Synth(common) => {
            let config = common.config()?;
            let (path, _) = pipeline::write_synthetic(&config.synth, "synthetic", &common.out)?;
            println!("wrote {}", path.display());
        }
        Command::Report { out } => {
            let summary = read_summary(&out)?;
            print_table(&[(summary.subject.clone(), summary.table1)]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
