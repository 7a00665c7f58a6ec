use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// A failure reported as one `error[kind]: message` line.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub msg: String,
}

impl Failure {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Failure { kind, msg: msg.into() }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Failure::new("input", msg)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {}", self.kind, one_line)
    }
}

impl From<embrecon::Error> for Failure {
    fn from(e: embrecon::Error) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Defaults, overlaid by the JSON file when one is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new("io", format!("io error on {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new("config", format!("{}:{}: {e}", path.display(), e.line())))
}

/// Overrides config fields with the flags that were given.
macro_rules! apply {
    ($cfg:expr, $args:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $args.$field.clone() { $cfg.$field = v; } )*
    };
}
pub(crate) use apply;

pub fn version() -> &'static str {
    env!("EMBRECON_VERSION")
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: serde_json::Value,
    seeds: &'a BTreeMap<String, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_time_secs: f64,
    version: &'static str,
}

/// Tracks a command's inputs, outputs and seeds, and writes its manifest.
pub struct Ctx {
    pub out_dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    started: Instant,
}

fn canonical(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Ctx {
    pub fn new(out_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Failure::new("io", format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Ctx {
            out_dir: out_dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, p: &Path) -> CliResult<PathBuf> {
        if !p.is_file() {
            return Err(Failure::new("io", format!("missing input file {}", p.display())));
        }
        self.inputs.push(p.to_path_buf());
        Ok(p.to_path_buf())
    }

    /// Registers an output under the output directory; inputs are never overwritten.
    pub fn output(&mut self, name: &str) -> CliResult<PathBuf> {
        let p = self.out_dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Failure::new("io", format!("cannot create {}: {e}", parent.display())))?;
        }
        let c = canonical(&p);
        if self.inputs.iter().any(|i| canonical(i) == c) {
            return Err(Failure::input(format!("output {} would overwrite an input", p.display())));
        }
        self.outputs.push(p.clone());
        Ok(p)
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.output(name)?;
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new("json", e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| Failure::new("io", format!("io error on {}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        let p = self.output(name)?;
        std::fs::write(&p, text).map_err(|e| Failure::new("io", format!("io error on {}: {e}", p.display())))?;
        Ok(p)
    }

    pub fn finish<C: Serialize>(self, subcommand: &str, config: &C) -> CliResult<()> {
        let path = self.out_dir.join("manifest.json");
        let manifest = RunManifest {
            subcommand,
            config: serde_json::to_value(config).map_err(|e| Failure::new("json", e.to_string()))?,
            seeds: &self.seeds,
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            version: version(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::new("json", e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::new("io", format!("io error on {}: {e}", path.display())))
    }
}
