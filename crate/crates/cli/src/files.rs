//! Plain-text list formats, output bookkeeping and error reporting for the subcommands.

use std::path::{Path, PathBuf};

use thubert::audio::read_fmat;
use thubert::text::{PhonemeVocab, SIL};
use thubert::util::{read_to_string, split_tab, write_atomic};
use thubert::FeatureMatrix;

#[derive(Debug)]
pub enum CliError {
    Core(thubert::Error),
    Usage(String),
    MissingInput(String),
}

impl From<thubert::Error> for CliError {
    fn from(e: thubert::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        use thubert::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingInput(_) => "missing_input",
            CliError::Core(e) => match e {
                E::Config(_) => "config",
                E::Parse { .. } => "parse",
                E::Format { .. } => "format",
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing_input",
                E::Io { .. } => "io",
                E::NonFinite(_) => "non_finite",
                E::Utterance { .. } => "utterance",
                E::Shape { .. } | E::InvalidArgument { .. } | E::NonScalarLoss(_) | E::NoHigherOrder(_) => "invalid",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) | CliError::MissingInput(m) => m.clone(),
        }
    }

    /// One JSON object per failure, e.g. `{"error":"config","message":"..."}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.message() }).to_string()
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "usage" | "config" | "parse" => 2,
            "missing_input" => 3,
            _ => 1,
        }
    }
}

pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{} does not exist", path.display())))
    }
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    require(path)?;
    Ok(read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| (n + 1, l.to_string()))
        .collect())
}

/// `utt<TAB>path.fmat` lines; relative paths resolve against the list's directory.
pub fn read_feature_list(path: &Path) -> Result<Vec<FeatureMatrix>, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    lines(path)?
        .into_iter()
        .map(|(n, l)| {
            let (id, file) = split_tab(&l);
            if file.is_empty() {
                return Err(thubert::Error::Parse { path: path.display().to_string(), line: n, msg: "expected utt<TAB>path".into() }.into());
            }
            let p = PathBuf::from(file.trim());
            let p = if p.is_absolute() || p.exists() { p } else { base.join(p) };
            require(&p)?;
            Ok(read_fmat(&p, 20, id)?)
        })
        .collect()
}

/// Phone inventory, one symbol per line; must contain the silence symbol.
pub fn read_phones(path: &Path) -> Result<PhonemeVocab, CliError> {
    let symbols = lines(path)?.into_iter().map(|(_, l)| l.trim().to_string()).collect();
    Ok(PhonemeVocab::new(symbols, SIL)?)
}

/// `(utt, transcript)` from a hypothesis file (`utt<TAB>text`) or a manifest
/// (`utt<TAB>wav<TAB>text`); the last column is the transcript.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    Ok(lines(path)?
        .into_iter()
        .map(|(_, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            let text = if cols.len() > 1 { cols[cols.len() - 1] } else { "" };
            (cols[0].to_string(), text.trim().to_string())
        })
        .collect())
}

/// Files produced by one subcommand; `finish` lists them in `<out>/MANIFEST`.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), files: Vec::new() }
    }

    pub fn add(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.add(&path);
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        let mut s = String::new();
        for f in &self.files {
            let bytes = std::fs::metadata(f).map(|m| m.len()).unwrap_or(0);
            s.push_str(&format!("{}\t{bytes}\n", f.display()));
        }
        write_atomic(&self.dir.join("MANIFEST"), s.as_bytes())?;
        Ok(())
    }
}
