//! Content-addressed result cache. Keys hash the stage name, the code version and the
//! stage's inputs; entries are written to a temporary file and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CACHE_ENV: &str = "DWE_LAB_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: String,
    stage: String,
    payload: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit,
    Miss,
    /// The entry existed but could not be decoded; it was removed.
    Corrupt,
    Disabled,
}

#[derive(Clone, Debug)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn disabled() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    /// `$DWE_LAB_CACHE_DIR`, else `<out>/.cache`.
    pub fn from_env(out: &Path) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Self::at(PathBuf::from(d)),
            _ => Self::at(out.join(".cache")),
        }
    }

    pub fn enabled(&self) -> bool {
        self.dir.is_some()
    }

    pub fn key<K: Serialize>(stage: &str, inputs: &K) -> String {
        let mut h = Sha256::new();
        h.update(CODE_VERSION.as_bytes());
        h.update([0]);
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(inputs).expect("cache inputs serialize"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path(&self, stage: &str, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}-{key}.json")))
    }

    pub fn get<T: DeserializeOwned>(&self, stage: &str, key: &str) -> (Option<T>, Lookup) {
        let Some(path) = self.path(stage, key) else { return (None, Lookup::Disabled) };
        let Ok(bytes) = fs::read(&path) else { return (None, Lookup::Miss) };
        match serde_json::from_slice::<Envelope<T>>(&bytes) {
            Ok(env) if env.version == CODE_VERSION && env.stage == stage => (Some(env.payload), Lookup::Hit),
            Ok(_) => (None, Lookup::Miss),
            Err(e) => {
                eprintln!("warning: cache entry {} is corrupt ({e}); recomputing", path.display());
                let _ = fs::remove_file(&path);
                (None, Lookup::Corrupt)
            }
        }
    }

    pub fn put<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> std::io::Result<()> {
        let Some(path) = self.path(stage, key) else { return Ok(()) };
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let env = Envelope { version: CODE_VERSION.to_string(), stage: stage.to_string(), payload: value };
        let tmp = dir.join(format!(".{stage}-{key}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&env).map_err(std::io::Error::other)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)
    }

    /// Cached value or `compute()`, storing fresh results.
    pub fn get_or_compute<T, E>(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T, E>,
    ) -> Result<(T, Lookup), E>
    where
        T: Serialize + DeserializeOwned,
    {
        let (hit, lookup) = self.get(stage, key);
        if let Some(v) = hit {
            return Ok((v, lookup));
        }
        let v = compute()?;
        if let Err(e) = self.put(stage, key, &v) {
            eprintln!("warning: could not write cache entry for {stage}: {e}");
        }
        Ok((v, lookup))
    }
}
