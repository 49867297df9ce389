use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{StorageApi, StorageChange};

/// In-process store; every operation is recorded as a change.
#[derive(Debug, Default)]
pub struct MemoryStorage {
    entries: BTreeMap<String, String>,
    log: Vec<StorageChange>,
}

impl MemoryStorage {
    pub fn new() -> Self {
        Self::default()
    }
}

impl StorageApi for MemoryStorage {
    fn put(&mut self, path: &str, value: &str) {
        self.entries.insert(path.to_string(), value.to_string());
        self.log.push(StorageChange {
            path: path.to_string(),
            value: Some(value.to_string()),
        });
    }

    fn create(&mut self, path: &str, value: &str) -> Result<(), String> {
        if let Some(v) = self.entries.get(path) {
            return Err(v.clone());
        }
        self.put(path, value);
        Ok(())
    }

    fn get(&self, path: &str) -> Option<String> {
        self.entries.get(path).cloned()
    }

    fn delete(&mut self, path: &str) -> bool {
        let had = self.entries.remove(path).is_some();
        if had {
            self.log.push(StorageChange {
                path: path.to_string(),
                value: None,
            });
        }
        had
    }

    fn list(&self, prefix: &str) -> Vec<(String, String)> {
        self.entries
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn changes(&mut self) -> Vec<StorageChange> {
        std::mem::take(&mut self.log)
    }
}

/// One file per path under a root directory, shareable between processes.
/// Changes are found by rescanning the directory, so another process's
/// writes show up too.
#[derive(Debug)]
pub struct FileStorage {
    root: PathBuf,
    seen: BTreeMap<String, String>,
}

impl FileStorage {
    pub fn open(root: impl AsRef<Path>) -> std::io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut s = Self {
            root,
            seen: BTreeMap::new(),
        };
        s.seen = s.scan();
        Ok(s)
    }

    fn file(&self, path: &str) -> PathBuf {
        let name: String = url::form_urlencoded::byte_serialize(path.as_bytes()).collect();
        self.root.join(name)
    }

    fn scan(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let Ok(dir) = fs::read_dir(&self.root) else {
            return out;
        };
        for entry in dir.flatten() {
            let name = entry.file_name();
            let Some(name) = name.to_str() else {
                continue;
            };
            if name.starts_with('.') {
                continue;
            }
            let path: String = url::form_urlencoded::parse(format!("p={name}").as_bytes())
                .map(|(_, v)| v.into_owned())
                .next()
                .unwrap_or_default();
            if let Ok(v) = fs::read_to_string(entry.path()) {
                out.insert(path, v);
            }
        }
        out
    }

    fn write_atomic(&self, path: &str, value: &str) -> std::io::Result<()> {
        let target = self.file(path);
        let tmp = self.root.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            target.file_name().and_then(|n| n.to_str()).unwrap_or("x")
        ));
        fs::write(&tmp, value)?;
        fs::rename(tmp, target)
    }
}

impl StorageApi for FileStorage {
    fn put(&mut self, path: &str, value: &str) {
        // best effort: a failed write shows up as a missing change
        let _ = self.write_atomic(path, value);
    }

    fn create(&mut self, path: &str, value: &str) -> Result<(), String> {
        let file = self.file(path);
        match fs::OpenOptions::new().write(true).create_new(true).open(&file) {
            Ok(mut f) => {
                f.write_all(value.as_bytes()).map_err(|e| e.to_string())?;
                Ok(())
            }
            Err(_) => Err(fs::read_to_string(file).unwrap_or_default()),
        }
    }

    fn get(&self, path: &str) -> Option<String> {
        fs::read_to_string(self.file(path)).ok()
    }

    fn delete(&mut self, path: &str) -> bool {
        fs::remove_file(self.file(path)).is_ok()
    }

    fn list(&self, prefix: &str) -> Vec<(String, String)> {
        self.scan()
            .into_iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    fn changes(&mut self) -> Vec<StorageChange> {
        let now = self.scan();
        let mut out = Vec::new();
        for (k, v) in &now {
            if self.seen.get(k) != Some(v) {
                out.push(StorageChange {
                    path: k.clone(),
                    value: Some(v.clone()),
                });
            }
        }
        for k in self.seen.keys() {
            if !now.contains_key(k) {
                out.push(StorageChange {
                    path: k.clone(),
                    value: None,
                });
            }
        }
        self.seen = now;
        out
    }
}
