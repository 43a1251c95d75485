//! Run configuration files and dotted-key overrides.
//!
//! Training runs are described by a TOML file with `[train]`, `[model]`
//! and `[data]` tables; data generation by a `[gen]` table. `--set a.b=v`
//! overrides rewrite the parsed document before deserialization, so a
//! sweep is a list of one-line overrides over one checked-in file.

use serde::{Deserialize, Serialize};
use std::path::Path;

use scpl_core::data::{gen_blobs, load_csv, load_idx, split_two_to_one, Dataset};
use scpl_core::layers::HeadKind;
use scpl_core::network::{build_from_template, BuildOptions, NetworkTemplate, ScplNetwork};
use scpl_core::trainers::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub data: DataSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub template: TemplateKind,
    /// mlp only: [input, hidden..., classes]
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default = "default_head")]
    pub projection_head: HeadKind,
}

fn default_head() -> HeadKind {
    HeadKind::Mlp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Mlp,
    VanillaConvnet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: String,
        label_column: String,
    },
    Idx {
        images: String,
        labels: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenFile {
    pub gen: GenSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    /// Output CSV file name, relative to the output directory.
    #[serde(default = "default_gen_name")]
    pub name: String,
}

fn default_gen_name() -> String {
    "blobs.csv".to_string()
}

impl RunSpec {
    pub fn network_template(&self) -> Result<NetworkTemplate, String> {
        match self.model.template {
            TemplateKind::Mlp => {
                if self.model.dims.len() < 2 {
                    return Err("model.dims needs at least [input, classes]".to_string());
                }
                Ok(NetworkTemplate::Mlp { dims: self.model.dims.clone() })
            }
            TemplateKind::VanillaConvnet => Ok(NetworkTemplate::VanillaConvnet),
        }
    }

    pub fn build_network(&self) -> Result<ScplNetwork, String> {
        let template = self.network_template()?;
        let options = BuildOptions {
            head: self.model.projection_head,
            tau: self.train.tau,
            variant: self.train.loss_variant,
            objective: self.train.strategy.objective_kind(),
        };
        build_from_template(&template, &options, self.train.seed).map_err(|e| e.to_string())
    }

    pub fn load_dataset(&self, config_dir: &Path) -> Result<Dataset, String> {
        let resolve = |p: &str| -> std::path::PathBuf {
            let path = Path::new(p);
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                config_dir.join(path)
            }
        };
        match &self.data {
            DataSpec::Blobs { classes, dim, per_class, spread, seed } => gen_blobs(
                *classes,
                *dim,
                *per_class,
                *spread,
                seed.unwrap_or(self.train.seed),
            )
            .map_err(|e| e.to_string()),
            DataSpec::Csv { path, label_column } => {
                let mut d =
                    load_csv(&resolve(path), label_column).map_err(|e| e.to_string())?;
                split_two_to_one(&mut d);
                Ok(d)
            }
            DataSpec::Idx { images, labels } => {
                let mut d =
                    load_idx(&resolve(images), &resolve(labels)).map_err(|e| e.to_string())?;
                split_two_to_one(&mut d);
                Ok(d)
            }
        }
    }

}

/// Apply `--set a.b.c=value` overrides to a parsed TOML document. The parent
/// path must already exist (a typo in the table name is an error); the value
/// is parsed as a TOML literal, falling back to a plain string.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), String> {
    for spec in overrides {
        let (path, raw_value) = spec
            .split_once('=')
            .ok_or_else(|| format!("override {spec:?} is not of the form key=value"))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(format!("override key {path:?} has empty segments"));
        }
        let value = parse_toml_value(raw_value.trim())?;
        let mut table = &mut *doc;
        for key in &keys[..keys.len() - 1] {
            table = table
                .get_mut(*key)
                .ok_or_else(|| format!("override {path:?}: no table {key:?} in config"))?
                .as_table_mut()
                .ok_or_else(|| format!("override {path:?}: {key:?} is not a table"))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_toml_value(raw: &str) -> Result<toml::Value, String> {
    let snippet = format!("v = {raw}");
    match snippet.parse::<toml::Table>() {
        Ok(mut t) => Ok(t.remove("v").expect("just inserted")),
        Err(_) => Ok(toml::Value::String(raw.to_string())),
    }
}

/// Parse a config file with overrides into `T`, returning the resolved
/// document text alongside (for the config echo).
pub fn load_with_overrides<T: serde::de::DeserializeOwned>(
    path: &Path,
    overrides: &[String],
) -> Result<(T, String), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut doc: toml::Table =
        text.parse().map_err(|e| format!("config parse error: {e}"))?;
    apply_overrides(&mut doc, overrides)?;
    let resolved =
        toml::to_string_pretty(&doc).map_err(|e| format!("config re-encode: {e}"))?;
    let value: T = doc.try_into().map_err(|e| format!("config: {e}"))?;
    Ok((value, resolved))
}
