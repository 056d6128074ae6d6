//! Run configuration: one TOML file describes a complete experiment, and
//! every run is reproducible from that file plus its seed. CLI flags
//! override individual keys by dotted path before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cae::ShardConfig;
use crate::graph::{generate_power_law, load_edge_list, CsrGraph, GraphPreset};
use crate::model::{ModelConfig, Variant};
use crate::partition::{PartitionConfig, PartitionMode};
use crate::{Error, Result};

fn default_true() -> bool {
    true
}

// ── Sections ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// "generator", "file", or "preset".
    pub source: String,
    /// Edge-list path for source = "file".
    pub path: Option<PathBuf>,
    /// Whether a loaded edge list is symmetrized on load.
    #[serde(default = "default_true")]
    pub symmetrize: bool,
    /// Preset name for source = "preset" (shape metadata only; the run
    /// generates a power-law graph with the preset's average degree,
    /// capped at `scale_vertices`).
    pub preset: Option<String>,
    #[serde(default = "GraphSection::default_vertices")]
    pub vertices: u32,
    #[serde(default = "GraphSection::default_avg_degree")]
    pub avg_degree: f64,
    #[serde(default = "GraphSection::default_scale_vertices")]
    pub scale_vertices: u32,
    /// Generator seed; falls back to the run seed.
    pub seed: Option<u64>,
}

impl GraphSection {
    fn default_vertices() -> u32 {
        1000
    }
    fn default_avg_degree() -> f64 {
        10.0
    }
    fn default_scale_vertices() -> u32 {
        10_000
    }
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            source: "generator".into(),
            path: None,
            symmetrize: true,
            preset: None,
            vertices: Self::default_vertices(),
            avg_degree: Self::default_avg_degree(),
            scale_vertices: Self::default_scale_vertices(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_variant")]
    pub variant: String,
    /// Explicit per-layer (d_in, d_out) pairs; wins over the chain fields.
    pub dims: Option<Vec<[u32; 2]>>,
    #[serde(default = "ModelSection::default_in_dim")]
    pub in_dim: u32,
    #[serde(default = "ModelSection::default_hidden")]
    pub hidden: u32,
    #[serde(default = "ModelSection::default_classes")]
    pub classes: u32,
    #[serde(default = "ModelSection::default_layers")]
    pub layers: usize,
    #[serde(default = "ModelSection::default_element_bytes")]
    pub element_bytes: u32,
    pub learning_rate: Option<f32>,
    /// Weight-init seed; falls back to the run seed.
    pub seed: Option<u64>,
}

impl ModelSection {
    fn default_variant() -> String {
        "gcn".into()
    }
    fn default_in_dim() -> u32 {
        32
    }
    fn default_hidden() -> u32 {
        16
    }
    fn default_classes() -> u32 {
        4
    }
    fn default_layers() -> usize {
        2
    }
    fn default_element_bytes() -> u32 {
        4
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Self::default_variant(),
            dims: None,
            in_dim: Self::default_in_dim(),
            hidden: Self::default_hidden(),
            classes: Self::default_classes(),
            layers: Self::default_layers(),
            element_bytes: Self::default_element_bytes(),
            learning_rate: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default = "PartitionSection::default_channels")]
    pub channels: u32,
    #[serde(default = "PartitionSection::default_dimms")]
    pub dimms_per_channel: u32,
    #[serde(default = "PartitionSection::default_ranks")]
    pub ranks_per_dimm: u32,
    /// Duplication ratio used when the hybrid-partition toggle is on.
    #[serde(default = "PartitionSection::default_lambda")]
    pub lambda: f64,
    pub capacity_vertices_per_dimm: Option<u32>,
}

impl PartitionSection {
    fn default_channels() -> u32 {
        4
    }
    fn default_dimms() -> u32 {
        4
    }
    fn default_ranks() -> u32 {
        2
    }
    fn default_lambda() -> f64 {
        0.35
    }
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            channels: Self::default_channels(),
            dimms_per_channel: Self::default_dimms(),
            ranks_per_dimm: Self::default_ranks(),
            lambda: Self::default_lambda(),
            capacity_vertices_per_dimm: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ShardSection {
    #[serde(default = "ShardSection::default_rows")]
    pub rows: u32,
    #[serde(default = "ShardSection::default_cols")]
    pub cols: u32,
}

impl ShardSection {
    fn default_rows() -> u32 {
        1
    }
    fn default_cols() -> u32 {
        127
    }
}

impl Default for ShardSection {
    fn default() -> Self {
        ShardSection { rows: Self::default_rows(), cols: Self::default_cols() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Interval window depth when the window toggle is on.
    #[serde(default = "ScheduleSection::default_window")]
    pub window: u32,
}

impl ScheduleSection {
    fn default_window() -> u32 {
        4
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { window: Self::default_window() }
    }
}

/// Optimization toggles. Dependencies: broadcast needs hgp (only
/// duplicated vertices are broadcast), and everything that programs NMEs
/// needs nmp.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    #[serde(default = "default_true")]
    pub nmp: bool,
    #[serde(default = "default_true")]
    pub narrow_shard: bool,
    #[serde(default = "default_true")]
    pub hgp: bool,
    #[serde(default = "default_true")]
    pub broadcast: bool,
    #[serde(default = "default_true")]
    pub window: bool,
    #[serde(default = "default_true")]
    pub interleave: bool,
    #[serde(default = "default_true")]
    pub overlap: bool,
    #[serde(default = "default_true")]
    pub ieo: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            nmp: true,
            narrow_shard: true,
            hgp: true,
            broadcast: true,
            window: true,
            interleave: true,
            overlap: true,
            ieo: true,
        }
    }
}

impl Toggles {
    pub const ALL_OFF: Toggles = Toggles {
        nmp: false,
        narrow_shard: false,
        hgp: false,
        broadcast: false,
        window: false,
        interleave: false,
        overlap: false,
        ieo: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.broadcast && !self.hgp {
            return Err(Error::Config(
                "broadcast commits duplicated vertices only; enable hgp or disable broadcast"
                    .into(),
            ));
        }
        for (on, name) in [
            (self.narrow_shard, "narrow_shard"),
            (self.window, "window"),
            (self.interleave, "interleave"),
            (self.overlap, "overlap"),
        ] {
            if on && !self.nmp {
                return Err(Error::Config(format!(
                    "{name} programs the near-memory engines; enable nmp or disable {name}"
                )));
            }
        }
        Ok(())
    }

    /// Stable short form for fingerprints and file names.
    pub fn render(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.nmp, "nmp"),
            (self.narrow_shard, "narrow_shard"),
            (self.hgp, "hgp"),
            (self.broadcast, "broadcast"),
            (self.window, "window"),
            (self.interleave, "interleave"),
            (self.overlap, "overlap"),
            (self.ieo, "ieo"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub placement: Option<PathBuf>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub shard: ShardSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub optimizations: Toggles,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            partition: PartitionSection::default(),
            shard: ShardSection::default(),
            schedule: ScheduleSection::default(),
            optimizations: Toggles::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        Self::load(path, &[])
    }

    /// Parse a config file, then apply `key=value` overrides by dotted
    /// path before deserialization so flags can replace any setting.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[(String, String)],
    ) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: RunConfig = toml::Table::try_into(table)
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.graph.source.as_str() {
            "generator" => {
                if self.graph.vertices == 0 {
                    return Err(Error::Config("graph.vertices must be nonzero".into()));
                }
                if !(self.graph.avg_degree > 0.0) || !self.graph.avg_degree.is_finite() {
                    return Err(Error::Config("graph.avg_degree must be positive".into()));
                }
            }
            "file" => {
                if self.graph.path.is_none() {
                    return Err(Error::Config("graph.source = \"file\" needs graph.path".into()));
                }
            }
            "preset" => {
                let name = self.graph.preset.as_deref().ok_or_else(|| {
                    Error::Config("graph.source = \"preset\" needs graph.preset".into())
                })?;
                GraphPreset::parse(name)?;
                if self.graph.scale_vertices == 0 {
                    return Err(Error::Config("graph.scale_vertices must be nonzero".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "graph.source must be generator, file, or preset, got {other:?}"
                )));
            }
        }
        Variant::parse(&self.model.variant)?;
        self.build_model()?.validate()?;
        self.optimizations.validate()?;
        self.partition_config().validate()?;
        if self.schedule.window == 0 {
            return Err(Error::Config("schedule.window must be at least 1".into()));
        }
        if self.shard.rows == 0 || self.shard.cols == 0 {
            return Err(Error::Config("shard.rows and shard.cols must be nonzero".into()));
        }
        Ok(())
    }

    pub fn build_graph(&self) -> Result<CsrGraph> {
        match self.graph.source.as_str() {
            "generator" => generate_power_law(
                self.graph.vertices,
                self.graph.avg_degree,
                self.graph.seed.unwrap_or(self.seed),
            ),
            "file" => {
                let path = self.graph.path.as_ref().unwrap();
                let file = std::fs::File::open(path)
                    .map_err(|e| Error::Input(format!("graph {}: {e}", path.display())))?;
                load_edge_list(std::io::BufReader::new(file), self.graph.symmetrize, None)
            }
            "preset" => {
                let preset = GraphPreset::parse(self.graph.preset.as_deref().unwrap())?;
                let stats = preset.stats();
                let n = (stats.num_vertices as u32).min(self.graph.scale_vertices);
                generate_power_law(n, stats.avg_degree, self.graph.seed.unwrap_or(self.seed))
            }
            other => Err(Error::Config(format!("bad graph source {other:?}"))),
        }
    }

    pub fn build_model(&self) -> Result<ModelConfig> {
        let variant = Variant::parse(&self.model.variant)?;
        let seed = self.model.seed.unwrap_or(self.seed);
        let mut cfg = match &self.model.dims {
            Some(dims) => {
                if dims.is_empty() {
                    return Err(Error::Config("model.dims must not be empty".into()));
                }
                ModelConfig::new(
                    variant,
                    dims.iter().map(|d| (d[0], d[1])).collect(),
                    self.model.element_bytes,
                    seed,
                )
            }
            None => {
                if self.model.layers == 0 {
                    return Err(Error::Config("model.layers must be at least 1".into()));
                }
                ModelConfig::with_chain(
                    variant,
                    self.model.in_dim,
                    self.model.hidden,
                    self.model.classes,
                    self.model.layers,
                    self.model.element_bytes,
                    seed,
                )
            }
        };
        if let Some(lr) = self.model.learning_rate {
            cfg.learning_rate = lr;
        }
        Ok(cfg)
    }

    /// Partition parameters after applying the hgp toggle: even layout
    /// with no duplication when off, hybrid with the configured ratio
    /// when on.
    pub fn partition_config(&self) -> PartitionConfig {
        let p = &self.partition;
        PartitionConfig {
            num_channels: p.channels,
            dimms_per_channel: p.dimms_per_channel,
            ranks_per_dimm: p.ranks_per_dimm,
            lambda: if self.optimizations.hgp { p.lambda } else { 0.0 },
            mode: if self.optimizations.hgp {
                PartitionMode::Hybrid
            } else {
                PartitionMode::Even
            },
            capacity_vertices_per_dimm: p.capacity_vertices_per_dimm,
        }
    }

    /// Shard geometry always follows the config; the narrow_shard toggle
    /// selects shared block loads, not the shape.
    pub fn shard_config(&self) -> ShardConfig {
        ShardConfig {
            r: self.shard.rows,
            c: self.shard.cols,
        }
    }

    /// Window depth after the toggle: 1 means strictly sequential
    /// intervals.
    pub fn effective_window(&self) -> u32 {
        if self.optimizations.window {
            self.schedule.window
        } else {
            1
        }
    }
}

/// Set `key` (dotted path) in a parsed TOML tree. The value text is
/// parsed as TOML if possible (bools, numbers, arrays) and falls back to
/// a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_prototype() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.shard.rows, 1);
        assert_eq!(cfg.shard.cols, 127);
        assert_eq!(cfg.schedule.window, 4);
        assert_eq!(cfg.partition.ranks_per_dimm, 2);
        assert_eq!(cfg.partition.channels, 4);
        assert!(cfg.optimizations.nmp);
        assert!(cfg.optimizations.broadcast);
    }

    #[test]
    fn broadcast_without_hgp_is_rejected() {
        let err = RunConfig::from_toml(
            "[optimizations]\nhgp = false\nbroadcast = true\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        // Turning broadcast off as well makes it valid.
        RunConfig::from_toml("[optimizations]\nhgp = false\nbroadcast = false\n").unwrap();
    }

    #[test]
    fn nme_toggles_require_nmp() {
        for t in ["narrow_shard", "window", "interleave", "overlap"] {
            let text = format!(
                "[optimizations]\nnmp = false\nbroadcast = false\n\
                 narrow_shard = false\nwindow = false\ninterleave = false\n\
                 overlap = false\n{t} = true\n"
            );
            assert!(RunConfig::from_toml(&text).is_err(), "{t} should need nmp");
        }
        RunConfig::from_toml(
            "[optimizations]\nnmp = false\nbroadcast = false\nnarrow_shard = false\n\
             window = false\ninterleave = false\noverlap = false\n",
        )
        .unwrap();
    }

    #[test]
    fn overrides_replace_keys_by_dotted_path() {
        let cfg = RunConfig::from_toml_with_overrides(
            "[schedule]\nwindow = 4\n",
            &[
                ("schedule.window".into(), "8".into()),
                ("model.variant".into(), "gin".into()),
                ("optimizations.ieo".into(), "false".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.schedule.window, 8);
        assert_eq!(cfg.model.variant, "gin");
        assert!(!cfg.optimizations.ieo);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(RunConfig::from_toml("[schedule]\nwidnow = 4\n").is_err());
        assert!(RunConfig::from_toml("typo = 1\n").is_err());
    }

    #[test]
    fn unknown_variant_is_rejected() {
        let err = RunConfig::from_toml("[model]\nvariant = \"gnn9000\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn graph_sources_build() {
        let cfg = RunConfig::from_toml("[graph]\nsource = \"generator\"\nvertices = 50\n").unwrap();
        let g = cfg.build_graph().unwrap();
        assert_eq!(g.num_vertices, 50);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, "0 1\n1 2\n").unwrap();
        let cfg = RunConfig::from_toml(&format!(
            "[graph]\nsource = \"file\"\npath = {:?}\n",
            path.to_str().unwrap()
        ))
        .unwrap();
        let g = cfg.build_graph().unwrap();
        assert_eq!(g.num_vertices, 3);

        let cfg = RunConfig::from_toml(
            "[graph]\nsource = \"preset\"\npreset = \"YP\"\nscale_vertices = 500\n",
        )
        .unwrap();
        let g = cfg.build_graph().unwrap();
        assert_eq!(g.num_vertices, 500);
    }

    #[test]
    fn hgp_toggle_selects_partition_mode() {
        let on = RunConfig::from_toml("[partition]\nlambda = 0.2\n").unwrap();
        assert_eq!(on.partition_config().mode, PartitionMode::Hybrid);
        assert_eq!(on.partition_config().lambda, 0.2);
        let off = RunConfig::from_toml(
            "[partition]\nlambda = 0.2\n[optimizations]\nhgp = false\nbroadcast = false\n",
        )
        .unwrap();
        assert_eq!(off.partition_config().mode, PartitionMode::Even);
        assert_eq!(off.partition_config().lambda, 0.0);
    }

    #[test]
    fn window_toggle_forces_sequential() {
        let cfg = RunConfig::from_toml(
            "[schedule]\nwindow = 4\n[optimizations]\nwindow = false\n",
        )
        .unwrap();
        assert_eq!(cfg.effective_window(), 1);
    }

    #[test]
    fn toggles_render_stably() {
        assert_eq!(Toggles::ALL_OFF.render(), "none");
        let t = Toggles { broadcast: false, ieo: false, ..Toggles::default() };
        assert_eq!(t.render(), "nmp+narrow_shard+hgp+window+interleave+overlap");
    }

    #[test]
    fn seeds_fall_back_to_the_run_seed() {
        let cfg = RunConfig::from_toml("seed = 9\n").unwrap();
        let m = cfg.build_model().unwrap();
        assert_eq!(m.seed, 9);
        let cfg2 = RunConfig::from_toml("seed = 9\n[model]\nseed = 3\n").unwrap();
        assert_eq!(cfg2.build_model().unwrap().seed, 3);
    }

    #[test]
    fn explicit_dims_win_over_chain_fields() {
        let cfg = RunConfig::from_toml("[model]\ndims = [[602, 256], [256, 3]]\n").unwrap();
        let m = cfg.build_model().unwrap();
        assert_eq!(m.dims, vec![(602, 256), (256, 3)]);
    }
}
