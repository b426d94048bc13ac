use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{read_all_records, write_record, Record, RecordData};
use super::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::sim::{DataConfig, Regime, StateGraph, TimeSeriesSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub seed: u64,
    pub split_seeds: Vec<(String, u64)>,
    pub dims: usize,
    pub edge_types: usize,
    /// Samples flagged by the overflow guard, over all splits.
    pub diverged: usize,
}

/// One split held as flat arrays: `p` is `[S,T,N,D]`, `s` is `[S,T,N]`,
/// `graphs` is `[S,K,N,N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub num_samples: usize,
    pub num_steps: usize,
    pub num_objects: usize,
    pub dims: usize,
    pub num_states: usize,
    pub edge_types: usize,
    pub regime: Regime,
    pub p: Vec<f32>,
    pub s: Vec<u8>,
    pub graphs: Vec<u8>,
    pub diverged: Vec<u8>,
}

impl Split {
    pub fn from_samples(cfg: &DataConfig, samples: &[TimeSeriesSample]) -> Result<Self> {
        let (t, n, d, k) = (
            cfg.num_steps,
            cfg.num_objects,
            cfg.world.dims(),
            cfg.num_states,
        );
        let mut split = Split {
            num_samples: samples.len(),
            num_steps: t,
            num_objects: n,
            dims: d,
            num_states: k,
            edge_types: cfg.edge_types(),
            regime: cfg.regime,
            p: Vec::with_capacity(samples.len() * t * n * d),
            s: Vec::with_capacity(samples.len() * t * n),
            graphs: Vec::with_capacity(samples.len() * k * n * n),
            diverged: Vec::with_capacity(samples.len()),
        };
        for x in samples {
            if x.p.len() != t * n * d || x.s.len() != t * n || x.graph.entries().len() != k * n * n
            {
                return Err(Error::shape(
                    "Split::from_samples",
                    &[t, n, d],
                    &[x.num_steps, x.num_objects, x.dims],
                ));
            }
            split.p.extend(x.p.iter().map(|&v| v as f32));
            split.s.extend_from_slice(&x.s);
            split.graphs.extend_from_slice(x.graph.entries());
            split.diverged.push(u8::from(x.diverged));
        }
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples == 0
    }

    /// `[T × N × D]` values of sample `i`.
    pub fn sample_p(&self, i: usize) -> &[f32] {
        let w = self.num_steps * self.num_objects * self.dims;
        &self.p[i * w..(i + 1) * w]
    }

    /// `[T × N]` states of sample `i`.
    pub fn sample_s(&self, i: usize) -> &[u8] {
        let w = self.num_steps * self.num_objects;
        &self.s[i * w..(i + 1) * w]
    }

    pub fn graph(&self, i: usize) -> StateGraph {
        let w = self.num_states * self.num_objects * self.num_objects;
        StateGraph::from_entries(
            self.num_states,
            self.num_objects,
            self.edge_types,
            self.graphs[i * w..(i + 1) * w].to_vec(),
        )
        .expect("split graphs are validated on construction")
    }

    /// Keeps only the samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Split {
        let mut out = Split {
            num_samples: idx.len(),
            p: Vec::new(),
            s: Vec::new(),
            graphs: Vec::new(),
            diverged: Vec::new(),
            ..self.clone_header()
        };
        let wg = self.num_states * self.num_objects * self.num_objects;
        for &i in idx {
            out.p.extend_from_slice(self.sample_p(i));
            out.s.extend_from_slice(self.sample_s(i));
            out.graphs
                .extend_from_slice(&self.graphs[i * wg..(i + 1) * wg]);
            out.diverged.push(self.diverged[i]);
        }
        out
    }

    fn clone_header(&self) -> Split {
        Split {
            num_samples: 0,
            num_steps: self.num_steps,
            num_objects: self.num_objects,
            dims: self.dims,
            num_states: self.num_states,
            edge_types: self.edge_types,
            regime: self.regime,
            p: Vec::new(),
            s: Vec::new(),
            graphs: Vec::new(),
            diverged: Vec::new(),
        }
    }

    fn records(&self) -> Result<Vec<Record>> {
        let (sn, t, n, d, k) = (
            self.num_samples,
            self.num_steps,
            self.num_objects,
            self.dims,
            self.num_states,
        );
        Ok(vec![
            Record::new("p", vec![sn, t, n, d], RecordData::F32(self.p.clone()))?,
            Record::new("s", vec![sn, t, n], RecordData::U8(self.s.clone()))?,
            Record::new(
                "graph",
                vec![sn, k, n, n],
                RecordData::U8(self.graphs.clone()),
            )?,
            Record::new("diverged", vec![sn], RecordData::U8(self.diverged.clone()))?,
        ])
    }

    fn from_records(
        manifest: &Manifest,
        name: &str,
        expected: usize,
        records: Vec<Record>,
    ) -> Result<Self> {
        let cfg = &manifest.config;
        let (t, n, d, k) = (
            cfg.num_steps,
            cfg.num_objects,
            manifest.dims,
            cfg.num_states,
        );
        let what = format!("{name} split");
        let find = |key: &str| -> Result<&Record> {
            records
                .iter()
                .find(|r| r.name == key)
                .ok_or_else(|| Error::MissingTensor(format!("{name}/{key}")))
        };
        let check = |rec: &Record, want: Vec<usize>| -> Result<()> {
            if rec.shape != want {
                return Err(Error::Corrupt {
                    what: what.clone(),
                    detail: format!(
                        "tensor `{}` has shape {:?}, manifest implies {:?}",
                        rec.name, rec.shape, want
                    ),
                });
            }
            Ok(())
        };
        let p = find("p")?;
        check(p, vec![expected, t, n, d])?;
        let s = find("s")?;
        check(s, vec![expected, t, n])?;
        let g = find("graph")?;
        check(g, vec![expected, k, n, n])?;
        let dv = find("diverged")?;
        check(dv, vec![expected])?;
        let split = Split {
            num_samples: expected,
            num_steps: t,
            num_objects: n,
            dims: d,
            num_states: k,
            edge_types: manifest.edge_types,
            regime: cfg.regime,
            p: p.f32s()?.to_vec(),
            s: s.u8s()?.to_vec(),
            graphs: g.u8s()?.to_vec(),
            diverged: dv.u8s()?.to_vec(),
        };
        if split.s.iter().any(|&v| usize::from(v) >= k) {
            return Err(Error::Corrupt {
                what,
                detail: format!("state value out of range 0..{k}"),
            });
        }
        let wg = k * n * n;
        for i in 0..expected {
            StateGraph::from_entries(
                k,
                n,
                manifest.edge_types,
                split.graphs[i * wg..(i + 1) * wg].to_vec(),
            )
            .map_err(|e| Error::Corrupt {
                what: what.clone(),
                detail: format!("graph {i}: {e}"),
            })?;
        }
        Ok(split)
    }
}

/// A generated dataset: manifest plus three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, valid or test)"
            ))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for name in SPLITS {
            let path = dir.join(format!("{name}.bin"));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for rec in self.split(name)?.records()? {
                write_record(&mut w, &rec).map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let sizes = manifest.config.sizes;
        let load = |name: &str, expected: usize| -> Result<Split> {
            let path = dir.join(format!("{name}.bin"));
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let records = read_all_records(&mut BufReader::new(file), &format!("{name} split"))?;
            Split::from_records(&manifest, name, expected, records)
        };
        let train = load("train", sizes.train)?;
        let valid = load("valid", sizes.valid)?;
        let test = load("test", sizes.test)?;
        Ok(Dataset {
            manifest,
            train,
            valid,
            test,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt {
            what: "manifest".into(),
            detail: "format_version missing".into(),
        })?;
    if found > u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            what: "dataset manifest".into(),
            found: found.min(u64::from(u32::MAX)) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    manifest.config.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, LinearWorld, SplitSizes, WorldSpec};

    fn small() -> DataConfig {
        DataConfig {
            world: WorldSpec::Linear(LinearWorld::default()),
            regime: Regime::ObservedIndependent,
            num_objects: 3,
            num_steps: 12,
            num_states: 2,
            edge_prob: 0.5,
            sizes: SplitSizes {
                train: 4,
                valid: 2,
                test: 3,
            },
            state_period: None,
            drop_diverged: false,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = generate_dataset(&small(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), ds);
    }

    #[test]
    fn rejects_newer_versions() {
        let ds = generate_dataset(&small(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace(
            &format!("\"format_version\": {FORMAT_VERSION}"),
            &format!("\"format_version\": {}", FORMAT_VERSION + 1),
        );
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            Dataset::read(dir.path()),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn size_mismatch_is_corruption() {
        let mut ds = generate_dataset(&small(), 1).unwrap();
        ds.manifest.config.sizes.test = 5;
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn select_keeps_order() {
        let ds = generate_dataset(&small(), 2).unwrap();
        let sub = ds.train.select(&[2, 0]);
        assert_eq!(sub.sample_p(0), ds.train.sample_p(2));
        assert_eq!(sub.graph(1), ds.train.graph(0));
    }
}
