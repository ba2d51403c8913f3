//! Instance datasets, the class vocabulary and their NDJSON file formats.
//!
//! A dataset file starts with a header object
//! `{"schema_version":1,"descriptor_dim":D}` followed by one instance per line:
//! `{"instance_id":..,"class_id":..,"point_count":..,"views":[{"view_id":..,"visibility":..,"descriptor":[..]}]}`.
//! A vocabulary file holds one class per line:
//! `{"class_id":..,"name":..,"frequency":..,"embedding":[..]}`.

mod sampler;
mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use sampler::{instance_weights, sample_batch, select_eval_views, Batch, SamplerConfig};
pub use synth::{gen_synthetic, split_holdout, SynthConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Allowed deviation of an ingested descriptor's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewObservation {
    pub view_id: u32,
    pub visibility: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub instance_id: u64,
    pub class_id: i64,
    pub point_count: u64,
    pub views: Vec<ViewObservation>,
}

impl InstanceRecord {
    /// Descriptors of the views at `indices`, stacked as rows.
    pub fn descriptors(&self, indices: &[usize]) -> Tensor {
        let d = self.views[0].descriptor.len();
        let data = indices
            .iter()
            .flat_map(|&i| self.views[i].descriptor.iter().copied())
            .collect();
        Tensor::matrix(indices.len(), d, data)
    }

    pub fn all_descriptors(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.views.len()).collect();
        self.descriptors(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class_id: i64,
    pub name: String,
    pub frequency: u64,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
    index: HashMap<i64, usize>,
}

impl ClassVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        let dim = entries.first().map(|e| e.embedding.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.class_id, i).is_some() {
                return Err(Error::Data(format!("duplicate class_id {}", e.class_id)));
            }
            if Some(e.embedding.len()) != dim || e.embedding.is_empty() {
                return Err(Error::Data(format!(
                    "class {} embedding has dimension {}",
                    e.class_id,
                    e.embedding.len()
                )));
            }
            let n = norm(&e.embedding);
            if (n - 1.0).abs() >= NORM_TOLERANCE {
                return Err(Error::Data(format!(
                    "class {} embedding norm {n} is not unit",
                    e.class_id
                )));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.embedding.len())
    }

    pub fn get(&self, class_id: i64) -> Option<&ClassEntry> {
        self.index.get(&class_id).map(|&i| &self.entries[i])
    }

    pub fn embedding(&self, class_id: i64) -> Result<&[f64]> {
        self.get(class_id)
            .map(|e| e.embedding.as_slice())
            .ok_or_else(|| Error::Data(format!("class {class_id} missing from vocabulary")))
    }

    pub fn frequencies(&self) -> BTreeMap<i64, u64> {
        self.entries.iter().map(|e| (e.class_id, e.frequency)).collect()
    }

    /// Copy whose frequencies are the class counts of `dataset`.
    pub fn with_frequencies_from(&self, dataset: &Dataset) -> Self {
        let counts = dataset.class_counts();
        let mut out = self.clone();
        for e in &mut out.entries {
            e.frequency = counts.get(&e.class_id).copied().unwrap_or(0);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut e: ClassEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
                line: i + 1,
                msg: err.to_string(),
            })?;
            renormalize(&mut e.embedding);
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            let rounded = ClassEntry {
                embedding: e.embedding.iter().map(|&x| round_sig9(x)).collect(),
                ..e.clone()
            };
            serde_json::to_writer(&mut out, &rounded)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    descriptor_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    descriptor_dim: usize,
    instances: Vec<InstanceRecord>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn renormalize(v: &mut [f64]) {
    let n = norm(v);
    if (n - 1.0).abs() < NORM_TOLERANCE && n != 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Rounds to 9 significant decimal digits, the on-disk precision.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap()
}

impl Dataset {
    /// Validates every instance and sorts by `instance_id`.
    pub fn new(descriptor_dim: usize, mut instances: Vec<InstanceRecord>) -> Result<Self> {
        if descriptor_dim == 0 {
            return Err(Error::Data("descriptor_dim must be ≥ 1".into()));
        }
        instances.sort_by_key(|r| r.instance_id);
        for w in instances.windows(2) {
            if w[0].instance_id == w[1].instance_id {
                return Err(Error::Data(format!(
                    "duplicate instance_id {}",
                    w[0].instance_id
                )));
            }
        }
        for r in &mut instances {
            validate_instance(r, descriptor_dim)?;
        }
        Ok(Self {
            descriptor_dim,
            instances,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn instances(&self) -> &[InstanceRecord] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<i64, u64> {
        let mut counts = BTreeMap::new();
        for r in &self.instances {
            *counts.entry(r.class_id).or_insert(0) += 1;
        }
        counts
    }

    /// Every class in the dataset must be in `vocab`, with matching dimension.
    pub fn check_vocabulary(&self, vocab: &ClassVocabulary) -> Result<()> {
        if !vocab.is_empty() && vocab.dim() != self.descriptor_dim {
            return Err(Error::Data(format!(
                "vocabulary dimension {} differs from descriptor dimension {}",
                vocab.dim(),
                self.descriptor_dim
            )));
        }
        for class in self.class_counts().keys() {
            if vocab.get(*class).is_none() {
                return Err(Error::Data(format!("class {class} missing from vocabulary")));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut header: Option<Header> = None;
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |err: serde_json::Error| Error::Parse {
                line: lineno,
                msg: err.to_string(),
            };
            match &header {
                None => {
                    let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
                    if h.schema_version != SCHEMA_VERSION {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("unsupported schema_version {}", h.schema_version),
                        });
                    }
                    header = Some(h);
                }
                Some(h) => {
                    let mut r: InstanceRecord = serde_json::from_str(&line).map_err(parse_err)?;
                    validate_instance(&mut r, h.descriptor_dim).map_err(|e| Error::Parse {
                        line: lineno,
                        msg: e.to_string(),
                    })?;
                    instances.push(r);
                }
            }
        }
        let header = header.ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        Self::new(header.descriptor_dim, instances)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        serde_json::to_writer(
            &mut *out,
            &Header {
                schema_version: SCHEMA_VERSION,
                descriptor_dim: self.descriptor_dim,
            },
        )?;
        out.write_all(b"\n")?;
        for r in &self.instances {
            let rounded = InstanceRecord {
                views: r
                    .views
                    .iter()
                    .map(|v| ViewObservation {
                        descriptor: v.descriptor.iter().map(|&x| round_sig9(x)).collect(),
                        ..v.clone()
                    })
                    .collect(),
                ..r.clone()
            };
            serde_json::to_writer(&mut *out, &rounded)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn subset(&self, keep: impl Fn(&InstanceRecord) -> bool) -> Self {
        Self {
            descriptor_dim: self.descriptor_dim,
            instances: self.instances.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

fn validate_instance(r: &mut InstanceRecord, dim: usize) -> Result<()> {
    if r.views.is_empty() {
        return Err(Error::Data(format!("instance {} has no views", r.instance_id)));
    }
    if r.point_count == 0 {
        return Err(Error::Data(format!(
            "instance {} has point_count 0",
            r.instance_id
        )));
    }
    let mut seen = HashSet::new();
    for v in &mut r.views {
        if !seen.insert(v.view_id) {
            return Err(Error::Data(format!(
                "instance {} repeats view_id {}",
                r.instance_id, v.view_id
            )));
        }
        if v.descriptor.len() != dim {
            return Err(Error::Data(format!(
                "instance {} view {} has dimension {}, expected {dim}",
                r.instance_id,
                v.view_id,
                v.descriptor.len()
            )));
        }
        if !(v.visibility >= 0.0) {
            return Err(Error::Data(format!(
                "instance {} view {} has negative visibility",
                r.instance_id, v.view_id
            )));
        }
        let n = norm(&v.descriptor);
        if !((n - 1.0).abs() < NORM_TOLERANCE) {
            return Err(Error::Data(format!(
                "instance {} view {} descriptor norm {n} outside tolerance",
                r.instance_id, v.view_id
            )));
        }
        renormalize(&mut v.descriptor);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, class: i64, descs: &[&[f64]]) -> InstanceRecord {
        InstanceRecord {
            instance_id: id,
            class_id: class,
            point_count: 10,
            views: descs
                .iter()
                .enumerate()
                .map(|(i, d)| ViewObservation {
                    view_id: i as u32,
                    visibility: i as f64,
                    descriptor: d.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn empty_instance_list_round_trips() {
        let ds = Dataset::new(3, vec![]).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.descriptor_dim(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"schema_version\":1,\"descriptor_dim\":2}\n{\"instance_id\":1,\"class_id\":0,\"point_count\":3,\"views\":[{\"view_id\":0,\"visibility\":1.0,\"descriptor\":[1.0,0.0]}]}\n{not json}\n";
        match Dataset::read_from(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn norm_outside_tolerance_names_instance_and_view() {
        let r = record(7, 0, &[&[1.0, 0.0], &[0.5, 0.0]]);
        let err = Dataset::new(2, vec![r]).unwrap_err().to_string();
        assert!(err.contains("instance 7") && err.contains("view 1"), "{err}");
    }

    #[test]
    fn near_unit_descriptors_are_renormalized() {
        let r = record(1, 0, &[&[1.0005, 0.0]]);
        let ds = Dataset::new(2, vec![r]).unwrap();
        assert_eq!(ds.instances()[0].views[0].descriptor, vec![1.0, 0.0]);
    }

    #[test]
    fn duplicate_view_ids_rejected() {
        let mut r = record(1, 0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        r.views[1].view_id = 0;
        assert!(Dataset::new(2, vec![r]).is_err());
    }

    #[test]
    fn instances_sorted_by_id() {
        let ds = Dataset::new(
            2,
            vec![record(5, 0, &[&[1.0, 0.0]]), record(2, 1, &[&[0.0, 1.0]])],
        )
        .unwrap();
        let ids: Vec<u64> = ds.instances().iter().map(|r| r.instance_id).collect();
        assert_eq!(ids, vec![2, 5]);
    }

    #[test]
    fn vocabulary_round_trip_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = ClassVocabulary::new(vec![
            ClassEntry {
                class_id: 3,
                name: "chair".into(),
                frequency: 4,
                embedding: vec![0.6, 0.8],
            },
            ClassEntry {
                class_id: 9,
                name: "table".into(),
                frequency: 0,
                embedding: vec![1.0, 0.0],
            },
        ])
        .unwrap();
        let path = dir.path().join("vocab.ndjson");
        vocab.write(&path).unwrap();
        let back = ClassVocabulary::read(&path).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.get(9).unwrap().name, "table");
        assert!(back.embedding(4).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_non_unit() {
        let e = ClassEntry {
            class_id: 1,
            name: "a".into(),
            frequency: 1,
            embedding: vec![1.0, 0.0],
        };
        assert!(ClassVocabulary::new(vec![e.clone(), e.clone()]).is_err());
        let bad = ClassEntry {
            embedding: vec![2.0, 0.0],
            ..e
        };
        assert!(ClassVocabulary::new(vec![bad]).is_err());
    }

    #[test]
    fn rounding_keeps_nine_digits() {
        let x = 0.123456789123;
        let r = round_sig9(x);
        assert!(((r - x) / x).abs() < 1e-8);
        assert_eq!(serde_json::to_string(&r).unwrap(), "0.123456789");
    }
}
