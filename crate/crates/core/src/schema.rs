//! Categorical schemas, CSV ingestion and the one-hot layout.
//!
//! Every feature `i` has `t_i` categories. In the one-hot layout feature `i`
//! owns the column block `offsets[i] .. offsets[i] + t_i`, and the total
//! width is `d_prime = Σ t_i`.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of equal-width bins for numeric columns.
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub categories: Vec<String>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        let spec = FeatureSpec {
            name: name.into(),
            categories,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn cardinality(&self) -> usize {
        self.categories.len()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "feature '{}' has no categories",
                self.name
            )));
        }
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "feature '{}' repeats category '{}'",
                    self.name, c
                )));
            }
        }
        Ok(())
    }
}

/// Ordered list of categorical features plus the derived one-hot layout.
///
/// Serializes as a bare JSON array of `{name, categories}` objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct Schema {
    features: Vec<FeatureSpec>,
    offsets: Vec<usize>,
    d_prime: usize,
    // column -> owning feature
    column_feature: Vec<usize>,
}

impl PartialEq for Schema {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
    }
}

impl Eq for Schema {}

impl TryFrom<Vec<FeatureSpec>> for Schema {
    type Error = Error;

    fn try_from(features: Vec<FeatureSpec>) -> Result<Self> {
        Schema::new(features)
    }
}

impl From<Schema> for Vec<FeatureSpec> {
    fn from(schema: Schema) -> Self {
        schema.features
    }
}

impl Schema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("schema has no features".into()));
        }
        let mut names = BTreeSet::new();
        for f in &features {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate feature name '{}'", f.name)));
            }
        }
        let mut offsets = Vec::with_capacity(features.len());
        let mut column_feature = Vec::new();
        let mut acc = 0;
        for (i, f) in features.iter().enumerate() {
            offsets.push(acc);
            acc += f.cardinality();
            column_feature.extend(std::iter::repeat_n(i, f.cardinality()));
        }
        Ok(Schema {
            features,
            offsets,
            d_prime: acc,
            column_feature,
        })
    }

    /// Schema with features `f0, f1, ...` whose categories are `"0".."t-1"`.
    pub fn from_cardinalities(cardinalities: &[usize]) -> Result<Self> {
        let features = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &t)| FeatureSpec::new(format!("f{i}"), (0..t).map(|c| c.to_string()).collect()))
            .collect::<Result<Vec<_>>>()?;
        Schema::new(features)
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn cardinality(&self, feature: usize) -> usize {
        self.features[feature].cardinality()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.features.iter().map(FeatureSpec::cardinality).collect()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn offset(&self, feature: usize) -> usize {
        self.offsets[feature]
    }

    pub fn d_prime(&self) -> usize {
        self.d_prime
    }

    /// Column range of `feature` in the one-hot layout.
    pub fn block(&self, feature: usize) -> std::ops::Range<usize> {
        let start = self.offsets[feature];
        start..start + self.cardinality(feature)
    }

    /// Maps a one-hot column back to `(feature, category)`.
    pub fn column_owner(&self, column: usize) -> (usize, usize) {
        let feature = self.column_feature[column];
        (feature, column - self.offsets[feature])
    }

    /// Label for a one-hot column, `name=category`.
    pub fn column_name(&self, column: usize) -> String {
        let (f, c) = self.column_owner(column);
        format!("{}={}", self.features[f].name, self.features[f].categories[c])
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// `n` rows of per-feature category indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteDataset {
    schema: Schema,
    // row-major, n * d
    cells: Vec<u32>,
    n: usize,
}

impl DiscreteDataset {
    pub fn new(schema: Schema, rows: Vec<Vec<u32>>) -> Result<Self> {
        let d = schema.num_features();
        let mut cells = Vec::with_capacity(rows.len() * d);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Data(format!(
                    "row {r} has {} entries, schema has {d} features",
                    row.len()
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                if v as usize >= schema.cardinality(i) {
                    return Err(Error::Data(format!(
                        "row {r}, feature {i}: category {v} out of range (t = {})",
                        schema.cardinality(i)
                    )));
                }
            }
            cells.extend_from_slice(row);
        }
        Ok(DiscreteDataset {
            schema,
            cells,
            n: rows.len(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, r: usize) -> &[u32] {
        let d = self.schema.num_features();
        &self.cells[r * d..(r + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.cells.chunks_exact(self.schema.num_features())
    }

    /// Writes the dataset with category labels and a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(self.schema.features.iter().map(|f| f.name.as_str()))?;
        for row in self.rows() {
            w.write_record(
                row.iter()
                    .zip(&self.schema.features)
                    .map(|(&c, f)| f.categories[c as usize].as_str()),
            )?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// When inferring a schema, numeric columns with more distinct values than
    /// this are bucketed into this many equal-width bins. `None` disables it.
    pub bin_numeric: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            bin_numeric: Some(DEFAULT_BINS),
        }
    }
}

/// Reads a headed CSV file.
///
/// With a schema, every cell must be one of its feature's labels and the
/// header must list the schema's feature names in order. Without one, the
/// categories of each column are its sorted distinct labels.
pub fn load_csv(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<DiscreteDataset> {
    load_csv_with(path, schema, LoadOptions::default())
}

pub fn load_csv_with(path: impl AsRef<Path>, schema: Option<&Schema>, options: LoadOptions) -> Result<DiscreteDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: missing header row", path.display())));
    }
    let d = header.len();

    let mut raw: Vec<Vec<String>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::Data(format!(
                "{}: row {r} has {} fields, header has {d}",
                path.display(),
                record.len()
            )));
        }
        let row: Vec<String> = record.iter().map(|s| s.trim().to_string()).collect();
        if let Some(col) = row.iter().position(String::is_empty) {
            return Err(Error::Data(format!(
                "{}: row {r}, column '{}' is missing a value",
                path.display(),
                header[col]
            )));
        }
        raw.push(row);
    }

    match schema {
        Some(schema) => encode_with_schema(path, &header, &raw, schema),
        None => infer_and_encode(header, &raw, options),
    }
}

fn encode_with_schema(path: &Path, header: &[String], raw: &[Vec<String>], schema: &Schema) -> Result<DiscreteDataset> {
    if header.len() != schema.num_features() {
        return Err(Error::SchemaMismatch(format!(
            "{}: {} columns but schema has {} features",
            path.display(),
            header.len(),
            schema.num_features()
        )));
    }
    for (h, f) in header.iter().zip(schema.features()) {
        if h != &f.name {
            return Err(Error::SchemaMismatch(format!(
                "{}: column '{h}' where schema expects '{}'",
                path.display(),
                f.name
            )));
        }
    }
    let lookups: Vec<HashMap<&str, u32>> = schema
        .features()
        .iter()
        .map(|f| {
            f.categories
                .iter()
                .enumerate()
                .map(|(i, c)| (c.as_str(), i as u32))
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(raw.len());
    for (r, row) in raw.iter().enumerate() {
        let mut encoded = Vec::with_capacity(row.len());
        for (col, label) in row.iter().enumerate() {
            match lookups[col].get(label.as_str()) {
                Some(&c) => encoded.push(c),
                None => {
                    return Err(Error::Data(format!(
                        "{}: row {r}, column '{}': unknown label '{label}'",
                        path.display(),
                        header[col]
                    )))
                }
            }
        }
        rows.push(encoded);
    }
    DiscreteDataset::new(schema.clone(), rows)
}

fn infer_and_encode(header: Vec<String>, raw: &[Vec<String>], options: LoadOptions) -> Result<DiscreteDataset> {
    let d = header.len();
    let n = raw.len();
    let mut columns: Vec<Vec<u32>> = Vec::with_capacity(d);
    let mut features = Vec::with_capacity(d);
    for (col, name) in header.into_iter().enumerate() {
        let labels: Vec<&str> = raw.iter().map(|row| row[col].as_str()).collect();
        let distinct: BTreeSet<&str> = labels.iter().copied().collect();

        if let Some(bins) = options.bin_numeric {
            if distinct.len() > bins {
                let numeric: Option<Vec<f64>> = labels.iter().map(|s| s.parse::<f64>().ok()).collect();
                if let Some(values) = numeric {
                    let (indices, spec) = bin_numeric(&name, &values, bins)?;
                    columns.push(indices);
                    features.push(spec);
                    continue;
                }
            }
        }

        let categories: Vec<String> = distinct.iter().map(|s| s.to_string()).collect();
        let index: HashMap<&str, u32> = distinct.iter().enumerate().map(|(i, s)| (*s, i as u32)).collect();
        columns.push(labels.iter().map(|l| index[l]).collect());
        features.push(FeatureSpec::new(name, categories)?);
    }
    let schema = Schema::new(features)?;
    let rows = (0..n).map(|r| columns.iter().map(|c| c[r]).collect()).collect();
    DiscreteDataset::new(schema, rows)
}

/// Buckets real values into `num_bins` equal-width bins over `[min, max]`.
///
/// The maximum lands in the last bin. A constant column yields a single bin.
pub fn bin_numeric(name: &str, values: &[f64], num_bins: usize) -> Result<(Vec<u32>, FeatureSpec)> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("num_bins must be at least 1".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("feature '{name}' has no values")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "feature '{name}': non-finite value at row {i}"
        )));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        let spec = FeatureSpec::new(name, vec![format!("[{min},{max}]")])?;
        return Ok((vec![0; values.len()], spec));
    }
    let width = (max - min) / num_bins as f64;
    let last = num_bins - 1;
    let indices = values
        .iter()
        .map(|&v| (((v - min) / width).floor() as usize).min(last) as u32)
        .collect();
    let edge = |b: usize| if b == num_bins { max } else { min + width * b as f64 };
    let categories = (0..num_bins)
        .map(|b| {
            if b == last {
                format!("[{},{}]", edge(b), edge(b + 1))
            } else {
                format!("[{},{})", edge(b), edge(b + 1))
            }
        })
        .collect();
    Ok((indices, FeatureSpec::new(name, categories)?))
}

/// Binary `n × d_prime` encoding with exactly one set bit per feature block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotDataset {
    schema: Schema,
    bits: Vec<u8>,
    n: usize,
}

impl OneHotDataset {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, r: usize) -> &[u8] {
        let w = self.schema.d_prime();
        &self.bits[r * w..(r + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.bits.chunks_exact(self.schema.d_prime())
    }
}

pub fn one_hot(data: &DiscreteDataset) -> OneHotDataset {
    let schema = data.schema().clone();
    let w = schema.d_prime();
    let mut bits = vec![0u8; data.len() * w];
    for (r, row) in data.rows().enumerate() {
        for (i, &c) in row.iter().enumerate() {
            bits[r * w + schema.offset(i) + c as usize] = 1;
        }
    }
    OneHotDataset {
        schema,
        bits,
        n: data.len(),
    }
}

/// Inverse of the one-hot map for a single row.
pub fn decode_row(bits: &[u8], schema: &Schema) -> Result<Vec<u32>> {
    if bits.len() != schema.d_prime() {
        return Err(Error::SchemaMismatch(format!(
            "row has width {}, schema expects {}",
            bits.len(),
            schema.d_prime()
        )));
    }
    (0..schema.num_features())
        .map(|i| {
            let block = &bits[schema.block(i)];
            let mut hot = block.iter().enumerate().filter(|(_, &b)| b != 0);
            match (hot.next(), hot.next()) {
                (Some((c, &1)), None) => Ok(c as u32),
                _ => Err(Error::Data(format!(
                    "feature {i} ('{}') block is not one-hot",
                    schema.features()[i].name
                ))),
            }
        })
        .collect()
}
