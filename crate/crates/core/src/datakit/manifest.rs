//! Manifest CSV reading and writing.
//!
//! Columns, in order: `sample_id, image_ref, split, race, gender`, then one
//! 0/1 column per class. Resampled manifests may carry a trailing
//! `provenance` column naming the source sample of a duplicate.

use std::path::Path;

use super::{DataError, DatasetManifest, Gender, Race, Record, Split};

const REQUIRED: [&str; 5] = ["sample_id", "image_ref", "split", "race", "gender"];
const PROVENANCE: &str = "provenance";

/// Loads a manifest; unknown race strings map to `Other`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    read(path.as_ref(), false)
}

/// Loads a manifest; unknown race strings are a parse error.
pub fn load_manifest_strict(path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    read(path.as_ref(), true)
}

fn read(path: &Path, strict: bool) -> Result<DatasetManifest, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut fixed = [0usize; 5];
    for (slot, name) in fixed.iter_mut().zip(REQUIRED) {
        *slot = position(name).ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    let provenance_col = position(PROVENANCE);
    let label_cols: Vec<usize> = (0..headers.len())
        .filter(|i| !fixed.contains(i) && Some(*i) != provenance_col)
        .collect();
    if label_cols.is_empty() {
        return Err(DataError::MissingColumn("<label columns>".into()));
    }
    let class_names: Vec<String> = label_cols.iter().map(|&i| headers[i].trim().to_string()).collect();

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let parse_err = |message: String| DataError::Parse { row: row_no, message };
        let split: Split = row[fixed[2]].parse().map_err(parse_err)?;
        let race_raw = &row[fixed[3]];
        let race = match Race::parse(race_raw) {
            Some(r) => r,
            None if strict => return Err(parse_err(format!("unknown race `{race_raw}`"))),
            None => Race::Other,
        };
        let gender_raw = &row[fixed[4]];
        let gender = Gender::parse(gender_raw).ok_or_else(|| parse_err(format!("unknown gender `{gender_raw}`")))?;
        let mut labels = Vec::with_capacity(label_cols.len());
        for &col in &label_cols {
            match row[col].trim() {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    return Err(parse_err(format!("label `{}` = `{other}` is not 0 or 1", headers[col].trim())))
                }
            }
        }
        let provenance = provenance_col.map(|c| row[c].trim().to_string()).filter(|s| !s.is_empty());
        records.push(Record {
            sample_id: row[fixed[0]].trim().to_string(),
            image_ref: row[fixed[1]].trim().to_string(),
            split,
            race,
            gender,
            labels,
            provenance,
        });
    }
    DatasetManifest::new(class_names, records)
}

/// Writes a manifest. The `provenance` column is emitted only when some record
/// carries one.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), DataError> {
    let with_provenance = manifest.records.iter().any(|r| r.provenance.is_some());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(manifest.class_names.iter().map(String::as_str));
    if with_provenance {
        header.push(PROVENANCE);
    }
    writer.write_record(&header)?;
    for r in &manifest.records {
        let mut row: Vec<String> = vec![
            r.sample_id.clone(),
            r.image_ref.clone(),
            r.split.as_str().to_string(),
            r.race.as_str().to_string(),
            r.gender.as_str().to_string(),
        ];
        row.extend(r.labels.iter().map(|v| v.to_string()));
        if with_provenance {
            row.push(r.provenance.clone().unwrap_or_default());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
