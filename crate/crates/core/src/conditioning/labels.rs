use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const GENDER_CLASSES: usize = 2;
pub const AGE_BINS: usize = 9;
pub const SKIN_TONES: usize = 19;
/// Output width of the gender, age and skin-tone heads, in that order.
pub const HEAD_SIZES: [usize; 3] = [GENDER_CLASSES, AGE_BINS, SKIN_TONES];
pub const LABELS_CSV_HEADER: [&str; 4] = ["filename", "gender", "age_bin", "skin_tone"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeLabels {
    pub gender: usize,
    pub age_bin: usize,
    pub skin_tone: usize,
}

impl AttributeLabels {
    pub fn new(gender: usize, age_bin: usize, skin_tone: usize) -> Result<Self> {
        Self::from_array([gender, age_bin, skin_tone])
    }

    pub fn from_array(v: [usize; 3]) -> Result<Self> {
        for (i, (&x, &n)) in v.iter().zip(&HEAD_SIZES).enumerate() {
            if x >= n {
                let name = ["gender", "age_bin", "skin_tone"][i];
                return Err(Error::Contract(format!("{name} label {x} outside [0, {n})")));
            }
        }
        Ok(AttributeLabels {
            gender: v[0],
            age_bin: v[1],
            skin_tone: v[2],
        })
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.gender, self.age_bin, self.skin_tone]
    }
}

pub fn write_labels_csv<W: Write>(w: W, rows: &[(String, AttributeLabels)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(LABELS_CSV_HEADER).map_err(csv_err)?;
    for (name, l) in rows {
        out.write_record([
            name.clone(),
            l.gender.to_string(),
            l.age_bin.to_string(),
            l.skin_tone.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels_csv<R: Read>(r: R) -> Result<HashMap<String, AttributeLabels>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != LABELS_CSV_HEADER {
        return Err(Error::Format(format!("labels header {header:?}, expected {LABELS_CSV_HEADER:?}")));
    }
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |j: usize| -> Result<usize> {
            rec.get(j)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("labels row {}: bad field {j}", i + 2)))
        };
        let labels = AttributeLabels::new(num(1)?, num(2)?, num(3)?)?;
        out.insert(rec[0].to_string(), labels);
    }
    Ok(out)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_checks() {
        assert!(AttributeLabels::new(1, 8, 18).is_ok());
        assert!(matches!(AttributeLabels::new(2, 0, 0), Err(Error::Contract(_))));
        assert!(AttributeLabels::new(0, 9, 0).is_err());
        assert!(AttributeLabels::new(0, 0, 19).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            ("a".to_string(), AttributeLabels::new(0, 3, 7).unwrap()),
            ("b".to_string(), AttributeLabels::new(1, 8, 18).unwrap()),
        ];
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"filename,gender,age_bin,skin_tone\n"));
        let back = read_labels_csv(buf.as_slice()).unwrap();
        assert_eq!(back["b"], rows[1].1);
        assert!(read_labels_csv(&b"name,g\nx,1\n"[..]).is_err());
    }
}
