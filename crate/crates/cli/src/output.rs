//! CSV helpers. Floats use shortest round-trip formatting.

use std::path::Path;

use crate::Result;

pub struct Table {
    writer: csv::Writer<std::fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Formats a float; non-finite values become `NaN`, `inf` or `-inf`.
pub fn num(v: f64) -> String {
    v.to_string()
}
