use std::path::Path;

use crate::error::CliError;

/// 17 significant digits, so a value survives a text round trip bitwise.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(dir: &Path, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(())
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}
