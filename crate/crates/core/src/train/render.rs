use crate::data::LabelMap;
use crate::error::{config_err, Result};

/// Binary PPM (P6, maxval 255). Class `c ≥ 1` takes `palette[c-1]`; 0 is
/// black.
pub fn render_map(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let max = labels.data.iter().copied().max().unwrap_or(0) as usize;
    if max > palette.len() {
        return Err(config_err!("palette has {} colours but the map uses class {max}", palette.len()));
    }
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.reserve(labels.data.len() * 3);
    for &v in &labels.data {
        match v {
            0 => out.extend([0, 0, 0]),
            c => out.extend(palette[c as usize - 1]),
        }
    }
    Ok(out)
}
