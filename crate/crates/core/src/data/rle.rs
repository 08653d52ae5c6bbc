use super::Mask;
use crate::{Error, Result};

/// Decode a column-major, 1-indexed `start run` RLE string.
pub fn decode_rle(rle: &str, height: usize, width: usize) -> Result<Mask> {
    let total = height * width;
    let tokens: Vec<usize> = rle
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("invalid RLE token `{t}`")))
        })
        .collect::<Result<_>>()?;
    if tokens.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "RLE has an odd number of tokens ({})",
            tokens.len()
        )));
    }
    // Column-major flat buffer, transposed at the end.
    let mut flat = vec![0u8; total];
    let mut last_end = 0;
    for pair in tokens.chunks(2) {
        let (start, run) = (pair[0], pair[1]);
        if start == 0 || run == 0 {
            return Err(Error::Format(format!(
                "RLE pair `{start} {run}` must hold positive integers"
            )));
        }
        let begin = start - 1;
        let end = begin + run;
        if end > total {
            return Err(Error::Bounds(format!(
                "RLE run `{start} {run}` ends past pixel {total}"
            )));
        }
        if begin < last_end {
            return Err(Error::Format(format!(
                "RLE run starting at {start} overlaps or precedes the previous run"
            )));
        }
        flat[begin..end].iter_mut().for_each(|v| *v = 1);
        last_end = end;
    }
    let mut data = vec![0u8; total];
    for col in 0..width {
        for row in 0..height {
            data[row * width + col] = flat[col * height + row];
        }
    }
    Mask::from_vec(height, width, data)
}

/// Encode a mask as maximal column-major runs with ascending starts.
pub fn encode_rle(mask: &Mask) -> String {
    let (h, w) = (mask.height(), mask.width());
    let mut parts = Vec::new();
    let mut run_start: Option<usize> = None;
    for col in 0..w {
        for row in 0..h {
            let pos = col * h + row;
            match (mask.get(row, col), run_start) {
                (true, None) => run_start = Some(pos),
                (false, Some(s)) => {
                    parts.push(format!("{} {}", s + 1, pos - s));
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    if let Some(s) = run_start {
        parts.push(format!("{} {}", s + 1, h * w - s));
    }
    parts.join(" ")
}
