//! Dataset directories: `{split}/images/*.pgm`, `{split}/masks/*.pgm`,
//! `{split}/prompts.tsv` (file name, TAB, prompt).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm};
use crate::synth::{SegSample, Split};

pub fn write_split(root: &Path, split: Split, samples: &[SegSample]) -> Result<()> {
    let dir = root.join(split.name());
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut tsv = String::new();
    for s in samples {
        if s.prompt.contains(['\t', '\n']) {
            return Err(Error::Dataset(format!("prompt of {} contains a tab or newline", s.name)));
        }
        let file = format!("{}.pgm", s.name);
        write_pgm(&dir.join("images").join(&file), &s.image)?;
        write_pgm(&dir.join("masks").join(&file), &s.mask)?;
        tsv.push_str(&format!("{file}\t{}\n", s.prompt));
    }
    fs::write(dir.join("prompts.tsv"), tsv)?;
    Ok(())
}

/// Writes every split present in `samples`; empty splits still get their
/// directories and an empty `prompts.tsv`.
pub fn write_dataset(root: &Path, samples: &[(Split, SegSample)]) -> Result<()> {
    for split in Split::ALL {
        let part: Vec<SegSample> = samples
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, x)| x.clone())
            .collect();
        write_split(root, split, &part)?;
    }
    Ok(())
}

/// Reads one split in `prompts.tsv` order.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<SegSample>> {
    let dir = root.join(split.name());
    let tsv_path = dir.join("prompts.tsv");
    let tsv = fs::read_to_string(&tsv_path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", tsv_path.display())))?;
    let mut out = Vec::new();
    for (i, line) in tsv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, prompt) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: expected `file<TAB>prompt`", tsv_path.display(), i + 1))
        })?;
        let image = read_pgm(&dir.join("images").join(file))?;
        let mask = read_pgm(&dir.join("masks").join(file))?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::Dataset(format!(
                "{file}: image {}x{} and mask {}x{} differ",
                image.width, image.height, mask.width, mask.height
            )));
        }
        out.push(SegSample {
            name: file.trim_end_matches(".pgm").to_string(),
            image,
            mask,
            prompt: prompt.to_string(),
        });
    }
    Ok(out)
}
