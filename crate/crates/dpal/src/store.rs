//! Checkpoints, datasets and feature dumps on top of the container format.

use std::path::Path;

use dpal_core::data::{ShapeDataset, Split};
use dpal_core::vit::{Backbone, ViTConfig};
use dpal_core::Tensor;

use crate::container::{self, Data, Entry, FormatError, FormatErrorKind};
use crate::CliError;

const CONFIG_ENTRY: &str = "config";

fn entry_error(m: impl Into<String>) -> FormatError {
    FormatError {
        offset: 0,
        kind: FormatErrorKind::Entry(m.into()),
    }
}

fn ints(e: &Entry) -> Result<&[i64], FormatError> {
    match &e.data {
        Data::I64(v) => Ok(v),
        _ => Err(entry_error(format!("{} must hold i64 values", e.name))),
    }
}

fn to_usize(v: i64, what: &str) -> Result<usize, FormatError> {
    usize::try_from(v).map_err(|_| entry_error(format!("{what}: negative value {v}")))
}

pub fn backbone_entries(b: &Backbone) -> Vec<Entry> {
    let c = &b.cfg;
    let cfg = [
        c.image_size,
        c.channels,
        c.patch_size,
        c.depth,
        c.dim,
        c.heads,
        c.mlp_ratio,
        c.num_classes,
    ];
    let mut out = vec![Entry::i64(CONFIG_ENTRY, &[8], cfg.iter().map(|&v| v as i64).collect())];
    out.extend(b.named_tensors().into_iter().map(|(n, t)| Entry::f64(n, t)));
    out
}

pub fn backbone_from_entries(entries: &[Entry]) -> Result<Backbone, FormatError> {
    let raw = ints(container::find(entries, CONFIG_ENTRY)?)?;
    if raw.len() != 8 {
        return Err(entry_error("config must have 8 values"));
    }
    let v = raw
        .iter()
        .map(|&x| to_usize(x, CONFIG_ENTRY))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ViTConfig {
        image_size: v[0],
        channels: v[1],
        patch_size: v[2],
        depth: v[3],
        dim: v[4],
        heads: v[5],
        mlp_ratio: v[6],
        num_classes: v[7],
    };
    let template = Backbone::init(cfg, 0).map_err(|e| entry_error(e.to_string()))?;
    let tensors = template
        .named_tensors()
        .into_iter()
        .map(|(name, _)| container::find(entries, &name)?.to_tensor())
        .collect::<Result<Vec<Tensor>, _>>()?;
    Backbone::from_tensors(cfg, tensors).map_err(|e| entry_error(e.to_string()))
}

pub fn save_backbone(path: &Path, b: &Backbone) -> Result<(), CliError> {
    container::save(path, &backbone_entries(b)).map_err(CliError::from)
}

pub fn load_backbone(path: &Path) -> Result<Backbone, CliError> {
    let entries = container::load(path)?;
    backbone_from_entries(&entries).map_err(|source| CliError::Format(format!("{}: {source}", path.display())))
}

pub fn dataset_entries(d: &ShapeDataset) -> Vec<Entry> {
    let split = match d.split {
        Split::Train => 0,
        Split::Test => 1,
    };
    vec![
        Entry::f64("images", &d.images),
        Entry::i64("labels", &[d.labels.len()], d.labels.iter().map(|&l| l as i64).collect()),
        Entry::i64("meta", &[2], vec![split, d.seed as i64]),
    ]
}

pub fn dataset_from_entries(entries: &[Entry]) -> Result<ShapeDataset, FormatError> {
    let images = container::find(entries, "images")?.to_tensor()?;
    let labels = ints(container::find(entries, "labels")?)?
        .iter()
        .map(|&l| to_usize(l, "labels"))
        .collect::<Result<Vec<_>, _>>()?;
    let meta = ints(container::find(entries, "meta")?)?;
    if meta.len() != 2 || images.shape().first() != Some(&labels.len()) {
        return Err(entry_error("dataset entries disagree"));
    }
    let split = match meta[0] {
        0 => Split::Train,
        1 => Split::Test,
        s => return Err(entry_error(format!("unknown split {s}"))),
    };
    Ok(ShapeDataset {
        images,
        labels,
        split,
        seed: meta[1] as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpal_core::data::generate_shapes;

    #[test]
    fn backbone_round_trip() {
        let cfg = ViTConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            ..ViTConfig::default()
        };
        let b = Backbone::init(cfg, 3).unwrap();
        let bytes = container::encode(&backbone_entries(&b)).unwrap();
        let back = backbone_from_entries(&container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.checksum(), b.checksum());
        assert_eq!(back.cfg, cfg);

        let mut entries = backbone_entries(&b);
        entries.retain(|e| e.name != "head.w");
        assert!(backbone_from_entries(&entries).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let d = generate_shapes(16, Split::Test, 5).unwrap();
        let back = dataset_from_entries(&dataset_entries(&d)).unwrap();
        assert!(back.images.bit_eq(&d.images));
        assert_eq!(back.labels, d.labels);
        assert_eq!((back.split, back.seed), (Split::Test, 5));
    }
}
