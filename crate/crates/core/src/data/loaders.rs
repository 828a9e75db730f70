use std::path::Path;

use ndarray::{Array4, Axis};

use super::{empty_images, Domain};
use crate::error::{Error, Result};

/// Parse a label manifest: one `relative_path<TAB>class_id` line per sample.
/// Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, usize)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (path, class) = line
                .split_once('\t')
                .ok_or_else(|| Error::invalid(format!("manifest line {}: expected `path<TAB>class_id`", i + 1)))?;
            let class = class
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::invalid(format!("manifest line {}: bad class id: {e}", i + 1)))?;
            Ok((path.to_string(), class))
        })
        .collect()
}

/// Load every image listed in `manifest` (paths relative to the manifest's
/// directory) as RGB in `[0, 1]`. All images must share one size.
pub fn load_manifest_domain(name: &str, manifest: &Path) -> Result<Domain> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let entries = parse_manifest(&text)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut images: Option<Array4<f64>> = None;
    let mut labels = Vec::with_capacity(entries.len());
    for (i, (rel, class)) in entries.iter().enumerate() {
        let path = root.join(rel);
        let img = image::open(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let arr = images.get_or_insert_with(|| Array4::zeros((entries.len(), 3, h as usize, w as usize)));
        if arr.shape()[2] != h as usize || arr.shape()[3] != w as usize {
            return Err(Error::Shape(format!(
                "{} is {w}x{h}, expected {}x{}",
                path.display(),
                arr.shape()[3],
                arr.shape()[2]
            )));
        }
        let mut dst = arr.index_axis_mut(Axis(0), i);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                dst[[c, y as usize, x as usize]] = px[c] as f64 / 255.0;
            }
        }
        labels.push(*class);
    }
    Ok(Domain {
        name: name.to_string(),
        images: images.unwrap_or_else(|| empty_images([3, 1, 1])),
        labels,
    })
}

/// Load a CSV feature table (`class_id,f1,...,fD`, no header) as a domain of
/// `[D, 1, 1]` samples.
pub fn load_feature_domain(name: &str, path: &Path) -> Result<Domain> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let mut fields = rec.iter();
        let class = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::invalid(format!("{}: row {} lacks a class id", path.display(), i + 1)))?;
        let row = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Shape(format!("{}: row {} has {} features, expected {d}", path.display(), i + 1, row.len())))
            }
            _ => {}
        }
        labels.push(class);
        values.extend(row);
    }
    let d = dim.unwrap_or(1);
    let images = Array4::from_shape_vec((labels.len(), d, 1, 1), values).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Domain {
        name: name.to_string(),
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a/1.png\t3\n\nb/2.png\t0\n").unwrap();
        assert_eq!(m, vec![("a/1.png".to_string(), 3), ("b/2.png".to_string(), 0)]);
        assert!(parse_manifest("no-tab 3").is_err());
        assert!(parse_manifest("x.png\tcat").is_err());
    }

    #[test]
    fn manifest_images_load_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = image::RgbImage::new(4, 3);
        img.put_pixel(1, 2, image::Rgb([255, 0, 51]));
        img.save(dir.path().join("a.png")).unwrap();
        img.save(dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("labels.tsv"), "a.png\t1\nb.png\t4\n").unwrap();
        let d = load_manifest_domain("photos", &dir.path().join("labels.tsv")).unwrap();
        assert_eq!(d.images.shape(), &[2, 3, 3, 4]);
        assert_eq!(d.labels, vec![1, 4]);
        assert_eq!(d.images[[0, 0, 2, 1]], 1.0);
        assert!((d.images[[1, 2, 2, 1]] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn feature_tables_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "0,1.5,2\n2,-1,0.25\n").unwrap();
        let d = load_feature_domain("feat", &p).unwrap();
        assert_eq!(d.images.shape(), &[2, 2, 1, 1]);
        assert_eq!(d.images[[1, 1, 0, 0]], 0.25);
        std::fs::write(&p, "0,1.5,2\n2,-1\n").unwrap();
        assert!(load_feature_domain("feat", &p).is_err());
    }
}
