//! Attention-map export (binary PGM heatmaps plus a raw CSV dump) and the
//! occlusion attention score used by the directional experiments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-head grayscale heatmaps. Each head's weights scale linearly so its
/// maximum maps to 255; an all-equal head renders flat gray 128. Returns the
/// written file paths (K images followed by the CSV).
pub fn export_attention(
    alpha: &Tensor,
    hf: usize,
    wf: usize,
    out_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let (j, k) = alpha.dims2()?;
    if j != hf * wf {
        return Err(Error::Dim(format!(
            "alpha has {j} pixels but the grid is {hf}x{wf} = {}",
            hf * wf
        )));
    }
    if let Some(parent) = out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    let mut written = Vec::with_capacity(k + 1);
    for head in 0..k {
        let col: Vec<f64> = (0..j).map(|p| alpha.at2(p, head)).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let pixels: Vec<u8> = if max == min {
            vec![128u8; j]
        } else {
            col.iter().map(|&v| ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
        };
        let mut pgm = format!("P5\n{wf} {hf}\n255\n").into_bytes();
        pgm.extend_from_slice(&pixels);
        let path = with_suffix(out_prefix, &format!("_head{head}.pgm"));
        fs::write(&path, pgm).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
        written.push(path);
    }
    let mut csv = String::from("pixel,head,weight\n");
    for p in 0..j {
        for h in 0..k {
            csv.push_str(&format!("{p},{h},{}\n", alpha.at2(p, h)));
        }
    }
    let csv_path = with_suffix(out_prefix, "_alpha.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| Error::Io(format!("writing {}: {e}", csv_path.display())))?;
    written.push(csv_path);
    Ok(written)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// The attention profile the fused feature actually uses: each head's column
/// scaled by its fusion weight. Raw per-pixel softmax weights give every
/// pixel the same total mass, so occlusion analysis reads the fused profile.
pub fn fused_attention(alpha: &Tensor, beta: &[f64]) -> Result<Tensor> {
    let (j, k) = alpha.dims2()?;
    if beta.len() != k {
        return Err(Error::Dim(format!(
            "{} fusion weights for {k} heads",
            beta.len()
        )));
    }
    let mut out = Tensor::zeros(&[j, k]);
    for p in 0..j {
        for h in 0..k {
            out.data_mut()[p * k + h] = alpha.at2(p, h) * beta[h];
        }
    }
    Ok(out)
}

/// Fraction of total attention mass on occluded pixels: the per-pixel
/// head-mean weights summed over the mask, divided by their sum over all
/// pixels. Uniform attention scores exactly the occluded-pixel fraction.
pub fn attention_occlusion_score(alpha: &Tensor, mask: &[bool]) -> Result<f64> {
    let (j, k) = alpha.dims2()?;
    if mask.len() != j {
        return Err(Error::Dim(format!(
            "mask has {} pixels, alpha has {j}",
            mask.len()
        )));
    }
    let mut occluded = 0.0;
    let mut total = 0.0;
    for p in 0..j {
        let mean: f64 = (0..k).map(|h| alpha.at2(p, h)).sum::<f64>() / k as f64;
        total += mean;
        if mask[p] {
            occluded += mean;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(occluded / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mhsa-export-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn uniform_alpha_renders_flat_gray() {
        let dir = tmp_dir("uniform");
        let alpha = Tensor::full(&[24, 2], 0.5);
        let files = export_attention(&alpha, 6, 4, &dir.join("attn")).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files[..2] {
            let bytes = fs::read(f).unwrap();
            let header = b"P5\n4 6\n255\n";
            assert_eq!(&bytes[..header.len()], header);
            assert!(bytes[header.len()..].iter().all(|&b| b == 128));
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn one_hot_head_renders_single_bright_pixel() {
        let dir = tmp_dir("onehot");
        let mut alpha = Tensor::zeros(&[24, 1]);
        alpha.data_mut()[13] = 1.0;
        let files = export_attention(&alpha, 6, 4, &dir.join("attn")).unwrap();
        let bytes = fs::read(&files[0]).unwrap();
        let header_len = b"P5\n4 6\n255\n".len();
        let pixels = &bytes[header_len..];
        assert_eq!(pixels.len(), 24);
        assert_eq!(pixels[13], 255);
        assert_eq!(pixels.iter().filter(|&&b| b == 0).count(), 23);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_has_j_times_k_rows() {
        let dir = tmp_dir("csv");
        let mut rng = Rng::new(1);
        let mut alpha = Tensor::zeros(&[24, 3]);
        for v in alpha.data_mut() {
            *v = rng.next_f64();
        }
        let files = export_attention(&alpha, 6, 4, &dir.join("attn")).unwrap();
        let csv = fs::read_to_string(files.last().unwrap()).unwrap();
        let data_rows = csv.trim_end().lines().count() - 1;
        assert_eq!(data_rows, 24 * 3);
        assert!(csv.starts_with("pixel,head,weight\n"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_grid_is_dimension_error() {
        let alpha = Tensor::full(&[24, 2], 0.5);
        let err = export_attention(&alpha, 5, 4, Path::new("/tmp/unused")).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn uniform_attention_score_is_occluded_fraction() {
        let alpha = Tensor::full(&[24, 4], 0.25);
        let mut mask = vec![false; 24];
        for m in mask.iter_mut().take(6) {
            *m = true;
        }
        let score = attention_occlusion_score(&alpha, &mask).unwrap();
        assert_eq!(score, 0.25);
    }

    #[test]
    fn concentrated_attention_scores_zero() {
        let mut alpha = Tensor::zeros(&[8, 2]);
        // All mass on unoccluded pixels 4..8.
        for p in 4..8 {
            alpha.data_mut()[p * 2] = 1.0;
            alpha.data_mut()[p * 2 + 1] = 0.5;
        }
        let mut mask = vec![false; 8];
        for m in mask.iter_mut().take(4) {
            *m = true;
        }
        assert_eq!(attention_occlusion_score(&alpha, &mask).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_double_loop_summation() {
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let j = 12;
            let k = 3;
            let mut alpha = Tensor::zeros(&[j, k]);
            for v in alpha.data_mut() {
                *v = rng.next_f64();
            }
            let mask: Vec<bool> = (0..j).map(|_| rng.next_f64() < 0.3).collect();
            let score = attention_occlusion_score(&alpha, &mask).unwrap();

            let mut occ = 0.0;
            let mut total = 0.0;
            for p in 0..j {
                for h in 0..k {
                    total += alpha.at2(p, h) / k as f64;
                    if mask[p] {
                        occ += alpha.at2(p, h) / k as f64;
                    }
                }
            }
            let expect = occ / total;
            assert!((score - expect).abs() < 1e-12);
        }
    }
}
