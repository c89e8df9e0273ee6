use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{generate_episode, read_pgm_mask, read_ppm, write_pgm_mask, write_ppm, DomainSpec, Episode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Support,
    Query,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Support => "support",
            Role::Query => "query",
        }
    }

    fn parse(s: &str) -> Result<Role> {
        match s {
            "support" => Ok(Role::Support),
            "query" => Ok(Role::Query),
            other => Err(Error::Format(format!("manifest: unknown role `{other}`"))),
        }
    }
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub episode_id: String,
    pub domain: String,
    pub class_id: u32,
    pub shot: u32,
    pub role: Role,
    pub image_path: String,
    pub mask_path: String,
}

pub const MANIFEST_HEADER: [&str; 7] =
    ["episode_id", "domain", "class_id", "shot", "role", "image_path", "mask_path"];

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(MANIFEST_HEADER).map_err(|e| Error::Io(format!("manifest: {e}")))?;
        for r in rows {
            w.write_record([
                r.episode_id.as_str(),
                r.domain.as_str(),
                &r.class_id.to_string(),
                &r.shot.to_string(),
                r.role.as_str(),
                r.image_path.as_str(),
                r.mask_path.as_str(),
            ])
            .map_err(|e| Error::Io(format!("manifest: {e}")))?;
        }
        w.flush().map_err(|e| Error::Io(format!("manifest: {e}")))?;
    }
    crate::util::write_atomic(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    {
        let got = rdr.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let want: Vec<&str> = MANIFEST_HEADER.to_vec();
        if got.iter().collect::<Vec<_>>() != want {
            return Err(Error::Format(format!("{}: unexpected manifest header {got:?}", path.display())));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if rec.len() != 7 {
            return Err(Error::Format(format!("{}: row has {} fields", path.display(), rec.len())));
        }
        rows.push(ManifestRow {
            episode_id: rec[0].to_string(),
            domain: rec[1].to_string(),
            class_id: rec[2]
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad class_id `{}`", path.display(), &rec[2])))?,
            shot: rec[3]
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad shot `{}`", path.display(), &rec[3])))?,
            role: Role::parse(&rec[4])?,
            image_path: rec[5].to_string(),
            mask_path: rec[6].to_string(),
        });
    }
    Ok(rows)
}

/// Writes an episode's images and masks under `dir/<domain>/` and returns its
/// manifest rows.
pub fn write_episode<T: Scalar>(dir: &Path, episode: &Episode<T>, episode_id: &str) -> Result<Vec<ManifestRow>> {
    let rel = |name: String| format!("{}/{name}", episode.domain_id);
    let mut rows = Vec::new();
    for (i, (img, mask)) in episode.support_images.iter().zip(&episode.support_masks).enumerate() {
        let image_path = rel(format!("{episode_id}_s{i}.ppm"));
        let mask_path = rel(format!("{episode_id}_s{i}_mask.pgm"));
        write_ppm(&dir.join(&image_path), img)?;
        write_pgm_mask(&dir.join(&mask_path), mask)?;
        rows.push(ManifestRow {
            episode_id: episode_id.to_string(),
            domain: episode.domain_id.clone(),
            class_id: episode.class_id,
            shot: i as u32,
            role: Role::Support,
            image_path,
            mask_path,
        });
    }
    let image_path = rel(format!("{episode_id}_q.ppm"));
    let mask_path = rel(format!("{episode_id}_q_mask.pgm"));
    write_ppm(&dir.join(&image_path), &episode.query_image)?;
    write_pgm_mask(&dir.join(&mask_path), &episode.query_mask)?;
    rows.push(ManifestRow {
        episode_id: episode_id.to_string(),
        domain: episode.domain_id.clone(),
        class_id: episode.class_id,
        shot: 0,
        role: Role::Query,
        image_path,
        mask_path,
    });
    Ok(rows)
}

/// Reassembles one episode from its manifest rows.
pub fn read_episode<T: Scalar>(dir: &Path, rows: &[ManifestRow]) -> Result<Episode<T>> {
    if rows.is_empty() {
        return Err(Error::Format("read_episode: no manifest rows".into()));
    }
    let mut supports: Vec<&ManifestRow> = rows.iter().filter(|r| r.role == Role::Support).collect();
    supports.sort_by_key(|r| r.shot);
    let query = rows
        .iter()
        .find(|r| r.role == Role::Query)
        .ok_or_else(|| Error::Format(format!("episode {}: missing query row", rows[0].episode_id)))?;
    let mut support_images = Vec::with_capacity(supports.len());
    let mut support_masks = Vec::with_capacity(supports.len());
    for r in &supports {
        support_images.push(read_ppm(&dir.join(&r.image_path))?);
        support_masks.push(read_pgm_mask(&dir.join(&r.mask_path))?);
    }
    if support_images.is_empty() {
        return Err(Error::Format(format!("episode {}: no support rows", rows[0].episode_id)));
    }
    Ok(Episode {
        support_images,
        support_masks,
        query_image: read_ppm(&dir.join(&query.image_path))?,
        query_mask: read_pgm_mask(&dir.join(&query.mask_path))?,
        domain_id: rows[0].domain.clone(),
        class_id: rows[0].class_id,
    })
}

/// All episodes of a dataset, grouped by domain in manifest order.
pub struct EpisodeBank<T> {
    domains: Vec<String>,
    by_domain: BTreeMap<String, Vec<Episode<T>>>,
}

impl<T: Scalar> EpisodeBank<T> {
    /// Loads a dataset directory written by `gen-data` (or [`write_dataset`]).
    pub fn load(data_dir: &Path) -> Result<Self> {
        let manifest = data_dir.join("manifest.csv");
        let rows = read_manifest(&manifest)?;
        let mut groups: Vec<(String, Vec<ManifestRow>)> = Vec::new();
        for row in rows {
            match groups.last_mut() {
                Some((id, gr)) if *id == row.episode_id => gr.push(row),
                _ => groups.push((row.episode_id.clone(), vec![row])),
            }
        }
        let mut domains = Vec::new();
        let mut by_domain: BTreeMap<String, Vec<Episode<T>>> = BTreeMap::new();
        for (_, group) in &groups {
            let ep = read_episode(data_dir, group)?;
            if !domains.contains(&ep.domain_id) {
                domains.push(ep.domain_id.clone());
            }
            by_domain.entry(ep.domain_id.clone()).or_default().push(ep);
        }
        if domains.is_empty() {
            return Err(Error::Format(format!("{}: empty manifest", manifest.display())));
        }
        Ok(Self { domains, by_domain })
    }

    /// Builds a bank in memory with the same episode seeds `gen-data` uses.
    pub fn generate(specs: &[DomainSpec], per_domain: usize, shots: usize, size: usize, seed: u64) -> Result<Self> {
        let mut domains = Vec::new();
        let mut by_domain = BTreeMap::new();
        for spec in specs {
            let mut eps = Vec::with_capacity(per_domain);
            for i in 0..per_domain {
                eps.push(generate_episode(seed.wrapping_add(i as u64), spec, shots, size, size)?);
            }
            domains.push(spec.name.clone());
            by_domain.insert(spec.name.clone(), eps);
        }
        Ok(Self { domains, by_domain })
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn episodes(&self, domain: &str) -> Result<&[Episode<T>]> {
        self.by_domain
            .get(domain)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("domains: `{domain}` not present in dataset")))
    }
}

/// Materializes a dataset directory: episodes for every domain plus a
/// manifest. Episode seeds are `seed + index`, shared across domains so the
/// geometry is paired. Returns per-domain episode counts.
pub fn write_dataset<T: Scalar>(
    data_dir: &Path,
    specs: &[DomainSpec],
    per_domain: usize,
    shots: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<(String, usize)>> {
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for spec in specs {
        for i in 0..per_domain {
            let ep: Episode<T> = generate_episode(seed.wrapping_add(i as u64), spec, shots, size, size)?;
            let id = format!("{}-{i:04}", spec.name);
            rows.extend(write_episode(data_dir, &ep, &id)?);
        }
        counts.push((spec.name.clone(), per_domain));
    }
    write_manifest(&data_dir.join("manifest.csv"), &rows)?;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn episode_round_trip_masks_exact_images_quantized() {
        let dir = tempdir().unwrap();
        let ep: Episode<f32> = generate_episode(21, &DomainSpec::preset("weave").unwrap(), 2, 32, 32).unwrap();
        let rows = write_episode(dir.path(), &ep, "weave-0021").unwrap();
        assert_eq!(rows.len(), 3); // 2 support rows + 1 query row
        let back: Episode<f32> = read_episode(dir.path(), &rows).unwrap();
        assert_eq!(back.support_masks, ep.support_masks);
        assert_eq!(back.query_mask, ep.query_mask);
        assert_eq!(back.class_id, ep.class_id);
        let tol = 0.5 / 255.0 + 1e-6;
        assert!(back.query_image.max_abs_diff(&ep.query_image) <= tol);
        for (a, b) in back.support_images.iter().zip(&ep.support_images) {
            assert!(a.max_abs_diff(b) <= tol);
        }
    }

    #[test]
    fn dataset_write_then_load() {
        let dir = tempdir().unwrap();
        let specs = vec![DomainSpec::source(), DomainSpec::preset("tint").unwrap()];
        let counts = write_dataset::<f32>(dir.path(), &specs, 3, 1, 32, 40).unwrap();
        assert_eq!(counts, vec![("source".to_string(), 3), ("tint".to_string(), 3)]);
        let bank: EpisodeBank<f32> = EpisodeBank::load(dir.path()).unwrap();
        assert_eq!(bank.domains(), &["source".to_string(), "tint".to_string()]);
        assert_eq!(bank.episodes("source").unwrap().len(), 3);
        // Paired geometry: same index, same mask across domains.
        let s = &bank.episodes("source").unwrap()[1];
        let t = &bank.episodes("tint").unwrap()[1];
        assert_eq!(s.query_mask, t.query_mask);
    }

    #[test]
    fn manifest_header_mismatch_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Format(_))));
    }
}
