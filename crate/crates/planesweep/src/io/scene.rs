//! Scene directories: `images/`, `cams/`, a `pair.txt` ranking source views
//! per reference, and optionally `depths/` with ground truth float maps.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::grid::Grid;
use crate::io::{cams, pfm, pnm};

/// One loaded view: camera, luminance image, and color if the file had it.
#[derive(Debug, Clone)]
pub struct SceneView {
    pub camera: Camera,
    pub image: Grid<f64>,
    pub color: Option<Grid<[u8; 3]>>,
}

/// An ordered set of views plus the reference -> ranked-sources pair list.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub views: Vec<SceneView>,
    /// (reference id, source ids best first)
    pub pairs: Vec<(usize, Vec<usize>)>,
}

impl SceneBundle {
    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    /// Ranked sources for a reference, capped at `max_views - 1` entries.
    pub fn sources_for(&self, reference: usize, max_views: usize) -> Result<Vec<usize>> {
        let entry = self
            .pairs
            .iter()
            .find(|(r, _)| *r == reference)
            .ok_or_else(|| {
                Error::Structure(format!("no pair entry for reference view {reference}"))
            })?;
        Ok(entry.1.iter().take(max_views.saturating_sub(1)).copied().collect())
    }
}

fn image_name(i: usize) -> String {
    format!("{i:08}.pgm")
}

fn cam_name(i: usize) -> String {
    format!("{i:08}_cam.txt")
}

pub fn depth_name(i: usize) -> String {
    format!("{i:08}.pfm")
}

/// Write a scene directory. `gt_depths`, when given, fills `depths/`.
pub fn write_scene(
    root: &Path,
    views: &[SceneView],
    pairs: &[(usize, Vec<usize>)],
    gt_depths: Option<&[Grid<f64>]>,
) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("cams"))?;
    for (i, view) in views.iter().enumerate() {
        pnm::write_gray(&view.image, &root.join("images").join(image_name(i)))?;
        cams::write_camera(&view.camera, &root.join("cams").join(cam_name(i)))?;
    }
    let mut pair_text = format!("{}\n", views.len());
    for (r, srcs) in pairs {
        pair_text.push_str(&format!("{r}\n{}", srcs.len()));
        for (rank, s) in srcs.iter().enumerate() {
            pair_text.push_str(&format!(" {s} {:.1}", 100.0 - rank as f64));
        }
        pair_text.push('\n');
    }
    fs::write(root.join("pair.txt"), pair_text)?;
    if let Some(depths) = gt_depths {
        fs::create_dir_all(root.join("depths"))?;
        for (i, d) in depths.iter().enumerate() {
            pfm::write_depth(d, &root.join("depths").join(depth_name(i)))?;
        }
    }
    Ok(())
}

/// Load a scene directory; validates counts, pair indices and image sizes.
pub fn read_scene(root: &Path) -> Result<SceneBundle> {
    if !root.is_dir() {
        return Err(Error::Structure(format!(
            "scene directory {} does not exist",
            root.display()
        )));
    }
    let pair_path = root.join("pair.txt");
    let pair_text = fs::read_to_string(&pair_path)
        .map_err(|_| Error::Structure(format!("missing pair list {}", pair_path.display())))?;
    let pairs_raw = parse_pairs(&pair_text, &pair_path)?;
    let total = pairs_raw.0;
    let pairs = pairs_raw.1;

    let mut views = Vec::with_capacity(total);
    let mut dims: Option<(usize, usize)> = None;
    for i in 0..total {
        let img_path = find_image(root, i)?;
        let image = pnm::read_image(&img_path)?;
        let camera = cams::read_camera(&root.join("cams").join(cam_name(i)))?;
        let d = (image.luminance.height(), image.luminance.width());
        match dims {
            None => dims = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::Structure(format!(
                    "view {i} has dimensions {}x{}, expected {}x{}",
                    d.0, d.1, expect.0, expect.1
                )))
            }
            _ => {}
        }
        views.push(SceneView {
            camera,
            image: image.luminance,
            color: image.color,
        });
    }

    for (r, srcs) in &pairs {
        if *r >= total || srcs.iter().any(|s| *s >= total) {
            return Err(Error::Structure(format!(
                "pair list references a view outside 0..{total} (entry for reference {r})"
            )));
        }
    }

    Ok(SceneBundle { views, pairs })
}

/// Ground-truth depth for view `i` when the scene carries one.
pub fn read_gt_depth(root: &Path, i: usize) -> Result<Grid<f64>> {
    pfm::read_depth(&root.join("depths").join(depth_name(i)))
}

fn find_image(root: &Path, i: usize) -> Result<PathBuf> {
    let pgm = root.join("images").join(image_name(i));
    if pgm.exists() {
        return Ok(pgm);
    }
    let ppm = root.join("images").join(format!("{i:08}.ppm"));
    if ppm.exists() {
        return Ok(ppm);
    }
    Err(Error::Structure(format!(
        "missing image for view {i} under {}",
        root.join("images").display()
    )))
}

fn parse_pairs(text: &str, path: &Path) -> Result<(usize, Vec<(usize, Vec<usize>)>)> {
    let mut tokens = text.split_whitespace();
    let parse_err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    let total: usize = tokens
        .next()
        .ok_or_else(|| parse_err("empty pair list".into()))?
        .parse()
        .map_err(|_| parse_err("bad view count".into()))?;
    if total == 0 || total > 100_000 {
        return Err(parse_err(format!("unreasonable view count {total}")));
    }
    let mut pairs = Vec::new();
    while let Some(ref_tok) = tokens.next() {
        let r: usize = ref_tok
            .parse()
            .map_err(|_| parse_err(format!("bad reference id '{ref_tok}'")))?;
        let n: usize = tokens
            .next()
            .ok_or_else(|| parse_err(format!("missing source count for reference {r}")))?
            .parse()
            .map_err(|_| parse_err(format!("bad source count for reference {r}")))?;
        let mut srcs = Vec::with_capacity(n);
        for _ in 0..n {
            let s: usize = tokens
                .next()
                .ok_or_else(|| parse_err(format!("truncated source list for reference {r}")))?
                .parse()
                .map_err(|_| parse_err("bad source id".into()))?;
            let _score: f64 = tokens
                .next()
                .ok_or_else(|| parse_err(format!("missing score for reference {r}")))?
                .parse()
                .map_err(|_| parse_err("bad score".into()))?;
            srcs.push(s);
        }
        pairs.push((r, srcs));
    }
    Ok((total, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Matrix4};

    fn make_view(offset: f64) -> SceneView {
        let k = Matrix3::new(30.0, 0.0, 8.0, 0.0, 30.0, 8.0, 0.0, 0.0, 1.0);
        let mut t = Matrix4::identity();
        t[(0, 3)] = offset;
        SceneView {
            camera: Camera::new(k, t, (2.0, 6.0)).unwrap(),
            image: Grid::from_fn(16, 16, |y, x| ((x * 16 + y) % 251) as f64),
            color: None,
        }
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<SceneView> = (0..5).map(|i| make_view(i as f64 * 0.1)).collect();
        let pairs: Vec<(usize, Vec<usize>)> = (0..5)
            .map(|r| (r, (0..5).filter(|s| *s != r).collect()))
            .collect();
        let gt: Vec<Grid<f64>> = (0..5).map(|_| Grid::filled(16, 16, 4.0)).collect();
        write_scene(dir.path(), &views, &pairs, Some(&gt)).unwrap();

        let bundle = read_scene(dir.path()).unwrap();
        assert_eq!(bundle.view_count(), 5);
        assert_eq!(bundle.views[2].image, views[2].image);
        assert_eq!(bundle.sources_for(0, 3).unwrap(), vec![1, 2]);
        let d = read_gt_depth(dir.path(), 3).unwrap();
        assert_eq!(d.at(5, 5), 4.0);
    }

    #[test]
    fn out_of_range_pair_entry_is_structural() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<SceneView> = (0..3).map(|i| make_view(i as f64 * 0.1)).collect();
        let pairs = vec![(0usize, vec![1usize, 99])];
        write_scene(dir.path(), &views, &pairs, None).unwrap();
        // Rewrite pair.txt declaring 3 views but referencing 99.
        match read_scene(dir.path()).unwrap_err() {
            Error::Structure(msg) => assert!(msg.contains("outside")),
            other => panic!("expected structural error, got {other}"),
        }
    }

    #[test]
    fn count_mismatch_is_structural() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<SceneView> = (0..3).map(|i| make_view(i as f64 * 0.1)).collect();
        let pairs: Vec<(usize, Vec<usize>)> = vec![(0, vec![1]), (1, vec![0]), (2, vec![0])];
        write_scene(dir.path(), &views, &pairs, None).unwrap();
        std::fs::remove_file(dir.path().join("images").join(image_name(2))).unwrap();
        match read_scene(dir.path()).unwrap_err() {
            Error::Structure(msg) => assert!(msg.contains("missing image")),
            other => panic!("expected structural error, got {other}"),
        }
    }
}
