use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{load_image, resize, Image};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Seeded, endlessly cycling iterator over the images below a directory.
///
/// Each pass visits every file once in an order fixed by `(file list, seed, pass)`.
#[derive(Debug)]
pub struct DatasetCursor {
    root: PathBuf,
    files: Vec<PathBuf>,
    order: Vec<usize>,
    seed: u64,
    epoch: u64,
    position: usize,
}

impl DatasetCursor {
    pub fn open(root: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(Error::io(&root, "dataset root is not a directory"));
        }
        let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&root)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no png/jpg images found under {}",
                root.display()
            )));
        }
        files.sort();
        let mut cursor = Self {
            root,
            files,
            order: Vec::new(),
            seed,
            epoch: 0,
            position: 0,
        };
        cursor.shuffle();
        Ok(cursor)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.files.len()).collect();
        self.order.shuffle(&mut rng);
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// The path that the next call to [`Self::next_path`] will return.
    pub fn peek_path(&self) -> &Path {
        &self.files[self.order[self.position]]
    }

    pub fn next_path(&mut self) -> PathBuf {
        let path = self.files[self.order[self.position]].clone();
        self.position += 1;
        if self.position == self.order.len() {
            self.position = 0;
            self.epoch += 1;
            self.shuffle();
        }
        path
    }

    /// Next decodable image, resized to `size × size`. Undecodable files are skipped.
    pub fn next_image(&mut self, size: usize) -> Result<Image> {
        self.next_image_with_path(size).map(|(_, img)| img)
    }

    /// [`Self::next_image`] together with the file it came from.
    pub fn next_image_with_path(&mut self, size: usize) -> Result<(PathBuf, Image)> {
        for _ in 0..self.files.len() {
            let path = self.next_path();
            match load_image(&path) {
                Ok(img) => return Ok((path, resize(&img, size, size)?)),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        Err(Error::Config(format!(
            "no decodable images under {}",
            self.root.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::image::save_image;

    fn populate(dir: &Path, n: usize) {
        std::fs::create_dir_all(dir.join("nested")).unwrap();
        for i in 0..n {
            let img = Image::constant(8, 8, i as f64 / n as f64).unwrap();
            let sub = if i % 2 == 0 { dir.to_path_buf() } else { dir.join("nested") };
            save_image(&img, sub.join(format!("{i:03}.png"))).unwrap();
        }
        std::fs::write(dir.join("notes.txt"), "not an image").unwrap();
    }

    #[test]
    fn order_is_seeded_and_covers_every_file() {
        let dir = tempfile::tempdir().unwrap();
        populate(dir.path(), 7);
        let mut a = DatasetCursor::open(dir.path(), 3).unwrap();
        let mut b = DatasetCursor::open(dir.path(), 3).unwrap();
        assert_eq!(a.len(), 7);
        let pa: Vec<_> = (0..14).map(|_| a.next_path()).collect();
        let pb: Vec<_> = (0..14).map(|_| b.next_path()).collect();
        assert_eq!(pa, pb);
        let mut first: Vec<_> = pa[..7].to_vec();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 7);
    }

    #[test]
    fn corrupt_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        populate(dir.path(), 2);
        std::fs::write(dir.path().join("bad.png"), b"\x89PNG garbage").unwrap();
        let mut c = DatasetCursor::open(dir.path(), 0).unwrap();
        for _ in 0..6 {
            let img = c.next_image(16).unwrap();
            assert_eq!(img.height(), 16);
        }
    }

    #[test]
    fn empty_root_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DatasetCursor::open(dir.path(), 0), Err(Error::Config(_))));
    }
}
