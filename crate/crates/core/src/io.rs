//! Binary token grids, PGM masks and maps, checkpoints, dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use crate::alignment::AnomalyMap;
use crate::config::{parse_synthetic_spec, synthetic_spec_to_string, TrainConfig};
use crate::data::{Dataset, LabeledSample, Mask, SyntheticSpec, TokenGrid};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::SubspaceModel;
use crate::scalar::Scalar;

pub const TOKEN_MAGIC: &[u8; 4] = b"TOKB";
pub const TOKEN_VERSION: u8 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TKCK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor that reports truncation against a path.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(self.path.to_path_buf()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4], version: u8) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("bad magic {:?}", String::from_utf8_lossy(found)),
            });
        }
        let v = self.u8()?;
        if v != version {
            return Err(Error::Version { path: self.path.to_path_buf(), found: v, expected: version });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} = {n} does not fit in 32 bits")))
}

pub fn encode_token_grid<T: Scalar>(grid: &TokenGrid<T>) -> Result<Vec<u8>> {
    let (n, d) = grid.tokens.shape();
    let mut out = Vec::with_capacity(22 + 4 * (n + 1) * d);
    out.extend_from_slice(TOKEN_MAGIC);
    out.push(TOKEN_VERSION);
    for (v, what) in [(n, "N"), (d, "d"), (grid.h, "h"), (grid.w, "w")] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    out.push(grid.global_embedding.is_some() as u8);
    let values = grid.tokens.as_slice().iter().chain(grid.global_embedding.iter().flatten());
    for &x in values {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_token_grid<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TokenGrid<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(TOKEN_MAGIC, TOKEN_VERSION)?;
    let (n, d, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if h.checked_mul(w) != Some(n) {
        return Err(Error::Dimension { path: path.to_path_buf(), reason: format!("h*w = {h}*{w} but N = {n}") });
    }
    if d == 0 {
        return Err(Error::Dimension { path: path.to_path_buf(), reason: "token width is 0".into() });
    }
    let flag = r.u8()?;
    if flag > 1 {
        return Err(Error::Format { path: path.to_path_buf(), reason: format!("global-embedding flag {flag}") });
    }
    let mut values = |count: usize| -> Result<Vec<T>> {
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Truncated(path.to_path_buf()))?)?;
        Ok(raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect())
    };
    let tokens = Matrix::from_vec(n, d, values(n * d)?);
    let global = if flag == 1 { Some(values(d)?) } else { None };
    r.finish()?;
    TokenGrid::new(tokens, h, w, global)
}

pub fn save_token_file<T: Scalar>(path: impl AsRef<Path>, grid: &TokenGrid<T>) -> Result<()> {
    write(path.as_ref(), &encode_token_grid(grid)?)
}

pub fn load_token_file<T: Scalar>(path: impl AsRef<Path>) -> Result<TokenGrid<T>> {
    let path = path.as_ref();
    decode_token_grid(&read(path)?, path)
}

/// `P5` greymap with maxval 255.
pub fn encode_pgm(h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a `P5` greymap with maxval 255 into `(h, w, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("incomplete PGM header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |f: &[u8]| std::str::from_utf8(f).ok().and_then(|s| s.parse::<usize>().ok());
    let (w, h, maxval) = match (num(fields[1]), num(fields[2]), num(fields[3])) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(bad("non-numeric PGM header field")),
    };
    if maxval != 255 {
        return Err(bad(&format!("unexpected maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = h.checked_mul(w).ok_or_else(|| bad("image too large"))?;
    if bytes.len() < pos + len {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if bytes.len() > pos + len {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((h, w, bytes[pos..].to_vec()))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let px: Vec<u8> = mask.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
    write(path.as_ref(), &encode_pgm(mask.h, mask.w, &px))
}

/// Any nonzero pixel is anomalous.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (h, w, px) = decode_pgm(&read(path)?, path)?;
    Mask::new(h, w, px.into_iter().map(|p| p != 0).collect())
}

/// `round_half_up(255 · clamp(score, 0, 1))`.
pub fn score_to_byte<T: Scalar>(score: T) -> u8 {
    let x = score.as_f64().clamp(0.0, 1.0) * 255.0;
    (x + 0.5).floor() as u8
}

pub fn save_score_map<T: Scalar>(path: impl AsRef<Path>, map: &AnomalyMap<T>) -> Result<()> {
    let px: Vec<u8> = map.scores.iter().map(|&s| score_to_byte(s)).collect();
    write(path.as_ref(), &encode_pgm(map.h, map.w, &px))
}

pub fn encode_checkpoint<T: Scalar>(model: &SubspaceModel<T>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(17 + 8 * model.n_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&u32_of(model.d(), "d")?.to_le_bytes());
    out.extend_from_slice(&u32_of(model.q(), "Q")?.to_le_bytes());
    for (_, g) in model.groups() {
        for &x in g {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    let text = cfg.to_config_string();
    out.extend_from_slice(&u32_of(text.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(SubspaceModel<T>, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let (d, q) = (r.u32()? as usize, r.u32()? as usize);
    if d == 0 || q == 0 {
        return Err(Error::Dimension { path: path.to_path_buf(), reason: format!("d = {d}, Q = {q}") });
    }
    let mut model = SubspaceModel::<T>::zeros(d, q);
    for g in model.groups_mut() {
        for x in g.iter_mut() {
            *x = T::lit(r.f64()?);
        }
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format { path: path.to_path_buf(), reason: "config is not UTF-8".into() })?;
    r.finish()?;
    let cfg = TrainConfig::parse(text)?;
    if cfg.q != q {
        return Err(Error::Dimension {
            path: path.to_path_buf(),
            reason: format!("config q = {} but model Q = {q}", cfg.q),
        });
    }
    Ok((model, cfg))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &SubspaceModel<T>, cfg: &TrainConfig) -> Result<()> {
    write(path.as_ref(), &encode_checkpoint(model, cfg)?)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(SubspaceModel<T>, TrainConfig)> {
    let path = path.as_ref();
    decode_checkpoint(&read(path)?, path)
}

pub fn save_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write(path.as_ref(), text.as_bytes())
}

pub fn load_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub const SPEC_FILE: &str = "spec.cfg";

fn sample_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("sample_{i:04}.tok")), dir.join(format!("sample_{i:04}_mask.pgm")))
}

/// Writes `dir/{train,test}/sample_NNNN.tok` with matching `_mask.pgm` files
/// and a copy of the generating spec.
pub fn save_dataset<T: Scalar>(
    dir: impl AsRef<Path>,
    spec: &SyntheticSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<()> {
    let dir = dir.as_ref();
    for (split, data) in [("train", train), ("test", test)] {
        let sub = dir.join(split);
        for (i, s) in data.samples.iter().enumerate() {
            let (tok, mask) = sample_paths(&sub, i);
            save_token_file(tok, &s.grid)?;
            save_mask(mask, &s.mask)?;
        }
    }
    save_text(dir.join(SPEC_FILE), &synthetic_spec_to_string(spec))
}

/// Loads one split directory, reading samples in index order.
pub fn load_split<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for e in entries {
        let name = e.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("sample_") && name.ends_with(".tok") {
            count += 1;
        }
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (tok, mask) = sample_paths(dir, i);
        if !tok.exists() {
            return Err(Error::Dataset(format!("{} is missing", tok.display())));
        }
        samples.push(LabeledSample::new(load_token_file(&tok)?, load_mask(&mask)?)?);
    }
    Ok(Dataset { samples })
}

pub fn load_dataset_spec(dir: impl AsRef<Path>) -> Result<SyntheticSpec> {
    parse_synthetic_spec(&load_text(dir.as_ref().join(SPEC_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::Resolution;
    use crate::model::init_model;

    fn grid(global: bool) -> TokenGrid<f64> {
        let tokens = Matrix::from_fn(6, 3, |i, j| (i as f64 + 1.0) * 0.37 - j as f64 * 1.1);
        TokenGrid::new(tokens, 2, 3, global.then(|| vec![0.1, -0.2, 0.3])).unwrap()
    }

    #[test]
    fn token_round_trip_at_single_precision() {
        for global in [false, true] {
            let g = grid(global);
            let back: TokenGrid<f64> = decode_token_grid(&encode_token_grid(&g).unwrap(), Path::new("x")).unwrap();
            assert_eq!((back.h, back.w), (2, 3));
            assert_eq!(back.global_embedding.is_some(), global);
            for (a, b) in g.tokens.as_slice().iter().zip(back.tokens.as_slice()) {
                assert_eq!(*a as f32, *b as f32);
            }
            let again = encode_token_grid(&back).unwrap();
            assert_eq!(again, encode_token_grid(&g).unwrap());
        }
    }

    #[test]
    fn token_errors_are_distinct() {
        let p = Path::new("t.tok");
        let good = encode_token_grid(&grid(true)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_token_grid::<f64>(&bad, p), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_token_grid::<f64>(&bad, p), Err(Error::Version { found: 2, .. })));
        assert!(matches!(decode_token_grid::<f64>(&good[..good.len() - 1], p), Err(Error::Truncated(_))));
        let mut bad = good.clone();
        bad[13..17].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(decode_token_grid::<f64>(&bad, p), Err(Error::Dimension { .. })));
        assert!(matches!(decode_token_grid::<f64>(b"TO", p), Err(Error::Truncated(_))));
    }

    #[test]
    fn mask_round_trip_and_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::new(2, 3, vec![true, false, false, true, true, false]).unwrap();
        save_mask(dir.path().join("m.pgm"), &m).unwrap();
        assert_eq!(load_mask(dir.path().join("m.pgm")).unwrap(), m);
        save_mask(dir.path().join("z.pgm"), &Mask::empty(4, 4)).unwrap();
        assert!(!load_mask(dir.path().join("z.pgm")).unwrap().any());
        assert_eq!(score_to_byte(0.5f64), 128);
        assert_eq!(score_to_byte(0.0f64), 0);
        assert_eq!(score_to_byte(1.0f64), 255);
        let map = AnomalyMap::new(vec![0.5f64, 1.0], 1, 2, Resolution::Pixel).unwrap();
        save_score_map(dir.path().join("s.pgm"), &map).unwrap();
        let (_, _, px) = decode_pgm(&fs::read(dir.path().join("s.pgm")).unwrap(), Path::new("s")).unwrap();
        assert_eq!(px, vec![128, 255]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        let p = Path::new("p");
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n\x00", p), Err(Error::Format { .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n15\n\x00", p), Err(Error::Format { .. })));
        assert!(matches!(decode_pgm(b"P5\n2 1\n255\n\x00", p), Err(Error::Truncated(_))));
        assert_eq!(decode_pgm(b"P5\n# c\n2 1\n255\n\x00\xff", p).unwrap(), (1, 2, vec![0, 255]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_model::<f64>(5, 2, 9).unwrap();
        let cfg = TrainConfig { q: 2, lr: 3.3e-4, van: true, ..Default::default() };
        let bytes = encode_checkpoint(&m, &cfg).unwrap();
        let p = Path::new("c");
        let (m2, cfg2) = decode_checkpoint::<f64>(&bytes, p).unwrap();
        assert_eq!(m2, m);
        assert_eq!(cfg2, cfg);
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(decode_checkpoint::<f64>(&bumped, p), Err(Error::Version { .. })));
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..40], p), Err(Error::Truncated(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec =
            SyntheticSpec { n_train: 3, n_test: 2, h: 4, w: 4, d: 6, rect_min: 1, rect_max: 3, ..Default::default() };
        let (train, test) = crate::data::generate_synthetic::<f64>(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &spec, &train, &test).unwrap();
        assert_eq!(load_split::<f64>(dir.path().join("train")).unwrap(), train);
        assert_eq!(load_split::<f64>(dir.path().join("test")).unwrap(), test);
        assert_eq!(load_dataset_spec(dir.path()).unwrap(), spec);
    }
}
