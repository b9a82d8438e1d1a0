use std::fs;
use std::path::Path;

use super::DataError;

/// One slide: a bag of tiles, each a row of `dim` floats (raw tile content
/// or precomputed descriptors), with grid coordinates and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    dim: usize,
    tiles: Vec<f64>,
    coords: Vec<[f32; 2]>,
    slide_label: Option<usize>,
    tile_labels: Vec<Option<usize>>,
}

impl SlideBag {
    pub fn new(
        slide_id: impl Into<String>,
        dim: usize,
        tiles: Vec<f64>,
        coords: Vec<[f32; 2]>,
        slide_label: Option<usize>,
        tile_labels: Vec<Option<usize>>,
    ) -> Result<Self, DataError> {
        let slide_id = slide_id.into();
        let invalid = |msg: String| DataError::InvalidBag {
            slide_id: slide_id.clone(),
            msg,
        };
        if dim == 0 {
            return Err(invalid("tile dimension is zero".into()));
        }
        if tiles.is_empty() || !tiles.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "{} values do not form whole rows of {dim}",
                tiles.len()
            )));
        }
        let count = tiles.len() / dim;
        if coords.len() != count || tile_labels.len() != count {
            return Err(invalid(format!(
                "{count} tiles but {} coordinates and {} tile labels",
                coords.len(),
                tile_labels.len()
            )));
        }
        if tiles.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite tile value".into()));
        }
        if let Some(c) = slide_label {
            let all_known = tile_labels.iter().all(Option::is_some);
            if c > 0 && all_known && !tile_labels.contains(&Some(c)) {
                return Err(invalid(format!(
                    "slide labelled {c} has no tile with that label"
                )));
            }
        }
        Ok(Self {
            slide_id,
            dim,
            tiles,
            coords,
            slide_label,
            tile_labels,
        })
    }

    /// Unlabelled bag laid out on a square grid.
    pub fn from_rows(slide_id: impl Into<String>, dim: usize, tiles: Vec<f64>) -> Result<Self, DataError> {
        let count = tiles.len().checked_div(dim).unwrap_or(0);
        let coords = grid_coords(count);
        Self::new(slide_id, dim, tiles, coords, None, vec![None; count])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tile_count(&self) -> usize {
        self.tiles.len() / self.dim
    }

    pub fn tile(&self, j: usize) -> &[f64] {
        &self.tiles[j * self.dim..(j + 1) * self.dim]
    }

    /// All tiles, row-major `tile_count × dim`.
    pub fn tiles(&self) -> &[f64] {
        &self.tiles
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn slide_label(&self) -> Option<usize> {
        self.slide_label
    }

    pub fn tile_labels(&self) -> &[Option<usize>] {
        &self.tile_labels
    }

    /// Same bag with tiles reordered so that new tile `j` is old tile `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, DataError> {
        let mut seen = vec![false; self.tile_count()];
        for &o in order {
            if o >= seen.len() || std::mem::replace(&mut seen[o], true) {
                return Err(DataError::InvalidBag {
                    slide_id: self.slide_id.clone(),
                    msg: "not a permutation of the tiles".into(),
                });
            }
        }
        if order.len() != seen.len() {
            return Err(DataError::InvalidBag {
                slide_id: self.slide_id.clone(),
                msg: "not a permutation of the tiles".into(),
            });
        }
        let tiles = order.iter().flat_map(|&o| self.tile(o).iter().copied()).collect();
        Self::new(
            self.slide_id.clone(),
            self.dim,
            tiles,
            order.iter().map(|&o| self.coords[o]).collect(),
            self.slide_label,
            order.iter().map(|&o| self.tile_labels[o]).collect(),
        )
    }
}

/// Grid coordinates in generation order on a `ceil(sqrt(n))`-wide square.
pub fn grid_coords(n: usize) -> Vec<[f32; 2]> {
    let side = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|j| [(j % side) as f32, (j / side) as f32])
        .collect()
}

const MAGIC: &[u8; 4] = b"KBAG";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4;
const TILE_RECORD_LEN: usize = 4 + 4 + 4;

fn label_to_i32(label: Option<usize>) -> i32 {
    label.map_or(-1, |l| l as i32)
}

fn label_from_i32(raw: i32) -> Result<Option<usize>, DataError> {
    match raw {
        -1 => Ok(None),
        l if l >= 0 => Ok(Some(l as usize)),
        l => Err(DataError::InvalidLabel(l)),
    }
}

/// Serializes a bag in the little-endian KBAG layout:
/// magic, version, T, P, slide label, T × {tile label, x, y}, T × P f64.
pub fn encode_bag(bag: &SlideBag) -> Vec<u8> {
    let t = bag.tile_count();
    let mut out = Vec::with_capacity(HEADER_LEN + t * TILE_RECORD_LEN + bag.tiles.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(bag.dim as u32).to_le_bytes());
    out.extend_from_slice(&label_to_i32(bag.slide_label).to_le_bytes());
    for (label, [x, y]) in bag.tile_labels.iter().zip(&bag.coords) {
        out.extend_from_slice(&label_to_i32(*label).to_le_bytes());
        out.extend_from_slice(&x.to_le_bytes());
        out.extend_from_slice(&y.to_le_bytes());
    }
    for v in &bag.tiles {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take4(&mut self) -> [u8; 4] {
        let b = self.bytes[self.pos..self.pos + 4].try_into().unwrap();
        self.pos += 4;
        b
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take4())
    }

    fn i32(&mut self) -> i32 {
        i32::from_le_bytes(self.take4())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take4())
    }

    fn f64(&mut self) -> f64 {
        let b = self.bytes[self.pos..self.pos + 8].try_into().unwrap();
        self.pos += 8;
        f64::from_le_bytes(b)
    }
}

pub fn decode_bag(bytes: &[u8], slide_id: impl Into<String>) -> Result<SlideBag, DataError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DataError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take4();
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = cur.u32();
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let t = cur.u32() as usize;
    let p = cur.u32() as usize;
    if t == 0 || p == 0 {
        return Err(DataError::DimensionMismatch(format!(
            "header declares {t} tiles of dimension {p}"
        )));
    }
    let expected = HEADER_LEN + t * TILE_RECORD_LEN + t * p * 8;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::DimensionMismatch(format!(
            "header accounts for {expected} bytes but file holds {}",
            bytes.len()
        )));
    }
    let slide_label = label_from_i32(cur.i32())?;
    let mut tile_labels = Vec::with_capacity(t);
    let mut coords = Vec::with_capacity(t);
    for _ in 0..t {
        tile_labels.push(label_from_i32(cur.i32())?);
        coords.push([cur.f32(), cur.f32()]);
    }
    let tiles = (0..t * p).map(|_| cur.f64()).collect();
    SlideBag::new(slide_id, p, tiles, coords, slide_label, tile_labels)
}

pub fn save_bag(bag: &SlideBag, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_bag(bag))?;
    Ok(())
}

/// Loads a KBAG file; the slide id is the file stem.
pub fn load_bag(path: &Path) -> Result<SlideBag, DataError> {
    let bytes = fs::read(path)?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_bag(&bytes, slide_id)
}
