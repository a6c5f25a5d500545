//! Tiled slide container ("MTS1") and its bounded tile cache.
//!
//! Layout, all integers little-endian:
//! `"MTS1" | u32 width | u32 height | u32 channels | u32 tile_size |
//! u32 tile_count | u64 offset[tile_count] | tile blobs`.
//! Tiles are indexed row-major over the tile grid. Each blob is the tile's
//! pixels, row-major and channel-interleaved; tiles on the right and bottom
//! edges are stored at their clipped size.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use super::{Result, SlideError};

pub const MTS_MAGIC: &[u8; 4] = b"MTS1";
const HEADER_LEN: u64 = 4 + 5 * 4;

fn grid(width: usize, height: usize, tile: usize) -> (usize, usize) {
    (width.div_ceil(tile), height.div_ceil(tile))
}

fn tile_extent(total: usize, tile: usize, index: usize) -> usize {
    tile.min(total - index * tile)
}

/// Streams a slide into the container. `tile_source(x, y, w, h)` must
/// return the `w×h×channels` bytes of that region.
pub fn write_tiled(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    tile_size: usize,
    mut tile_source: impl FnMut(usize, usize, usize, usize) -> Vec<u8>,
) -> Result<()> {
    if width == 0 || height == 0 || channels == 0 || tile_size == 0 {
        return Err(SlideError::EmptyImage { width, height });
    }
    let (cols, rows) = grid(width, height, tile_size);
    let count = cols * rows;
    let to_u32 =
        |v: usize| u32::try_from(v).map_err(|_| SlideError::Dims(format!("{v} does not fit the container header")));
    let mut w = BufWriter::new(File::create(path).map_err(|e| SlideError::io(path, e))?);
    let io = |e| SlideError::io(path, e);
    w.write_all(MTS_MAGIC).map_err(io)?;
    for v in [width, height, channels, tile_size, count] {
        w.write_all(&to_u32(v)?.to_le_bytes()).map_err(io)?;
    }
    let mut offset = HEADER_LEN + 8 * count as u64;
    for ty in 0..rows {
        for tx in 0..cols {
            w.write_all(&offset.to_le_bytes()).map_err(io)?;
            let len = tile_extent(width, tile_size, tx) * tile_extent(height, tile_size, ty) * channels;
            offset += len as u64;
        }
    }
    for ty in 0..rows {
        for tx in 0..cols {
            let (tw, th) = (tile_extent(width, tile_size, tx), tile_extent(height, tile_size, ty));
            let blob = tile_source(tx * tile_size, ty * tile_size, tw, th);
            if blob.len() != tw * th * channels {
                return Err(SlideError::Dims(format!(
                    "tile source returned {} bytes for a {tw}x{th}x{channels} tile",
                    blob.len()
                )));
            }
            w.write_all(&blob).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TileCacheStats {
    pub resident: usize,
    pub peak_resident: usize,
    pub resident_bytes: usize,
    pub peak_bytes: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
}

#[derive(Debug, Default)]
struct TileCache {
    tiles: HashMap<usize, (Arc<Vec<u8>>, u64)>,
    clock: u64,
    bytes: usize,
    stats: TileCacheStats,
}

/// Random-access reader over an MTS1 file holding at most `budget` decoded
/// tiles. Safe to share between threads.
#[derive(Debug)]
pub struct TiledSlide {
    path: PathBuf,
    file: File,
    width: usize,
    height: usize,
    channels: usize,
    tile_size: usize,
    cols: usize,
    rows: usize,
    offsets: Vec<u64>,
    budget: usize,
    cache: Mutex<TileCache>,
}

impl TiledSlide {
    pub fn open(path: &Path, budget: usize) -> Result<TiledSlide> {
        let corrupt = |m: String| SlideError::CorruptContainer(format!("{}: {m}", path.display()));
        if budget == 0 {
            return Err(SlideError::Dims("tile budget must be at least 1".into()));
        }
        let mut file = File::open(path).map_err(|e| SlideError::io(path, e))?;
        let file_len = file.metadata().map_err(|e| SlideError::io(path, e))?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut header).map_err(|_| corrupt("truncated header".into()))?;
        if &header[..4] != MTS_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (width, height, channels, tile_size, count) = (field(0), field(1), field(2), field(3), field(4));
        if width == 0 || height == 0 || channels == 0 || tile_size == 0 {
            return Err(corrupt("zero extent in header".into()));
        }
        let (cols, rows) = grid(width, height, tile_size);
        if count != cols * rows {
            return Err(corrupt(format!("tile_count {count}, grid needs {}", cols * rows)));
        }
        let mut index = vec![0u8; 8 * count];
        file.read_exact(&mut index).map_err(|_| corrupt("truncated tile index".into()))?;
        let offsets: Vec<u64> = index.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        for (i, &off) in offsets.iter().enumerate() {
            let (tx, ty) = (i % cols, i / cols);
            let len = (tile_extent(width, tile_size, tx) * tile_extent(height, tile_size, ty) * channels) as u64;
            if off < HEADER_LEN + 8 * count as u64 || off + len > file_len {
                return Err(corrupt(format!("tile {i} lies outside the file")));
            }
        }
        Ok(TiledSlide {
            path: path.to_path_buf(),
            file,
            width,
            height,
            channels,
            tile_size,
            cols,
            rows,
            offsets,
            budget,
            cache: Mutex::new(TileCache::default()),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn tile_size(&self) -> usize {
        self.tile_size
    }
    /// (columns, rows) of the tile grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }
    pub fn budget(&self) -> usize {
        self.budget
    }
    /// Bytes of one full (non-edge) decoded tile.
    pub fn tile_bytes(&self) -> usize {
        self.tile_size * self.tile_size * self.channels
    }

    /// Pixel extent of tile (tx, ty).
    pub fn tile_dims(&self, tx: usize, ty: usize) -> (usize, usize) {
        (tile_extent(self.width, self.tile_size, tx), tile_extent(self.height, self.tile_size, ty))
    }

    pub fn stats(&self) -> TileCacheStats {
        self.cache.lock().expect("tile cache poisoned").stats
    }

    /// Drops every cached tile; counters other than residency are kept.
    pub fn clear_cache(&self) {
        let mut c = self.cache.lock().expect("tile cache poisoned");
        c.tiles.clear();
        c.bytes = 0;
        c.stats.resident = 0;
        c.stats.resident_bytes = 0;
    }

    /// Drops cached tiles lying entirely above row `y`; a top-to-bottom
    /// sweep never needs them again.
    pub fn release_above(&self, y: usize) {
        let rows_done = y / self.tile_size;
        let cols = self.cols;
        let mut c = self.cache.lock().expect("tile cache poisoned");
        let before = c.tiles.len();
        let mut freed = 0;
        c.tiles.retain(|idx, (tile, _)| {
            let keep = idx / cols >= rows_done;
            if !keep {
                freed += tile.len();
            }
            keep
        });
        c.bytes -= freed;
        c.stats.evictions += (before - c.tiles.len()) as u64;
        c.stats.resident = c.tiles.len();
        c.stats.resident_bytes = c.bytes;
    }

    pub fn tile(&self, tx: usize, ty: usize) -> Result<Arc<Vec<u8>>> {
        if tx >= self.cols || ty >= self.rows {
            return Err(SlideError::OutOfBounds {
                x: tx * self.tile_size,
                y: ty * self.tile_size,
                w: 1,
                h: 1,
                width: self.width,
                height: self.height,
            });
        }
        let idx = ty * self.cols + tx;
        let mut c = self.cache.lock().expect("tile cache poisoned");
        c.clock += 1;
        let now = c.clock;
        if let Some((tile, used)) = c.tiles.get_mut(&idx) {
            *used = now;
            let tile = Arc::clone(tile);
            c.stats.hits += 1;
            return Ok(tile);
        }
        c.stats.misses += 1;
        while c.tiles.len() >= self.budget {
            let oldest = *c.tiles.iter().min_by_key(|(_, (_, used))| *used).map(|(k, _)| k).expect("non-empty");
            let (gone, _) = c.tiles.remove(&oldest).expect("present");
            c.bytes -= gone.len();
            c.stats.evictions += 1;
        }
        let (tw, th) = self.tile_dims(tx, ty);
        let mut buf = vec![0u8; tw * th * self.channels];
        self.file.read_exact_at(&mut buf, self.offsets[idx]).map_err(|e| SlideError::io(&self.path, e))?;
        let tile = Arc::new(buf);
        c.bytes += tile.len();
        c.tiles.insert(idx, (Arc::clone(&tile), now));
        c.stats.resident = c.tiles.len();
        c.stats.resident_bytes = c.bytes;
        c.stats.peak_resident = c.stats.peak_resident.max(c.tiles.len());
        c.stats.peak_bytes = c.stats.peak_bytes.max(c.bytes);
        Ok(tile)
    }

    /// Copies a region into a fresh row-major, channel-interleaved buffer.
    pub fn read_region(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>> {
        if x + w > self.width || y + h > self.height {
            return Err(SlideError::OutOfBounds { x, y, w, h, width: self.width, height: self.height });
        }
        let ch = self.channels;
        let ts = self.tile_size;
        let mut out = vec![0u8; w * h * ch];
        if w == 0 || h == 0 {
            return Ok(out);
        }
        for ty in y / ts..=(y + h - 1) / ts {
            for tx in x / ts..=(x + w - 1) / ts {
                let tile = self.tile(tx, ty)?;
                let (tw, _) = self.tile_dims(tx, ty);
                let (ox, oy) = (tx * ts, ty * ts);
                let x0 = x.max(ox);
                let x1 = (x + w).min(ox + tw);
                let y0 = y.max(oy);
                let y1 = (y + h).min(oy + ts).min(self.height);
                for row in y0..y1 {
                    let src = ((row - oy) * tw + (x0 - ox)) * ch;
                    let dst = ((row - y) * w + (x0 - x)) * ch;
                    let n = (x1 - x0) * ch;
                    out[dst..dst + n].copy_from_slice(&tile[src..src + n]);
                }
            }
        }
        Ok(out)
    }

    /// SHA-256 of the full row-major image, assembled one tile row at a time.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for ty in 0..self.rows {
            let y = ty * self.tile_size;
            let band = self.read_region(0, y, self.width, self.tile_dims(0, ty).1)?;
            h.update(&band);
        }
        Ok(crate::util::hex(&h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(x: usize, y: usize, c: usize) -> u8 {
        ((x * 7 + y * 13 + c * 101) % 251) as u8
    }

    fn write_pattern(path: &Path, w: usize, h: usize, ts: usize) {
        write_tiled(path, w, h, 3, ts, |x0, y0, tw, th| {
            let mut v = Vec::with_capacity(tw * th * 3);
            for y in y0..y0 + th {
                for x in x0..x0 + tw {
                    for c in 0..3 {
                        v.push(pattern(x, y, c));
                    }
                }
            }
            v
        })
        .unwrap();
    }

    #[test]
    fn grid_and_region_reads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.mts");
        write_pattern(&p, 70, 45, 16);
        let s = TiledSlide::open(&p, 3).unwrap();
        assert_eq!(s.grid(), (5, 3));
        let r = s.read_region(10, 12, 40, 30).unwrap();
        for (i, px) in r.chunks(3).enumerate() {
            let (x, y) = (10 + i % 40, 12 + i / 40);
            assert_eq!(px, [pattern(x, y, 0), pattern(x, y, 1), pattern(x, y, 2)]);
        }
        assert!(s.stats().peak_resident <= 3);
        assert_eq!(*s.tile(1, 1).unwrap(), *s.tile(1, 1).unwrap());
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.mts");
        write_pattern(&p, 20, 20, 8);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(TiledSlide::open(&p, 4), Err(SlideError::CorruptContainer(_))));
        bytes[0] = b'M';
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(TiledSlide::open(&p, 4), Err(SlideError::CorruptContainer(_))));
    }
}
