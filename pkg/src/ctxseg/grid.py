"""Slide grids, the padded spatial embedding memory, and neighbour masks.

Every slide is a uniform grid of non-overlapping square patches, indexed by
column ``i`` and row ``j``. The memory holds one embedding per patch in a
per-slide block padded by the neighbourhood radius ``k`` on every side, so
a (2k+1)^2 window around any in-grid patch can be sliced without bounds
checks. Padding cells are never occupied; reads never mutate the bank.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SlideGrid:
    """Patch-grid geometry of one tiled slide."""

    slide_id: str
    n_x: int
    n_y: int
    S: int
    C: int
    ds: int = 1  # downsampling factor, metadata only

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError(f"{self.slide_id}: grid {self.n_x}x{self.n_y} invalid")
        if self.S < 8:
            raise ValueError(f"{self.slide_id}: patch edge {self.S} < 8")


@dataclass
class NeighborhoodView:
    """Embeddings and validity mask of one centre patch's neighbourhood.

    ``embeddings`` has (2k+1)^2 rows in row-major offset order (column
    offset outer, row offset inner); ``mask[t]`` is 1 only for occupied
    in-grid neighbours, and the centre entry is always 0.
    """

    embeddings: np.ndarray
    mask: np.ndarray
    k: int

    @property
    def centre_index(self) -> int:
        return self.k * (2 * self.k + 1) + self.k


class MemoryBank:
    """Per-slide padded stores of patch embeddings with occupancy flags."""

    def __init__(self, slides, k: int, D: int):
        if k < 0 or D < 1:
            raise ValueError(f"memory bank: k={k}, D={D}")
        self.k = k
        self.D = D
        self.grids = {s.slide_id: s for s in slides}
        self.blocks = {}
        self.occupancy = {}
        for s in slides:
            ext = (s.n_x + 2 * k, s.n_y + 2 * k)
            self.blocks[s.slide_id] = np.zeros(ext + (D,), dtype=np.float32)
            self.occupancy[s.slide_id] = np.zeros(ext, dtype=bool)

    def _grid(self, slide_id) -> SlideGrid:
        try:
            return self.grids[slide_id]
        except KeyError:
            raise KeyError(f"unknown slide {slide_id!r}") from None

    def _check_pos(self, g: SlideGrid, i: int, j: int):
        if not (0 <= i < g.n_x and 0 <= j < g.n_y):
            raise IndexError(f"patch ({i},{j}) outside {g.n_x}x{g.n_y} grid of {g.slide_id}")

    def insert(self, slide_id, i: int, j: int, e: np.ndarray):
        """Write the embedding of patch (i, j); overwrites are epoch refreshes."""
        g = self._grid(slide_id)
        self._check_pos(g, i, j)
        e = np.asarray(e, dtype=np.float32)
        if e.shape != (self.D,):
            raise ValueError(f"embedding shape {e.shape}, expected ({self.D},)")
        k = self.k
        self.blocks[slide_id][i + k, j + k] = e
        self.occupancy[slide_id][i + k, j + k] = True

    def insert_all(self, slide_id, embeddings: np.ndarray):
        """Vectorized insert of a full (n_x, n_y, D) grid of embeddings."""
        g = self._grid(slide_id)
        embeddings = np.asarray(embeddings, dtype=np.float32)
        if embeddings.shape != (g.n_x, g.n_y, self.D):
            raise ValueError(f"grid embeddings shape {embeddings.shape} for {g.n_x}x{g.n_y}xD={self.D}")
        k = self.k
        self.blocks[slide_id][k : k + g.n_x, k : k + g.n_y] = embeddings
        self.occupancy[slide_id][k : k + g.n_x, k : k + g.n_y] = True

    def neighbor_mask(self, slide_id, i: int, j: int) -> np.ndarray:
        """Binary validity of the (2k+1)^2 window around (i, j), centre forced 0."""
        g = self._grid(slide_id)
        self._check_pos(g, i, j)
        k = self.k
        occ = self.occupancy[slide_id][i : i + 2 * k + 1, j : j + 2 * k + 1]
        mask = occ.astype(np.float32).reshape(-1).copy()
        mask[k * (2 * k + 1) + k] = 0.0
        return mask

    def retrieve(self, slide_id, i: int, j: int) -> NeighborhoodView:
        """Copy out the neighbourhood window; the bank is never mutated."""
        g = self._grid(slide_id)
        self._check_pos(g, i, j)
        k = self.k
        window = self.blocks[slide_id][i : i + 2 * k + 1, j : j + 2 * k + 1]
        emb = window.reshape(-1, self.D).copy()
        return NeighborhoodView(embeddings=emb, mask=self.neighbor_mask(slide_id, i, j), k=k)

    def occupied_count(self) -> int:
        return int(sum(occ.sum() for occ in self.occupancy.values()))

    def checksum(self) -> bytes:
        """Order-stable digest of all blocks and occupancy, for mutation checks."""
        import hashlib

        h = hashlib.sha256()
        for sid in sorted(self.blocks):
            h.update(sid.encode())
            h.update(self.blocks[sid].tobytes())
            h.update(np.packbits(self.occupancy[sid]).tobytes())
        return h.digest()


def build_memory(slides, k: int, D: int) -> MemoryBank:
    """Fresh all-unoccupied memory bank covering the given slides."""
    return MemoryBank(slides, k, D)


def memory_bytes(num_slides: int, n_x: int, n_y: int, k: int, D: int) -> int:
    """Physical size of the embedding store in bytes (float32 cells)."""
    if min(num_slides, n_x, n_y, k, D) < 0:
        raise ValueError("memory_bytes: negative argument")
    return num_slides * (2 * k + n_x) * (2 * k + n_y) * D * 4


# ---------------------------------------------------------------------------
# bank snapshots
# ---------------------------------------------------------------------------

_MAGIC_BANK = b"VVMB"


def save_bank(path, bank: MemoryBank):
    """Serialize a bank: per slide the grid dims, occupancy bitset (padded
    extent, row-major, LSB-first bits) and the f32 block, little-endian."""
    with open(path, "wb") as f:
        f.write(_MAGIC_BANK)
        f.write(struct.pack("<II", 1, len(bank.blocks)))
        for sid in sorted(bank.blocks):
            g = bank.grids[sid]
            enc = sid.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<IIII", g.n_x, g.n_y, bank.k, bank.D))
            f.write(np.packbits(bank.occupancy[sid].reshape(-1), bitorder="little").tobytes())
            f.write(np.ascontiguousarray(bank.blocks[sid], dtype="<f4").tobytes())


def load_bank(path, slides) -> MemoryBank:
    """Rebuild a bank from a snapshot; ``slides`` supplies S/C metadata."""
    by_id = {s.slide_id: s for s in slides}
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC_BANK:
            raise ValueError(f"{path}: not a memory bank snapshot")
        version, count = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported bank version {version}")
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            sid = f.read(nlen).decode("utf-8")
            n_x, n_y, k, D = struct.unpack("<IIII", f.read(16))
            ext = (n_x + 2 * k) * (n_y + 2 * k)
            occ_bytes = f.read((ext + 7) // 8)
            occ = np.unpackbits(
                np.frombuffer(occ_bytes, dtype=np.uint8), bitorder="little", count=ext
            ).astype(bool)
            block = np.frombuffer(f.read(4 * ext * D), dtype="<f4").copy()
            entries.append((sid, n_x, n_y, k, D, occ, block))
    if not entries:
        raise ValueError(f"{path}: empty bank snapshot")
    k, D = entries[0][3], entries[0][4]
    bank = MemoryBank([by_id[e[0]] for e in entries], k, D)
    for sid, n_x, n_y, _, _, occ, block in entries:
        shape = (n_x + 2 * k, n_y + 2 * k)
        bank.occupancy[sid] = occ.reshape(shape)
        bank.blocks[sid] = block.reshape(shape + (D,))
    return bank
