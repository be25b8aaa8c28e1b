"""Square tag family: bit dictionaries with rotation and mirror guarantees.

A tag is a g x g code grid wrapped in a black border. Codes are stored as
g*g-bit integers, most significant bit = cell (row 0, col 0), '1' = white.
The built-in family (4x4 bits, 50 codes) keeps every pair of codes at
rotation-minimized Hamming distance >= 3 and bans mirror images, so a
one-bit decoding tolerance can never confuse two tags or accept a tag seen
from behind.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

DEFAULT_FAMILY_RESOURCE = "family_4x4_50.txt"


def grid_to_code(grid: np.ndarray) -> int:
    bits = np.asarray(grid, dtype=np.uint8).ravel()
    code = 0
    for b in bits:
        code = (code << 1) | int(b)
    return code


def code_to_grid(code: int, g: int) -> np.ndarray:
    n = g * g
    bits = [(code >> (n - 1 - i)) & 1 for i in range(n)]
    return np.array(bits, dtype=np.uint8).reshape(g, g)


def code_rotations(code: int, g: int) -> list[int]:
    """The four quarter-turn variants of a code, starting with itself."""
    grid = code_to_grid(code, g)
    return [grid_to_code(np.rot90(grid, k)) for k in range(4)]


def code_mirror(code: int, g: int) -> int:
    return grid_to_code(np.fliplr(code_to_grid(code, g)))


def _hamming(a: int, b: int) -> int:
    return int(bin(a ^ b).count("1"))


def _min_rotated_distance(code: int, other: int, g: int) -> int:
    return min(_hamming(code, rot) for rot in code_rotations(other, g))


@dataclass(frozen=True)
class TagFamily:
    grid: int                 # bits per side
    border: int               # border width in cells
    codes: tuple[int, ...]    # dictionary, index = tag id
    min_hamming: int

    @property
    def cells(self) -> int:
        """Total cells per tag side including the border."""
        return self.grid + 2 * self.border

    def bits(self, tag_id: int) -> np.ndarray:
        return code_to_grid(self.codes[tag_id], self.grid)

    def full_grid(self, tag_id: int) -> np.ndarray:
        """Complete cells x cells pattern: black border ring + code bits."""
        grid = np.zeros((self.cells, self.cells), dtype=np.uint8)
        inner = slice(self.border, self.border + self.grid)
        grid[inner, inner] = self.bits(tag_id)
        return grid

    def match(self, grid: np.ndarray, max_errors: int = 1):
        """Best dictionary match over the four rotations of a sampled grid.

        Returns (tag_id, rotation, errors, margin) or None. rotation is the
        number of quarter turns (numpy rot90 convention) bringing the sampled
        grid onto the stored code; margin is the error gap to the second-best
        candidate. Family distance >= 3 with max_errors <= 1 makes the best
        match unique whenever one exists.
        """
        best = (max_errors + 1, -1, 0)
        second = self.grid * self.grid + 1
        for k in range(4):
            code = grid_to_code(np.rot90(grid, k))
            for tag_id, ref in enumerate(self.codes):
                err = _hamming(code, ref)
                if err < best[0]:
                    second = best[0] if best[1] >= 0 else second
                    best = (err, tag_id, k)
                elif (tag_id, k) != best[1:] and err < second:
                    second = err
        if best[1] < 0:
            return None
        return best[1], best[2], best[0], second - best[0]

    def validate(self) -> None:
        """Raise ValueError if the dictionary violates its guarantees."""
        g = self.grid
        for i, code in enumerate(self.codes):
            rots = code_rotations(code, g)
            for rot in rots[1:]:
                if _hamming(code, rot) < self.min_hamming:
                    raise ValueError(f"code {i} too close to its own rotation")
            mirror_rots = code_rotations(code_mirror(code, g), g)
            if min(_hamming(code, m) for m in mirror_rots) < self.min_hamming:
                raise ValueError(f"code {i} too close to its own mirror")
            for j, other in enumerate(self.codes[i + 1:], start=i + 1):
                if _min_rotated_distance(code, other, g) < self.min_hamming:
                    raise ValueError(f"codes {i} and {j} too close")
                other_mirror = code_mirror(other, g)
                if _min_rotated_distance(code, other_mirror, g) < self.min_hamming:
                    raise ValueError(f"code {i} too close to mirror of {j}")


def generate_family(count: int = 50, grid: int = 4, border: int = 1,
                    min_hamming: int = 3, seed: int = 42) -> TagFamily:
    """Greedy dictionary search with a fixed seed.

    Solid-black and solid-white grids are treated as forbidden pseudo-codes
    so a blank or saturated square can never decode within tolerance.
    """
    g = grid
    n_bits = g * g
    rng = np.random.default_rng(seed)
    anchors = [0, (1 << n_bits) - 1]
    kept: list[int] = []

    def acceptable(cand: int) -> bool:
        rots = code_rotations(cand, g)
        for rot in rots[1:]:
            if _hamming(cand, rot) < min_hamming:
                return False
        mirror_rots = code_rotations(code_mirror(cand, g), g)
        if min(_hamming(cand, m) for m in mirror_rots) < min_hamming:
            return False
        for ref in anchors + kept:
            if _min_rotated_distance(cand, ref, g) < min_hamming:
                return False
            if _min_rotated_distance(cand, code_mirror(ref, g), g) < min_hamming:
                return False
        return True

    attempts = 0
    while len(kept) < count:
        cand = int(rng.integers(0, 1 << n_bits))
        attempts += 1
        if attempts > 2_000_000:
            raise RuntimeError("family search did not converge")
        if acceptable(cand):
            kept.append(cand)
    return TagFamily(grid=g, border=border, codes=tuple(kept), min_hamming=min_hamming)


def write_family(path, family: TagFamily) -> None:
    lines = [
        f"# tag family: grid={family.grid} border={family.border} "
        f"min_hamming={family.min_hamming}",
    ]
    width = family.grid * family.grid
    lines += [format(code, f"0{width}b") for code in family.codes]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _parse_family(text: str) -> TagFamily:
    grid = border = min_hamming = None
    codes = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if "=" in token:
                    key, _, value = token.partition("=")
                    if key == "grid":
                        grid = int(value)
                    elif key == "border":
                        border = int(value)
                    elif key == "min_hamming":
                        min_hamming = int(value)
            continue
        codes.append(int(line, 2))
    if grid is None:
        grid = int(round(len(format(codes[0], "b")) ** 0.5)) if codes else 4
    family = TagFamily(grid=grid, border=border or 1, codes=tuple(codes),
                       min_hamming=min_hamming or 3)
    family.validate()
    return family


def read_family(path) -> TagFamily:
    with open(path) as fh:
        return _parse_family(fh.read())


_default_cache: TagFamily | None = None


def default_family() -> TagFamily:
    """The committed built-in family (loaded once, then cached)."""
    global _default_cache
    if _default_cache is None:
        text = resources.files("fidmark").joinpath("data", DEFAULT_FAMILY_RESOURCE).read_text()
        _default_cache = _parse_family(text)
    return _default_cache
