"""Jigsaw arrangement sets: the fixed pretext label space.

An arrangement is a permutation ``perm`` of the N patch slots where
``perm[i]`` is the destination slot of source patch ``i``.  The index of an
arrangement inside its :class:`ArrangementSet` is the pretext class label.
"""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

T = TypeVar("T")

HEADER_TAG = "SKIDARR"
FORMAT_VERSION = "v1"
# Below this many total permutations we enumerate and shuffle instead of
# rejection sampling.
_ENUMERATE_LIMIT = 50_000


class ArrangementFormatError(ValueError):
    """Raised when an arrangement-set file is malformed or inconsistent."""


def _isqrt_exact(n: int) -> int | None:
    r = math.isqrt(n)
    return r if r * r == n else None


@dataclass(frozen=True)
class Arrangement:
    perm: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        if sorted(perm) != list(range(len(perm))):
            raise ValueError(f"not a permutation of 0..{len(perm) - 1}: {perm}")
        object.__setattr__(self, "perm", perm)

    def __len__(self) -> int:
        return len(self.perm)

    @classmethod
    def identity(cls, n: int) -> "Arrangement":
        return cls(tuple(range(n)))


@dataclass(frozen=True)
class ArrangementSet:
    n_patches: int
    arrangements: tuple[Arrangement, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "arrangements", tuple(self.arrangements))
        for a in self.arrangements:
            if len(a) != self.n_patches:
                raise ValueError(
                    f"arrangement of length {len(a)} in a {self.n_patches}-patch set"
                )
        if len(set(self.arrangements)) != len(self.arrangements):
            raise ValueError("arrangements must be pairwise distinct")
        if len(self.arrangements) > math.factorial(self.n_patches):
            raise ValueError("more arrangements than permutations exist")

    def __len__(self) -> int:
        return len(self.arrangements)

    def __getitem__(self, label: int) -> Arrangement:
        return self.arrangements[label]

    def index(self, a: Arrangement | Sequence[int]) -> int:
        """Class label of ``a``; ``ValueError`` if it is not in the set."""
        if not isinstance(a, Arrangement):
            a = Arrangement(tuple(a))
        lookup = self.__dict__.get("_lookup")
        if lookup is None:
            lookup = {arr: i for i, arr in enumerate(self.arrangements)}
            object.__setattr__(self, "_lookup", lookup)
        try:
            return lookup[a]
        except KeyError:
            raise ValueError(f"{a.perm} is not in the arrangement set") from None

    def as_array(self) -> np.ndarray:
        return np.array([a.perm for a in self.arrangements], dtype=np.int64)

    def require_patches(self, n_patches: int) -> None:
        """Fail early when a set is wired into a pipeline with another N."""
        if n_patches != self.n_patches:
            raise ArrangementFormatError(
                f"arrangement set has N={self.n_patches} but the pipeline expects "
                f"N={n_patches}"
            )


def generate_arrangement_set(n_patches: int = 9, k: int = 1000, seed: int = 0) -> ArrangementSet:
    """Draw ``k`` distinct permutations uniformly without replacement."""
    if n_patches < 1 or _isqrt_exact(n_patches) is None:
        raise ValueError(f"n_patches must be a perfect square, got {n_patches}")
    total = math.factorial(n_patches)
    if not 1 <= k <= total:
        raise ValueError(f"k must lie in [1, {n_patches}!={total}], got {k}")

    rng = np.random.default_rng(seed)
    if total <= _ENUMERATE_LIMIT:
        every = list(itertools.permutations(range(n_patches)))
        picks = rng.choice(total, size=k, replace=False)
        perms = [every[i] for i in picks]
    else:
        seen: set[tuple[int, ...]] = set()
        perms = []
        while len(perms) < k:
            p = tuple(int(v) for v in rng.permutation(n_patches))
            if p not in seen:
                seen.add(p)
                perms.append(p)
    return ArrangementSet(n_patches, tuple(Arrangement(p) for p in perms), seed)


def apply_arrangement(patches: Sequence[T] | np.ndarray, a: Arrangement) -> list[T] | np.ndarray:
    """Reorder ``patches`` so that output slot ``a.perm[i]`` holds input ``i``.

    Arrays are reordered along axis 0 and returned as arrays; other
    sequences come back as lists.
    """
    if len(patches) != len(a.perm):
        raise ValueError(
            f"{len(patches)} patches but arrangement has {len(a.perm)} slots"
        )
    src = invert_arrangement(a).perm  # out[j] = in[inv[j]]
    if isinstance(patches, np.ndarray):
        return patches[list(src)]
    return [patches[i] for i in src]


def invert_arrangement(a: Arrangement) -> Arrangement:
    inv = [0] * len(a.perm)
    for i, dst in enumerate(a.perm):
        inv[dst] = i
    return Arrangement(tuple(inv))


def save_set(aset: ArrangementSet, path: str | os.PathLike) -> None:
    path = Path(path)
    lines = [
        f"{HEADER_TAG} {FORMAT_VERSION} N={aset.n_patches} K={len(aset)} SEED={aset.seed}"
    ]
    lines += [",".join(str(v) for v in a.perm) for a in aset.arrangements]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_header(line: str) -> tuple[int, int, int]:
    parts = line.split()
    if len(parts) != 5 or parts[0] != HEADER_TAG or parts[1] != FORMAT_VERSION:
        raise ArrangementFormatError(f"bad header: {line!r}")
    fields = {}
    for item in parts[2:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ArrangementFormatError(f"bad header field {item!r}")
        try:
            fields[key] = int(value)
        except ValueError:
            raise ArrangementFormatError(f"non-integer header field {item!r}") from None
    try:
        return fields["N"], fields["K"], fields["SEED"]
    except KeyError as e:
        raise ArrangementFormatError(f"header missing {e.args[0]}") from None


def load_set(path: str | os.PathLike) -> ArrangementSet:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ArrangementFormatError(f"{path}: empty file")
    n, k, seed = _parse_header(lines[0])
    body = lines[1:]
    if len(body) != k:
        raise ArrangementFormatError(
            f"{path}: header declares K={k} but {len(body)} arrangements follow"
        )
    arrangements = []
    for lineno, line in enumerate(body, start=2):
        try:
            perm = tuple(int(v) for v in line.split(","))
        except ValueError:
            raise ArrangementFormatError(f"{path}:{lineno}: not integers: {line!r}") from None
        if len(perm) != n:
            raise ArrangementFormatError(
                f"{path}:{lineno}: {len(perm)} entries, header says N={n}"
            )
        try:
            arrangements.append(Arrangement(perm))
        except ValueError as e:
            raise ArrangementFormatError(f"{path}:{lineno}: {e}") from None
    try:
        return ArrangementSet(n, tuple(arrangements), seed)
    except ValueError as e:
        raise ArrangementFormatError(f"{path}: {e}") from None
