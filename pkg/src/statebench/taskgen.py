"""Deterministic generation of unique state-tracking samples.

Tasks are running products over a finite group: addition modulo m (cyclic
group) or permutation composition (symmetric group, elements ranked by Lehmer
code). Datasets are sampled without replacement via a keyed Feistel
permutation over each length's index space, so train/validation splits are
disjoint, unique, and reproducible from (spec, seed) alone with O(1) memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from statebench.errors import ConfigurationError, DataError, InternalError
from statebench.seeding import derive_key128, derive_seed

_M64 = (1 << 64) - 1
# Largest domain handled on the vectorized int64 path; bigger pools fall back
# to python integers (arbitrary precision, same mixing function).
_NP_DOMAIN_LIMIT = 1 << 62

MIN_LEN = 2
VAL_CAP = 2000
VAL_PERCENT = 20

LENGTH_DISTS = ("fixed", "uniform", "short_to_long")


# ---------------------------------------------------------------------------
# Groups
# ---------------------------------------------------------------------------


def perm_to_id(perm) -> int:
    """Lexicographic (Lehmer) rank of a permutation array, O(k^2)."""
    perm = list(perm)
    k = len(perm)
    rank = 0
    for i in range(k):
        smaller = sum(1 for j in range(i + 1, k) if perm[j] < perm[i])
        rank += smaller * math.factorial(k - 1 - i)
    return rank


def id_to_perm(rank: int, k: int) -> tuple[int, ...]:
    """Inverse of perm_to_id."""
    avail = list(range(k))
    out = []
    for i in range(k, 0, -1):
        f = math.factorial(i - 1)
        idx, rank = divmod(rank, f)
        out.append(avail.pop(idx))
    return tuple(out)


@dataclass(frozen=True)
class GroupSpec:
    """Algebraic task carrier: Z_m (kind="cyclic") or S_k (kind="symmetric")."""

    kind: str
    degree: int  # modulus m for cyclic, degree k for symmetric

    def __post_init__(self):
        if self.kind not in ("cyclic", "symmetric"):
            raise ConfigurationError(f"unknown group kind {self.kind!r}")
        if self.degree < 2:
            raise ConfigurationError("group degree must be >= 2")

    @property
    def order(self) -> int:
        if self.kind == "cyclic":
            return self.degree
        return math.factorial(self.degree)

    @property
    def identity(self) -> int:
        return 0

    def label(self) -> str:
        return f"Z{self.degree}" if self.kind == "cyclic" else f"S{self.degree}"


@lru_cache(maxsize=8)
def _cayley_table(kind: str, degree: int) -> np.ndarray:
    """table[a, b] = result of applying a first, then b."""
    group = GroupSpec(kind, degree)
    order = group.order
    if kind == "cyclic":
        a = np.arange(order)
        return (a[:, None] + a[None, :]) % order
    perms = [id_to_perm(i, degree) for i in range(order)]
    table = np.empty((order, order), dtype=np.int64)
    for a in range(order):
        pa = perms[a]
        for b in range(order):
            pb = perms[b]
            table[a, b] = perm_to_id(tuple(pb[pa[i]] for i in range(degree)))
    return table


def compose(group: GroupSpec, a: int, b: int) -> int:
    """Group law, read as "a then b" (for S_k this is b after a)."""
    order = group.order
    if not (0 <= a < order and 0 <= b < order):
        raise DataError(f"element id out of range for group of order {order}")
    if group.kind == "cyclic":
        return (a + b) % order
    return int(_cayley_table(group.kind, group.degree)[a, b])


def inverse(group: GroupSpec, a: int) -> int:
    order = group.order
    if not 0 <= a < order:
        raise DataError(f"element id out of range for group of order {order}")
    if group.kind == "cyclic":
        return (-a) % order
    perm = id_to_perm(a, group.degree)
    inv = [0] * group.degree
    for i, p in enumerate(perm):
        inv[p] = i
    return perm_to_id(inv)


def prefix_targets(group: GroupSpec, elements) -> list[int]:
    """Running fold s_k = compose(s_{k-1}, x_k); s_1 = x_1."""
    elements = list(elements)
    if not elements:
        raise DataError("empty element sequence")
    order = group.order
    if min(elements) < 0 or max(elements) >= order:
        raise DataError(f"element id out of range for group of order {order}")
    if group.kind == "cyclic":
        return [int(v) for v in np.cumsum(elements) % order]
    table = _cayley_table(group.kind, group.degree)
    out = [int(elements[0])]
    for x in elements[1:]:
        out.append(int(table[out[-1], x]))
    return out


def prefix_targets_rows(group: GroupSpec, elements: np.ndarray,
                        lengths: np.ndarray) -> np.ndarray:
    """Row-wise prefix fold over a padded [N, T] matrix of element ids.

    Cells at or beyond a row's length hold unspecified values; callers mask
    them out.
    """
    n, t = elements.shape
    out = np.zeros_like(elements)
    if group.kind == "cyclic":
        csum = np.cumsum(np.where(np.arange(t)[None, :] < lengths[:, None],
                                  elements, 0), axis=1)
        out = (csum % group.order).astype(elements.dtype)
    else:
        table = _cayley_table(group.kind, group.degree)
        state = elements[:, 0].astype(np.int64)
        out[:, 0] = state
        for k in range(1, t):
            active = k < lengths
            nxt = table[state[active], elements[active, k].astype(np.int64)]
            state[active] = nxt
            out[active, k] = nxt
    return out


# ---------------------------------------------------------------------------
# Keyed index permutation (balanced Feistel + cycle walking)
# ---------------------------------------------------------------------------


def _mix64_int(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _round_value_int(v: int, round_key: int) -> int:
    """Keyed hash of an arbitrarily wide half, folded limb by limb."""
    h = round_key
    while True:
        h = _mix64_int(h ^ (v & _M64))
        v >>= 64
        if v == 0:
            return h


@dataclass(frozen=True)
class IndexPermutation:
    """Bijection on [0, domain_size) from a 128-bit key.

    Balanced Feistel over an a*b >= domain superset with cycle walking back
    into range; domains above 2^62 run on python integers, smaller ones on
    vectorized uint64 arrays with the identical mixing function.
    """

    domain_size: int
    key: int
    rounds: int = 8

    def __post_init__(self):
        if self.domain_size < 1:
            raise ConfigurationError("domain_size must be >= 1")
        if self.rounds < 8:
            raise ConfigurationError("at least 8 Feistel rounds required")

    @property
    def _halves(self) -> tuple[int, int]:
        a = math.isqrt(self.domain_size - 1) + 1 if self.domain_size > 1 else 1
        b = -(-self.domain_size // a)
        return a, b

    @property
    def _round_keys(self) -> tuple[int, ...]:
        lo, hi = self.key & _M64, self.key >> 64
        return tuple(_mix64_int(lo ^ _mix64_int(hi + r)) for r in range(self.rounds))

    def _walk_once_int(self, x: int, forward: bool) -> int:
        a, b = self._halves
        left, right = divmod(x, b)
        keys = self._round_keys
        if forward:
            for r, k in enumerate(keys):
                if r % 2 == 0:
                    left = (left + _round_value_int(right, k)) % a
                else:
                    right = (right + _round_value_int(left, k)) % b
        else:
            for r in reversed(range(len(keys))):
                if r % 2 == 0:
                    left = (left - _round_value_int(right, keys[r])) % a
                else:
                    right = (right - _round_value_int(left, keys[r])) % b
        return left * b + right

    def _apply_int(self, i: int, forward: bool) -> int:
        if not 0 <= i < self.domain_size:
            raise InternalError(f"index {i} outside domain of {self.domain_size}")
        x = self._walk_once_int(i, forward)
        while x >= self.domain_size:
            x = self._walk_once_int(x, forward)
        return x

    def permute(self, i: int) -> int:
        return self._apply_int(int(i), forward=True)

    def unpermute(self, i: int) -> int:
        return self._apply_int(int(i), forward=False)

    def permute_many(self, idx: np.ndarray) -> np.ndarray:
        """Vectorized permute for int64-sized domains."""
        if self.domain_size > _NP_DOMAIN_LIMIT:
            return np.array([self.permute(int(i)) for i in idx], dtype=object)
        a, b = self._halves
        a64, b64 = np.uint64(a), np.uint64(b)
        keys = [np.uint64(k) for k in self._round_keys]
        n = np.uint64(self.domain_size)

        def walk(x):
            left, right = x // b64, x % b64
            for r, k in enumerate(keys):
                if r % 2 == 0:
                    left = (left + _mix64_np(right ^ k)) % a64
                else:
                    right = (right + _mix64_np(left ^ k)) % b64
            return left * b64 + right

        x = walk(np.asarray(idx, dtype=np.uint64))
        bad = x >= n
        while bad.any():
            x[bad] = walk(x[bad])
            bad = x >= n
        return x.astype(np.int64)


# ---------------------------------------------------------------------------
# Pool enumeration
# ---------------------------------------------------------------------------


def spec_lengths(length_dist: str, max_len: int) -> list[int]:
    if length_dist not in LENGTH_DISTS:
        raise ConfigurationError(f"unknown length distribution {length_dist!r}")
    if max_len < MIN_LEN:
        raise ConfigurationError(f"max length must be >= {MIN_LEN}")
    if length_dist == "fixed":
        return [max_len]
    return list(range(MIN_LEN, max_len + 1))


def pool_size(group: GroupSpec, length_dist: str, max_len: int) -> int:
    return sum(group.order ** n for n in spec_lengths(length_dist, max_len))


def local_index_to_sequence(group: GroupSpec, n: int, i: int) -> tuple[int, ...]:
    """Big-endian base-`order` digits of i as a length-n sequence."""
    order = group.order
    digits = []
    for _ in range(n):
        i, d = divmod(i, order)
        digits.append(d)
    if i:
        raise InternalError("local index out of range")
    return tuple(reversed(digits))


def index_to_sequence(group: GroupSpec, length_dist: str, max_len: int,
                      i: int) -> tuple[int, ...]:
    """Global pool index -> sequence: per-length blocks in ascending length,
    base-`order` decoding inside a block."""
    if i < 0:
        raise InternalError("negative pool index")
    for n in spec_lengths(length_dist, max_len):
        block = group.order ** n
        if i < block:
            return local_index_to_sequence(group, n, i)
        i -= block
    raise InternalError("pool index out of range")


def sequence_to_index(group: GroupSpec, length_dist: str, max_len: int,
                      seq) -> int:
    offset = 0
    for n in spec_lengths(length_dist, max_len):
        if n == len(seq):
            local = 0
            for d in seq:
                local = local * group.order + int(d)
            return offset + local
        offset += group.order ** n
    raise DataError(f"sequence length {len(seq)} not in pool")


def _decode_rows(group: GroupSpec, n: int, idx) -> np.ndarray:
    """Vector of local indices -> [count, n] element matrix."""
    order = group.order
    out = np.empty((len(idx), n), dtype=np.int64)
    if isinstance(idx, np.ndarray) and idx.dtype != object:
        rem = idx.astype(np.int64).copy()
        for pos in range(n - 1, -1, -1):
            out[:, pos] = rem % order
            rem //= order
    else:
        for row, i in enumerate(idx):
            out[row] = local_index_to_sequence(group, n, int(i))
    return out


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    """One task instance: elements and their running-product targets."""

    elements: tuple[int, ...]
    prefix_targets: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.elements)

    @property
    def final_target(self) -> int:
        return self.prefix_targets[-1]


@dataclass(frozen=True)
class DatasetSpec:
    group: GroupSpec
    max_len: int
    length_dist: str
    n_train: int
    seed: int


@dataclass
class Split:
    """Sample block: padded element matrix plus per-row lengths and targets.

    Rows are grouped by ascending length; padding cells hold -1.
    """

    group: GroupSpec
    elements: np.ndarray  # [N, max_len] int
    lengths: np.ndarray  # [N]
    targets: np.ndarray = field(init=False)  # [N, max_len] prefix products

    def __post_init__(self):
        if len(self.elements):
            self.targets = prefix_targets_rows(self.group, self.elements, self.lengths)
        else:
            self.targets = np.zeros_like(self.elements)

    def __len__(self) -> int:
        return len(self.lengths)

    def sample(self, i: int) -> Sample:
        n = int(self.lengths[i])
        return Sample(
            elements=tuple(int(v) for v in self.elements[i, :n]),
            prefix_targets=tuple(int(v) for v in self.targets[i, :n]),
        )

    def samples(self):
        for i in range(len(self)):
            yield self.sample(i)


def validation_plan(group: GroupSpec, length_dist: str, max_len: int) -> dict[int, int]:
    """Per-length validation counts: global min(2000, 20% of pool), spread
    evenly over lengths, each capped at 20% of that length's pool."""
    lengths = spec_lengths(length_dist, max_len)
    pools = {n: group.order ** n for n in lengths}
    total_pool = sum(pools.values())
    target = min(VAL_CAP, total_pool * VAL_PERCENT // 100)
    caps = {n: (pools[n] * VAL_PERCENT + 99) // 100 for n in lengths}
    alloc = {n: 0 for n in lengths}
    remaining = target
    active = [n for n in lengths if caps[n] > 0]
    while remaining > 0 and active:
        share, extra = divmod(remaining, len(active))
        progressed = False
        nxt = []
        for pos, n in enumerate(active):
            want = share + (1 if pos < extra else 0)
            take = min(want, caps[n] - alloc[n])
            alloc[n] += take
            remaining -= take
            if take:
                progressed = True
            if alloc[n] < caps[n]:
                nxt.append(n)
        active = nxt
        if not progressed:
            break
    return alloc


def train_capacity(group: GroupSpec, length_dist: str, max_len: int) -> int:
    """Samples available for training once validation has been carved out."""
    val = validation_plan(group, length_dist, max_len)
    return pool_size(group, length_dist, max_len) - sum(val.values())


def _train_allocation(spec: DatasetSpec, avail: dict[int, int]) -> dict[int, int]:
    """Per-length training counts under the spec's length distribution."""
    lengths = sorted(avail)
    n = spec.n_train
    if spec.length_dist == "fixed":
        return {spec.max_len: n}
    if spec.length_dist == "short_to_long":
        alloc = {}
        for ln in lengths:
            take = min(n, avail[ln])
            alloc[ln] = take
            n -= take
        if n:
            raise InternalError("short_to_long allocation underflow")
        return alloc
    # uniform: per-sample uniform lengths; exhausted lengths drop out and the
    # remaining draws redistribute over the survivors
    rng = np.random.default_rng(derive_seed(spec.seed, "lengths"))
    alloc = {ln: 0 for ln in lengths}
    remaining = n
    surviving = [ln for ln in lengths if avail[ln] > 0]
    while remaining > 0:
        if not surviving:
            raise InternalError("uniform allocation underflow")
        draw = rng.multinomial(remaining, [1.0 / len(surviving)] * len(surviving))
        remaining = 0
        still = []
        for ln, d in zip(surviving, draw):
            take = min(int(d), avail[ln] - alloc[ln])
            alloc[ln] += take
            remaining += int(d) - take
            if alloc[ln] < avail[ln]:
                still.append(ln)
        surviving = still
    return alloc


def build_dataset(spec: DatasetSpec) -> tuple[Split, Split]:
    """Materialize disjoint (train, val) splits for a dataset spec.

    Validation rows are the first permuted indices of each length's quota and
    therefore do not move as n_train grows. Training rows continue the same
    permuted streams, grouped by ascending length.
    """
    group = spec.group
    lengths = spec_lengths(spec.length_dist, spec.max_len)
    pools = {n: group.order ** n for n in lengths}
    val_alloc = validation_plan(group, spec.length_dist, spec.max_len)
    avail = {n: pools[n] - val_alloc[n] for n in lengths}
    capacity = sum(avail.values())
    if spec.n_train < 0:
        raise ConfigurationError("n_train must be >= 0")
    if spec.n_train > capacity:
        raise ConfigurationError(
            f"requested {spec.n_train} training samples but the pool supports "
            f"only {capacity} (pool {sum(pools.values())}, validation "
            f"{sum(val_alloc.values())})"
        )
    train_alloc = _train_allocation(spec, avail)

    def draw(n: int, start: int, count: int) -> np.ndarray:
        if count == 0:
            return np.empty((0, n), dtype=np.int64)
        perm = IndexPermutation(pools[n], derive_key128(spec.seed, "pool", n))
        if pools[n] > _NP_DOMAIN_LIMIT:
            idx = [perm.permute(i) for i in range(start, start + count)]
        else:
            idx = perm.permute_many(np.arange(start, start + count, dtype=np.int64))
        return _decode_rows(group, n, idx)

    def assemble(alloc: dict[int, int], offsets: dict[int, int]) -> Split:
        total = sum(alloc.values())
        elements = np.full((total, spec.max_len), -1, dtype=np.int64)
        lens = np.zeros(total, dtype=np.int64)
        row = 0
        for n in lengths:
            count = alloc.get(n, 0)
            if not count:
                continue
            elements[row:row + count, :n] = draw(n, offsets[n], count)
            lens[row:row + count] = n
            row += count
        return Split(group=group, elements=elements, lengths=lens)

    val = assemble(val_alloc, {n: 0 for n in lengths})
    train = assemble(train_alloc, dict(val_alloc))
    return train, val


def dump_dataset(spec: DatasetSpec, split: Split, path, fingerprint: str) -> None:
    """Line-oriented text dump: length, element ids, prefix targets."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# statebench dataset fingerprint={fingerprint} "
                 f"group={spec.group.label()} L={spec.max_len} "
                 f"dist={spec.length_dist} seed={spec.seed}\n")
        for s in split.samples():
            fh.write(
                f"{s.length}\t{' '.join(map(str, s.elements))}\t"
                f"{' '.join(map(str, s.prefix_targets))}\n"
            )
