"""Corpora of sparse bag-of-feature instances: file IO, top-k feature
selection, deterministic stratified splits, synthetic multi-domain data with
controllable shift, and the batch sampler that guarantees every row an
in-batch domain positive and class positive.

Corpus file grammar (bit-exact):
    first line   dim=<int> domains=<int> classes=<int>
    body lines   <domain_id>\t<label>\t<idx>:<val>( <idx>:<val>)*
    comments     lines starting with '#'; blank lines are skipped
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Malformed corpus file, infeasible configuration, or contract violation."""


@dataclass
class Instance:
    domain_id: int
    label: int
    features: list  # [(index, value)] with strictly increasing indices


@dataclass
class Corpus:
    instances: list
    feature_dim: int
    num_domains: int
    num_classes: int
    domain_names: list
    class_names: list

    def __len__(self):
        return len(self.instances)

    def cell_indices(self) -> dict:
        """(domain_id, label) -> list of instance indices, in corpus order."""
        cells = {}
        for i, inst in enumerate(self.instances):
            cells.setdefault((inst.domain_id, inst.label), []).append(i)
        return cells

    def densify(self, indices) -> tuple:
        """Materialize rows (x, domains, labels) for the given instance indices."""
        x = np.zeros((len(indices), self.feature_dim))
        domains = np.empty(len(indices), dtype=np.int64)
        labels = np.empty(len(indices), dtype=np.int64)
        for row, i in enumerate(indices):
            inst = self.instances[i]
            for idx, val in inst.features:
                x[row, idx] = val
            domains[row] = inst.domain_id
            labels[row] = inst.label
        return x, domains, labels

    def subset(self, indices) -> "Corpus":
        return Corpus([self.instances[i] for i in indices], self.feature_dim,
                      self.num_domains, self.num_classes,
                      list(self.domain_names), list(self.class_names))


def _default_names(prefix: str, n: int):
    return [f"{prefix}{i}" for i in range(n)]


def _validate_instance(inst: Instance, feature_dim: int, num_domains: int,
                       num_classes: int, where: str) -> None:
    if not 0 <= inst.domain_id < num_domains:
        raise DataError(f"{where}: domain id {inst.domain_id} outside [0, {num_domains})")
    if not 0 <= inst.label < num_classes:
        raise DataError(f"{where}: label {inst.label} outside [0, {num_classes})")
    prev = -1
    for idx, _ in inst.features:
        if idx <= prev:
            raise DataError(f"{where}: feature indices must be strictly increasing, "
                            f"got {idx} after {prev}")
        if idx >= feature_dim:
            raise DataError(f"{where}: feature index {idx} >= declared dim {feature_dim}")
        prev = idx


def load_sparse(path) -> Corpus:
    """Parse a corpus file, validating every line; errors carry line numbers."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.readlines()
    header_no = None
    header = None
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header, header_no = line, no
        break
    if header is None:
        raise DataError(f"{path}: missing header line")
    parts = header.split()
    if (len(parts) != 3 or not parts[0].startswith("dim=")
            or not parts[1].startswith("domains=") or not parts[2].startswith("classes=")):
        raise DataError(f"{path} line {header_no}: header must be "
                        f"'dim=<int> domains=<int> classes=<int>', got {header!r}")
    try:
        feature_dim = int(parts[0][4:])
        num_domains = int(parts[1][8:])
        num_classes = int(parts[2][8:])
    except ValueError:
        raise DataError(f"{path} line {header_no}: non-integer header field in {header!r}") from None

    instances = []
    for no, raw in enumerate(lines, start=1):
        if no <= header_no:
            continue
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path} line {no}: expected 3 tab-separated fields, got {len(fields)}")
        where = f"{path} line {no}"
        try:
            domain_id = int(fields[0])
            label = int(fields[1])
        except ValueError:
            raise DataError(f"{where}: domain and label must be integers") from None
        feats = []
        pairs = fields[2].split(" ")
        if pairs == [""]:
            raise DataError(f"{where}: at least one index:value pair is required")
        for pair in pairs:
            idx_s, sep, val_s = pair.partition(":")
            if not sep:
                raise DataError(f"{where}: malformed pair {pair!r}, expected idx:val")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise DataError(f"{where}: malformed pair {pair!r}") from None
            if idx < 0:
                raise DataError(f"{where}: negative feature index {idx}")
            feats.append((idx, val))
        inst = Instance(domain_id, label, feats)
        _validate_instance(inst, feature_dim, num_domains, num_classes, where)
        instances.append(inst)

    return Corpus(instances, feature_dim, num_domains, num_classes,
                  _default_names("domain", num_domains), _default_names("class", num_classes))


def save_sparse(corpus: Corpus, path) -> None:
    """Write the corpus in the file grammar; floats use repr for exact round-trips."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"dim={corpus.feature_dim} domains={corpus.num_domains} "
                 f"classes={corpus.num_classes}\n")
        for i, inst in enumerate(corpus.instances):
            if not inst.features:
                raise DataError(f"instance {i} has no features; the file grammar "
                                f"requires at least one index:value pair")
            pairs = " ".join(f"{idx}:{val!r}" for idx, val in inst.features)
            fh.write(f"{inst.domain_id}\t{inst.label}\t{pairs}\n")


def topk_features(corpus: Corpus, k: int) -> Corpus:
    """Keep the k most frequent features, remapped to 0..k-1 in frequency order.

    Frequency is the number of instances containing the feature; ties break
    toward the lower original index. Idempotent for a fixed k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts = Counter()
    for inst in corpus.instances:
        counts.update(idx for idx, _ in inst.features)
    ranked = sorted(counts, key=lambda idx: (-counts[idx], idx))[:k]
    remap = {old: new for new, old in enumerate(ranked)}

    instances = []
    for inst in corpus.instances:
        feats = sorted((remap[idx], val) for idx, val in inst.features if idx in remap)
        instances.append(Instance(inst.domain_id, inst.label, feats))
    return Corpus(instances, len(ranked), corpus.num_domains, corpus.num_classes,
                  list(corpus.domain_names), list(corpus.class_names))


def split(corpus: Corpus, ratios, seed: int):
    """Deterministic stratified (domain, class) split into (train, dev, test).

    dev and test sizes are floors of their ratios (bumped to 1 when the ratio
    is positive), the remainder goes to train. Cells too small to populate
    every split are an error.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    buckets = ([], [], [])
    for (d, c), idxs in sorted(corpus.cell_indices().items()):
        n = len(idxs)
        if n < 3:
            raise DataError(f"cell (domain={d}, class={c}) has {n} instances; "
                            f"at least 3 are needed to populate train/dev/test")
        n_dev = max(1, int(np.floor(ratios[1] * n)))
        n_test = max(1, int(np.floor(ratios[2] * n)))
        n_train = n - n_dev - n_test
        if n_train < 1:
            raise DataError(f"cell (domain={d}, class={c}) with {n} instances cannot "
                            f"populate all splits at ratios {ratios}")
        order = rng.permutation(n)
        shuffled = [idxs[i] for i in order]
        buckets[0].extend(shuffled[:n_train])
        buckets[1].extend(shuffled[n_train:n_train + n_dev])
        buckets[2].extend(shuffled[n_train + n_dev:])
    return tuple(corpus.subset(sorted(b)) for b in buckets)


@dataclass(frozen=True)
class SynthConfig:
    num_domains: int = 4
    num_classes: int = 2
    per_cell: int = 500
    feature_dim: int = 64
    class_separation: float = 3.0
    domain_shift: float = 2.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_domains, self.num_classes, self.per_cell, self.feature_dim) < 1:
            raise ValueError("all counts must be >= 1")
        if min(self.class_separation, self.domain_shift, self.noise_std) < 0:
            raise ValueError("all magnitudes must be >= 0")
        if self.feature_dim < self.num_classes:
            raise ValueError(f"feature_dim {self.feature_dim} < num_classes {self.num_classes}")


def _random_orthogonal(rng, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def synth_generate(cfg: SynthConfig) -> Corpus:
    """Gaussian class clusters, per-domain rotated and offset.

    Class prototypes are orthogonal directions with pairwise distance
    class_separation. Each domain applies an orthogonal transform blended
    toward identity by min(domain_shift, 1) plus a random offset of norm
    domain_shift; instances add isotropic noise_std noise. Bit-reproducible
    for a fixed config.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim

    basis = _random_orthogonal(rng, d)[:, :cfg.num_classes]
    protos = basis.T * (cfg.class_separation / np.sqrt(2.0))

    transforms, offsets = [], []
    blend = min(cfg.domain_shift, 1.0)
    for _ in range(cfg.num_domains):
        q = _random_orthogonal(rng, d)
        mixed, r = np.linalg.qr((1.0 - blend) * np.eye(d) + blend * q)
        transforms.append(mixed * np.sign(np.diag(r)))
        direction = rng.standard_normal(d)
        offsets.append(cfg.domain_shift * direction / np.linalg.norm(direction))

    instances = []
    for dom in range(cfg.num_domains):
        for cls in range(cfg.num_classes):
            center = transforms[dom] @ protos[cls] + offsets[dom]
            for _ in range(cfg.per_cell):
                x = center + cfg.noise_std * rng.standard_normal(d)
                instances.append(Instance(dom, cls, [(i, float(v)) for i, v in enumerate(x)]))

    return Corpus(instances, d, cfg.num_domains, cfg.num_classes,
                  _default_names("domain", cfg.num_domains),
                  _default_names("class", cfg.num_classes))


def stratified_batches(corpus: Corpus, batch_size: int, m: int = 4, seed: int = 0):
    """One epoch of batches; each batch takes m instances from each of
    batch_size/m distinct (domain, class) cells, so every row has at least
    m-1 in-batch domain positives and class positives.

    Every instance appears at most once per epoch; chunks that cannot fill a
    complete batch of distinct cells are dropped.
    """
    if batch_size < 1 or m < 1 or batch_size % m != 0:
        raise ValueError(f"batch_size {batch_size} must be a positive multiple of m {m}")
    if m < 2:
        raise ValueError(f"m must be >= 2 to guarantee in-batch positives, got {m}")
    cells = corpus.cell_indices()
    cells_per_batch = batch_size // m
    if len(cells) < cells_per_batch:
        raise DataError(f"need {cells_per_batch} (domain, class) cells per batch "
                        f"but the corpus has {len(cells)}")
    for (d, c), idxs in sorted(cells.items()):
        if len(idxs) < m:
            raise DataError(f"cell (domain={d}, class={c}) has {len(idxs)} instances, "
                            f"fewer than m={m}")

    rng = np.random.default_rng(seed)
    remaining = {}
    for key, idxs in sorted(cells.items()):
        idxs = [idxs[i] for i in rng.permutation(len(idxs))]
        remaining[key] = [idxs[i:i + m] for i in range(0, len(idxs) - m + 1, m)]

    batches = []
    while True:
        stocked = [key for key, chunks in remaining.items() if chunks]
        if len(stocked) < cells_per_batch:
            break
        # Prefer cells with the most chunks left so coverage stays even.
        priority = rng.random(len(stocked))
        order = sorted(range(len(stocked)),
                       key=lambda i: (-len(remaining[stocked[i]]), priority[i]))
        batch = []
        for i in order[:cells_per_batch]:
            batch.extend(remaining[stocked[i]].pop())
        batches.append(batch)
    return batches
