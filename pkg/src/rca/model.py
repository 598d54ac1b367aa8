"""The network: a domain feature extractor and a category feature extractor
(each an MLP ending in a 128-dim representation by default), concatenated
into a joint representation that a linear classifier maps to logits.

Dropout masks are first-class: a forward pass returns the masks it used so a
second (adversarial) forward can replay the exact same pattern.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor

CHECKPOINT_VERSION = 1
_CHECKPOINT_MAGIC = "rca-checkpoint"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


def extractor_spec(input_dim: int, hidden_dims=(1024, 512), output_dim: int = 128,
                   dropout_rate: float = 0.4) -> MlpSpec:
    return MlpSpec(input_dim, tuple(hidden_dims), output_dim, dropout_rate)


def classifier_spec(num_classes: int, input_dim: int = 256) -> MlpSpec:
    return MlpSpec(input_dim, (), num_classes, 0.0)


@dataclass
class Mlp:
    spec: MlpSpec
    weights: list
    biases: list


@dataclass
class ForwardOut:
    f_d: Tensor
    f_c: Tensor
    h: Tensor
    logits: Tensor
    masks: dict = field(default_factory=dict)


@dataclass
class ModelParams:
    f_d: Mlp
    f_c: Mlp
    clf: Mlp
    seed: int
    detach_domain: bool = False

    def all_params(self):
        """(name, Tensor) pairs in a fixed order."""
        out = []
        for part_name, part in (("f_d", self.f_d), ("f_c", self.f_c), ("clf", self.clf)):
            for i, (w, b) in enumerate(zip(part.weights, part.biases)):
                out.append((f"{part_name}.w{i}", w))
                out.append((f"{part_name}.b{i}", b))
        return out

    def zero_grad(self):
        for _, p in self.all_params():
            p.zero_grad()

    def copy(self) -> "ModelParams":
        def clone(mlp):
            return Mlp(mlp.spec, [Tensor(w.data) for w in mlp.weights],
                       [Tensor(b.data) for b in mlp.biases])

        return ModelParams(clone(self.f_d), clone(self.f_c), clone(self.clf),
                           self.seed, self.detach_domain)


def _init_mlp(spec: MlpSpec, rng) -> Mlp:
    weights, biases = [], []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / fan_in)
        weights.append(Tensor(rng.standard_normal((fan_in, fan_out)) * std))
        biases.append(Tensor(np.zeros(fan_out)))
    return Mlp(spec, weights, biases)


def init_params(spec_d: MlpSpec, spec_c: MlpSpec, spec_clf: MlpSpec, seed: int,
                detach_domain: bool = False) -> ModelParams:
    """He-normal weights (std = sqrt(2/fan_in)), zero biases, deterministic per seed."""
    if spec_clf.input_dim != spec_d.output_dim + spec_c.output_dim:
        raise ValueError(
            f"classifier input dim {spec_clf.input_dim} must equal "
            f"{spec_d.output_dim} + {spec_c.output_dim}"
        )
    rng = np.random.default_rng(seed)
    return ModelParams(
        f_d=_init_mlp(spec_d, rng),
        f_c=_init_mlp(spec_c, rng),
        clf=_init_mlp(spec_clf, rng),
        seed=int(seed),
        detach_domain=detach_domain,
    )


def extract(tape: Tape, mlp: Mlp, x: Tensor, mode: str, rng=None, masks=None):
    """Run one MLP: linear -> relu -> dropout per hidden layer, final linear.

    Returns (output, masks_used). When masks is given it must contain one
    entry per hidden layer and is replayed instead of sampling.
    """
    if x.data.ndim != 2 or x.shape[1] != mlp.spec.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {mlp.spec.input_dim}")
    n_hidden = len(mlp.spec.hidden_dims)
    if masks is not None and len(masks) != n_hidden:
        raise ValueError(f"expected {n_hidden} dropout masks, got {len(masks)}")
    used = []
    h = x
    for i in range(n_hidden):
        h = tape.relu(tape.add_bias(tape.matmul(h, mlp.weights[i]), mlp.biases[i]))
        h, mask = tape.dropout(h, mlp.spec.dropout_rate, mode, rng=rng,
                               mask=None if masks is None else masks[i])
        used.append(mask)
    h = tape.add_bias(tape.matmul(h, mlp.weights[-1]), mlp.biases[-1])
    return h, used


def forward(tape: Tape, model: ModelParams, x: Tensor, mode: str, rng=None,
            masks=None) -> ForwardOut:
    """Joint forward: f_d, f_c, h = concat(f_d, f_c), logits = C(h).

    Gradients reach both extractors through the classifier unless
    model.detach_domain cuts the path from the classifier into f_d.
    """
    m = masks or {}
    f_d, masks_d = extract(tape, model.f_d, x, mode, rng=rng, masks=m.get("f_d"))
    f_c, masks_c = extract(tape, model.f_c, x, mode, rng=rng, masks=m.get("f_c"))
    f_d_for_clf = Tensor(f_d.data) if model.detach_domain else f_d
    h = tape.concat(f_d_for_clf, f_c)
    logits, masks_clf = extract(tape, model.clf, h, mode, rng=rng, masks=m.get("clf"))
    return ForwardOut(f_d=f_d, f_c=f_c, h=h, logits=logits,
                      masks={"f_d": masks_d, "f_c": masks_c, "clf": masks_clf})


# ---- checkpoint io -------------------------------------------------------
#
# Layout: one JSON header line (sorted keys) followed by the raw little-endian
# float64 bytes of every parameter array in all_params() order. Deterministic
# byte-for-byte for identical models.


def _spec_to_dict(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "dropout_rate": spec.dropout_rate,
    }


def _spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(int(d["input_dim"]), tuple(d["hidden_dims"]),
                   int(d["output_dim"]), float(d["dropout_rate"]))


def save_checkpoint(path, model: ModelParams) -> None:
    named = model.all_params()
    header = {
        "magic": _CHECKPOINT_MAGIC,
        "format_version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "detach_domain": model.detach_domain,
        "specs": {
            "f_d": _spec_to_dict(model.f_d.spec),
            "f_c": _spec_to_dict(model.f_c.spec),
            "clf": _spec_to_dict(model.clf.spec),
        },
        "arrays": [{"name": name, "shape": list(p.shape)} for name, p in named],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii"))
        fh.write(b"\n")
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not a checkpoint file ({e})") from None
    if header.get("magic") != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")

    model = init_params(
        _spec_from_dict(header["specs"]["f_d"]),
        _spec_from_dict(header["specs"]["f_c"]),
        _spec_from_dict(header["specs"]["clf"]),
        seed=int(header["seed"]),
        detach_domain=bool(header["detach_domain"]),
    )
    offset = 0
    for entry, (name, p) in zip(header["arrays"], model.all_params()):
        if entry["name"] != name or tuple(entry["shape"]) != p.shape:
            raise ValueError(f"{path}: array layout mismatch at {entry['name']}")
        nbytes = p.size * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated checkpoint at {name}")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return model
