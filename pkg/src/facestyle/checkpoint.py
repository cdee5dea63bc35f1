"""Named-tensor checkpoints in a canonical JSON encoding ("nta-v1").

The byte stream is deterministic: keys sorted, no whitespace, floats via
Python's shortest-round-trip repr. Loading a stream this module wrote and
saving it again reproduces the bytes exactly, which is what makes
checkpoint equality and the endpoint guarantees of weight blending
checkable at the byte level.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_TAG = "nta-v1"


def canonical_json_bytes(obj) -> bytes:
    """Sorted-key, separator-free JSON; rejects NaN and infinities."""
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")


def config_fingerprint(config: dict) -> str:
    """sha256 of the canonical JSON encoding of a run config."""
    return hashlib.sha256(canonical_json_bytes(config)).hexdigest()


def _reject_constant(name):
    raise ValueError(f"checkpoint: non-finite constant {name!r} in stream")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Named float64 tensors plus provenance (config fingerprint, seed)."""

    tensors: dict
    fingerprint: str = ""
    seed: int = 0

    def __post_init__(self):
        clean = {}
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointError("tensor names must be non-empty strings")
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"tensor {name!r} has non-finite values")
            clean[name] = arr
        self.tensors = clean
        self.seed = int(self.seed)

    def to_bytes(self) -> bytes:
        body = {
            "format": FORMAT_TAG,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "tensors": {
                name: {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                for name, arr in self.tensors.items()
            },
        }
        return canonical_json_bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            body = json.loads(
                data.decode("utf-8"), parse_constant=_reject_constant
            )
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"not a checkpoint stream: {e}") from None
        if not isinstance(body, dict) or body.get("format") != FORMAT_TAG:
            raise CheckpointError(
                f"unsupported checkpoint format {body.get('format')!r}"
                if isinstance(body, dict) else "not a checkpoint object"
            )
        tensors = {}
        for name, spec in body.get("tensors", {}).items():
            shape = tuple(int(s) for s in spec["shape"])
            values = np.asarray(spec["values"], dtype=np.float64)
            expected = int(np.prod(shape)) if shape else 1
            if values.size != expected:
                raise CheckpointError(
                    f"tensor {name!r}: {values.size} values for shape {shape}"
                )
            tensors[name] = values.reshape(shape)
        return cls(tensors, body.get("fingerprint", ""), body.get("seed", 0))

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def group(self, prefix: str) -> dict:
        """Tensors under `prefix.`, with the prefix stripped."""
        head = prefix + "."
        out = {
            name[len(head):]: arr
            for name, arr in self.tensors.items()
            if name.startswith(head)
        }
        if not out:
            raise KeyError(f"checkpoint has no tensors under {prefix!r}")
        return out

    def prefixes(self):
        return sorted({name.split(".", 1)[0] for name in self.tensors})


def save_checkpoint(models: dict, path, fingerprint: str = "", seed: int = 0):
    """Write one checkpoint holding each model's tensors under its name.

    `models` maps a prefix to anything with `state_arrays() -> {name: array}`.
    """
    tensors = {}
    for prefix, model in models.items():
        for name, arr in model.state_arrays().items():
            tensors[f"{prefix}.{name}"] = arr
    ckpt = Checkpoint(tensors, fingerprint, seed)
    ckpt.save(path)
    return ckpt


def load_checkpoint(path, expected_fingerprint: str = None, force: bool = False):
    with open(path, "rb") as f:
        ckpt = Checkpoint.from_bytes(f.read())
    if (
        expected_fingerprint is not None
        and ckpt.fingerprint != expected_fingerprint
        and not force
    ):
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {ckpt.fingerprint[:12]}..., "
            f"expected {expected_fingerprint[:12]}... (pass force to override)"
        )
    return ckpt


def blend_checkpoints(a: Checkpoint, b: Checkpoint, alpha: float) -> Checkpoint:
    """alpha * A + (1 - alpha) * B per tensor; exact copies at the endpoints.

    The endpoints are special-cased because `A + 0.0 * B` is not bitwise A
    when A holds negative zeros.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"blend: alpha must lie in [0, 1], got {alpha}")
    if a.tensors.keys() != b.tensors.keys():
        only_a = sorted(a.tensors.keys() - b.tensors.keys())
        only_b = sorted(b.tensors.keys() - a.tensors.keys())
        raise CheckpointError(
            f"blend: tensor names differ (only in A: {only_a[:3]}, "
            f"only in B: {only_b[:3]})"
        )
    for name in a.tensors:
        if a.tensors[name].shape != b.tensors[name].shape:
            raise CheckpointError(
                f"blend: shape mismatch for {name!r}: "
                f"{a.tensors[name].shape} vs {b.tensors[name].shape}"
            )
    if alpha == 1.0:
        tensors = {k: v.copy() for k, v in a.tensors.items()}
    elif alpha == 0.0:
        tensors = {k: v.copy() for k, v in b.tensors.items()}
    else:
        tensors = {
            k: alpha * a.tensors[k] + (1.0 - alpha) * b.tensors[k]
            for k in a.tensors
        }
    fp = config_fingerprint(
        {"blend": [a.fingerprint, b.fingerprint], "alpha": alpha}
    )
    return Checkpoint(tensors, fp, a.seed)
