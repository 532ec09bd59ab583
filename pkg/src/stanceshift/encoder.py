"""Statement+target featurization, a small unit-norm embedding encoder, and the
softmax stance head, with hand-written backpropagation.

Features are a signed hashed bag of word n-grams (orders 1-2) over the sequence
``statement ⊕ <sep> ⊕ target``.  Each n-gram is keyed-BLAKE2b hashed (8-byte
digest, key = the hash seed as 8 little-endian bytes); the bucket is the digest
modulo the feature dimension and the sign comes from the digest's top bit.
Bucket values accumulate occurrence counts times the sign and the vector is
L2-normalized.

The encoder is ``h = relu(W1' f + b1)``, ``u = W2' h + b2``, ``z = u / |u|``;
the head is ``softmax(Wc' z + bc)``.  Backprop through the normalization uses
the exact Jacobian ``(I - z z') / |u|``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Example
from .util import ValidationError

SEP_TOKEN = "<sep>"
N_FEATURES = 1 << 16

_CHECKPOINT_MAGIC = b"SSCK"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FeatureVector:
    """Sparse L2-normalized signed hashed bag of n-grams."""

    indices: np.ndarray  # int64, strictly increasing
    values: np.ndarray  # float64
    n_features: int


def _hash_ngram(gram: tuple[str, ...], key: bytes) -> int:
    digest = hashlib.blake2b("\x1f".join(gram).encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def featurize(example: Example, hash_seed: int, n_features: int = N_FEATURES) -> FeatureVector:
    """Hash the statement+target n-grams of an example into a unit sparse vector."""
    if not example.tokens:
        raise ValidationError(f"example {example.id!r} has no tokens")
    seq = example.tokens + (SEP_TOKEN,) + example.target
    key = (int(hash_seed) & ((1 << 64) - 1)).to_bytes(8, "little")
    acc: dict[int, float] = {}
    for n in (1, 2):
        for pos in range(len(seq) - n + 1):
            h = _hash_ngram(seq[pos : pos + n], key)
            bucket = h % n_features
            sign = 1.0 if (h >> 63) == 0 else -1.0
            acc[bucket] = acc.get(bucket, 0.0) + sign
    items = [(b, v) for b, v in sorted(acc.items()) if v != 0.0]
    if not items:
        raise ValidationError(f"example {example.id!r}: all hashed features cancelled")
    indices = np.array([b for b, _ in items], dtype=np.int64)
    values = np.array([v for _, v in items], dtype=np.float64)
    values /= np.linalg.norm(values)
    return FeatureVector(indices=indices, values=values, n_features=n_features)


@dataclass
class ModelState:
    """Encoder + classifier parameters, with optional optimizer moments."""

    W1: np.ndarray  # (n_features, d_hidden)
    b1: np.ndarray  # (d_hidden,)
    W2: np.ndarray  # (d_hidden, d_embed)
    b2: np.ndarray  # (d_embed,)
    Wc: np.ndarray  # (d_embed, k)
    bc: np.ndarray  # (k,)
    labels: tuple[str, ...]
    hash_seed: int
    init_seed: int
    moments: dict = field(default_factory=dict)
    step: int = 0

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def d_embed(self) -> int:
        return self.W2.shape[1]

    @property
    def k(self) -> int:
        return self.Wc.shape[1]

    def param_items(self):
        return [("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2),
                ("Wc", self.Wc), ("bc", self.bc)]

    def copy_params(self) -> "ModelState":
        """Snapshot of the parameters only; optimizer moments are dropped."""
        return ModelState(
            W1=self.W1.copy(), b1=self.b1.copy(), W2=self.W2.copy(), b2=self.b2.copy(),
            Wc=self.Wc.copy(), bc=self.bc.copy(), labels=self.labels,
            hash_seed=self.hash_seed, init_seed=self.init_seed, moments={}, step=self.step,
        )


def init_state(labels, d_hidden: int = 128, d_embed: int = 64,
               n_features: int = N_FEATURES, init_seed: int = 0, hash_seed: int = 0) -> ModelState:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    labels = tuple(labels)
    if len(labels) < 2:
        raise ValidationError(f"need at least 2 classes, got {labels}")
    rng = np.random.default_rng(init_seed)

    def kaiming(fan_in, shape):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelState(
        W1=kaiming(n_features, (n_features, d_hidden)),
        b1=np.zeros(d_hidden),
        W2=kaiming(d_hidden, (d_hidden, d_embed)),
        b2=np.zeros(d_embed),
        Wc=kaiming(d_embed, (d_embed, len(labels))),
        bc=np.zeros(len(labels)),
        labels=labels,
        hash_seed=int(hash_seed),
        init_seed=int(init_seed),
    )


@dataclass
class Forward:
    """Cached activations of a batch forward pass."""

    fvs: list
    H_pre: np.ndarray  # (B, d_hidden)
    H: np.ndarray
    U: np.ndarray  # (B, d_embed)
    norms: np.ndarray  # (B,)
    Z: np.ndarray  # (B, d_embed), unit rows


def forward_batch(state: ModelState, fvs) -> Forward:
    B = len(fvs)
    H_pre = np.empty((B, state.d_hidden))
    for i, fv in enumerate(fvs):
        if fv.n_features != state.n_features:
            raise ValidationError(
                f"feature dimension {fv.n_features} does not match model {state.n_features}"
            )
        H_pre[i] = fv.values @ state.W1[fv.indices] + state.b1
    H = np.maximum(H_pre, 0.0)
    U = H @ state.W2 + state.b2
    norms = np.linalg.norm(U, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ValueError(f"collapsed embedding: |u| = {norms[bad]:.3e} for batch item {bad}")
    Z = U / norms[:, None]
    return Forward(fvs=list(fvs), H_pre=H_pre, H=H, U=U, norms=norms, Z=Z)


def encode(state: ModelState, fv: FeatureVector) -> np.ndarray:
    """Unit-norm embedding of a single feature vector."""
    return forward_batch(state, [fv]).Z[0]


def logits_batch(state: ModelState, Z: np.ndarray) -> np.ndarray:
    return Z @ state.Wc + state.bc


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def classify(state: ModelState, z: np.ndarray) -> np.ndarray:
    """Class probabilities for one unit-norm embedding; sums to 1."""
    z = np.asarray(z, dtype=np.float64)
    return np.exp(log_softmax(z @ state.Wc + state.bc))


@dataclass
class Gradients:
    """Parameter gradients; the first layer is row-sparse."""

    w1_rows: np.ndarray  # unique feature indices touched by the batch
    w1_grads: np.ndarray  # (len(w1_rows), d_hidden)
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    def dense_w1(self, n_features: int) -> np.ndarray:
        out = np.zeros((n_features, self.b1.shape[0]))
        out[self.w1_rows] = self.w1_grads
        return out


def backward(state: ModelState, fwd: Forward, d_z: np.ndarray | None,
             d_logits: np.ndarray | None) -> Gradients:
    """Exact gradients of a composed loss given upstream grads wrt z and logits.

    The normalization Jacobian projects away the radial component:
    du = (dz - (dz . z) z) / |u|.
    """
    B = fwd.Z.shape[0]
    if d_z is None:
        d_z = np.zeros_like(fwd.Z)
    if d_logits is None:
        d_logits = np.zeros((B, state.k))
    d_z = np.asarray(d_z, dtype=np.float64)
    d_logits = np.asarray(d_logits, dtype=np.float64)

    dWc = fwd.Z.T @ d_logits
    dbc = d_logits.sum(axis=0)
    dZ_total = d_z + d_logits @ state.Wc.T

    radial = (dZ_total * fwd.Z).sum(axis=1, keepdims=True)
    dU = (dZ_total - radial * fwd.Z) / fwd.norms[:, None]

    dW2 = fwd.H.T @ dU
    db2 = dU.sum(axis=0)
    dH = dU @ state.W2.T
    dPre = dH * (fwd.H_pre > 0)
    db1 = dPre.sum(axis=0)

    all_rows = np.concatenate([fv.indices for fv in fwd.fvs])
    contrib = np.concatenate(
        [fv.values[:, None] * dPre[i][None, :] for i, fv in enumerate(fwd.fvs)]
    )
    rows, inverse = np.unique(all_rows, return_inverse=True)
    w1_grads = np.zeros((rows.shape[0], state.d_hidden))
    np.add.at(w1_grads, inverse, contrib)

    return Gradients(w1_rows=rows, w1_grads=w1_grads, b1=db1, W2=dW2, b2=db2, Wc=dWc, bc=dbc)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# Layout (little-endian throughout):
#   bytes 0-3   magic "SSCK"
#   bytes 4-7   format version (uint32)
#   bytes 8-15  header length L (uint64)
#   bytes 16..  UTF-8 JSON header of exactly L bytes, sorted keys:
#                 {"arrays": [{"name", "shape"}...], "labels", "hash_seed",
#                  "init_seed", "step", "moments": [names...]}
#   then one raw float64 C-order array per header entry, in header order.
# No timestamps are embedded, so identical states produce identical bytes.


def save_checkpoint(state: ModelState, path) -> None:
    arrays = list(state.param_items())
    moment_names = []
    for name, arr in sorted(state.moments.items()):
        arrays.append((f"moment:{name}", arr))
        moment_names.append(name)
    header = {
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        "labels": list(state.labels),
        "hash_seed": state.hash_seed,
        "init_seed": state.init_seed,
        "step": state.step,
        "moments": moment_names,
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(_CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        if fh.read(4) != _CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        version = int.from_bytes(fh.read(4), "little")
        if version != _CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(int.from_bytes(fh.read(8), "little")).decode("utf-8"))
        loaded = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            loaded[entry["name"]] = arr
    moments = {name: loaded[f"moment:{name}"] for name in header["moments"]}
    return ModelState(
        W1=loaded["W1"], b1=loaded["b1"], W2=loaded["W2"], b2=loaded["b2"],
        Wc=loaded["Wc"], bc=loaded["bc"], labels=tuple(header["labels"]),
        hash_seed=int(header["hash_seed"]), init_seed=int(header["init_seed"]),
        moments=moments, step=int(header["step"]),
    )
